import math

import numpy as np
import pytest

from flowsynth.codec import SymbolDataset
from flowsynth.errors import DataError, DivergenceError, UsageError
from flowsynth.models import ModelConfig, count_params, forward, init_params
from flowsynth.rng import Rng
from flowsynth.tensor import EVAL, Tensor, backward, zero_grad
from flowsynth.training import (
    AdamState,
    TrainConfig,
    adam_step,
    clip_gradients,
    holdout_split,
    load_checkpoint,
    make_batches,
    save_checkpoint,
    sgd_step,
    train,
    write_loss_csv,
)


def toy_dataset(n=200, length=6, k=12, seed=0):
    rng = np.random.default_rng(seed)
    seqs = np.column_stack(
        [np.full(n, k, dtype=np.int64)] + [rng.integers(0, k, size=n) for _ in range(length - 1)]
    )
    return SymbolDataset(sequences=seqs, vocab_size=k + 1)


def tiny_config(arch="rnn", vocab=13, context=5):
    return ModelConfig(arch=arch, vocab_size=vocab, context_length=context, embed_dim=8, hidden_dim=16)


def test_make_batches_shift_by_one():
    ds = SymbolDataset(sequences=np.array([[9, 3, 7]]), vocab_size=10)
    inputs, targets = next(make_batches(ds, 4, Rng(0)))
    np.testing.assert_array_equal(inputs, [[9, 3]] * 4)
    np.testing.assert_array_equal(targets, [[3, 7]] * 4)


def test_make_batches_shapes():
    ds = toy_dataset(n=500, length=10, k=49)
    inputs, targets = next(make_batches(ds, 64, Rng(1)))
    assert inputs.shape == (64, 9)
    assert targets.shape == (64, 9)


def test_make_batches_deterministic_stream():
    ds = toy_dataset()
    a = make_batches(ds, 8, Rng(5))
    b = make_batches(ds, 8, Rng(5))
    for _ in range(5):
        ia, _ = next(a)
        ib, _ = next(b)
        np.testing.assert_array_equal(ia, ib)


def test_make_batches_rejects_short_sequences():
    ds = SymbolDataset(sequences=np.array([[3]]), vocab_size=4)
    with pytest.raises(DataError):
        next(make_batches(ds, 2, Rng(0)))


def test_sgd_hand_value_on_quadratic():
    # (w-3)^2 from w=0: grad -6, lr 0.1 -> w becomes 0.6
    w = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
    loss = ((w - 3.0) * (w - 3.0)).sum()
    backward(loss)
    sgd_step({"w": w}, lr=0.1)
    assert w.data[0] == pytest.approx(0.6, abs=1e-12)


def test_zero_gradient_changes_nothing():
    w = Tensor(np.array([1.5]), requires_grad=True, dtype=np.float64)
    w.grad = np.zeros(1)
    before = w.data.copy()
    sgd_step({"w": w}, lr=0.5)
    np.testing.assert_array_equal(w.data, before)
    state = AdamState()
    adam_step({"w": w}, state, lr=0.5)
    np.testing.assert_array_equal(w.data, before)
    assert state.t == 1  # only optimizer state moved


def test_adam_matches_scalar_simulation_and_converges():
    lr = 0.05
    w = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
    state = AdamState()
    # independent scalar oracle
    b1, b2, eps = 0.9, 0.999, 1e-8
    m = v = 0.0
    ow = 0.0
    for t in range(1, 2001):
        loss = ((w - 3.0) * (w - 3.0)).sum()
        backward(loss)
        adam_step({"w": w}, state, lr)
        zero_grad([w])
        g = 2.0 * (ow - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ow -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        if t <= 50:
            assert w.data[0] == pytest.approx(ow, abs=1e-12)
    assert abs(w.data[0] - 3.0) < 1e-3
    assert abs(ow - 3.0) < 1e-3


def test_clip_gradients_bounds_global_norm():
    rng = np.random.default_rng(0)
    params = {}
    for i in range(4):
        t = Tensor(rng.standard_normal(10), requires_grad=True)
        t.grad = rng.standard_normal(10).astype(np.float32) * 50
        params[f"p{i}"] = t
    clip_gradients(params, 5.0)
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values()))
    assert total <= 5.0 + 1e-6


def test_clip_gradients_rejects_nonfinite():
    t = Tensor(np.ones(3), requires_grad=True)
    t.grad = np.array([1.0, np.inf, 0.0], dtype=np.float32)
    with pytest.raises(DivergenceError):
        clip_gradients({"w": t}, 5.0)


def test_holdout_split_is_content_based():
    ds = toy_dataset(n=400)
    train_idx, hold_idx = holdout_split(ds, 0.1)
    assert len(train_idx) + len(hold_idx) == 400
    assert 0.02 <= len(hold_idx) / 400 <= 0.25
    perm = np.random.default_rng(3).permutation(400)
    shuffled = SymbolDataset(sequences=ds.sequences[perm], vocab_size=ds.vocab_size)
    t2, h2 = holdout_split(shuffled, 0.1)
    # same sequences end up on the same side, in the same canonical order
    np.testing.assert_array_equal(ds.sequences[train_idx], shuffled.sequences[t2])
    np.testing.assert_array_equal(ds.sequences[hold_idx], shuffled.sequences[h2])


def test_training_loss_invariant_under_dataset_permutation():
    ds = toy_dataset(n=120, length=5, k=8)
    perm = np.random.default_rng(9).permutation(120)
    shuffled = SymbolDataset(sequences=ds.sequences[perm], vocab_size=ds.vocab_size)
    config = tiny_config(vocab=9, context=4)
    tcfg = TrainConfig(max_steps=25, batch_size=8, seed=3)
    _, r1 = train(config, ds, tcfg)
    _, r2 = train(config, shuffled, tcfg)
    assert r1.train_losses == r2.train_losses


def test_step0_anchors_and_trend():
    ds = toy_dataset(n=300, length=6, k=12, seed=2)
    config = tiny_config()
    tcfg = TrainConfig(max_steps=300, batch_size=16, seed=1, eval_every=100)
    params, report = train(config, ds, tcfg)
    anchor = math.log(13)
    assert 0.95 * anchor <= report.step0_loss <= 1.05 * anchor
    step0_holdout = report.holdout_losses[0]
    assert step0_holdout[0] == 0
    assert abs(step0_holdout[1] - report.step0_loss) <= 0.02 * report.step0_loss
    n = len(report.train_losses)
    head = float(np.mean(report.train_losses[: n // 10]))
    tail = float(np.mean(report.train_losses[-(n // 10) :]))
    assert tail < head  # decreasing trend, as a whole-run property


def test_divergence_guard_trips():
    ds = toy_dataset(n=100, length=5, k=8, seed=4)
    config = tiny_config(vocab=9, context=4)
    tcfg = TrainConfig(max_steps=40, batch_size=8, optimizer="sgd", learning_rate=1e5, seed=0)
    with pytest.raises(DivergenceError):
        train(config, ds, tcfg)


def test_vocab_mismatch_rejected():
    ds = toy_dataset(k=12)
    config = tiny_config(vocab=99)
    with pytest.raises(DataError, match="vocab"):
        train(config, ds, TrainConfig(max_steps=1, seed=0))


def test_train_config_validation():
    with pytest.raises(UsageError):
        TrainConfig(max_steps=0)
    with pytest.raises(UsageError):
        TrainConfig(max_steps=1, holdout_fraction=0.6)
    with pytest.raises(UsageError):
        TrainConfig(max_steps=1, optimizer="momentum")
    assert TrainConfig(max_steps=1, optimizer="sgd").learning_rate == 0.1
    assert TrainConfig(max_steps=1, optimizer="adam").learning_rate == 3e-4


def test_training_is_bit_deterministic():
    ds = toy_dataset(n=150, length=5, k=10, seed=6)
    config = tiny_config(vocab=11, context=4)
    tcfg = TrainConfig(max_steps=30, batch_size=8, seed=12)
    p1, r1 = train(config, ds, tcfg)
    p2, r2 = train(config, ds, tcfg)
    assert r1.train_losses == r2.train_losses
    for name in p1:
        assert np.array_equal(p1[name].data, p2[name].data)


# --- checkpoints -----------------------------------------------------------


def _trained_tiny(tmp_path, arch="rnn"):
    ds = toy_dataset(n=80, length=5, k=10, seed=8)
    config = ModelConfig(arch=arch, vocab_size=11, context_length=4, embed_dim=8, hidden_dim=16)
    params, _ = train(config, ds, TrainConfig(max_steps=10, batch_size=8, seed=2))
    path = tmp_path / f"{arch}.ckpt"
    save_checkpoint(params, config, path)
    return config, params, path


def test_checkpoint_roundtrip_forward_bit_identical(tmp_path):
    config, params, path = _trained_tiny(tmp_path)
    loaded_config, loaded = load_checkpoint(path)
    assert loaded_config == config or (
        loaded_config.arch == config.arch
        and loaded_config.vocab_size == config.vocab_size
        and loaded_config.context_length == config.context_length
        and loaded_config.hidden_dim == config.hidden_dim
    )
    ids = np.random.default_rng(0).integers(0, 11, size=(6, 4))
    a = forward(config, params, ids, mode=EVAL).data
    b = forward(loaded_config, loaded, ids, mode=EVAL).data
    assert np.array_equal(a, b)


def test_checkpoint_rerun_byte_identical(tmp_path):
    _, params, path = _trained_tiny(tmp_path)
    config2, params2, path2 = _trained_tiny(tmp_path)
    save_checkpoint(params2, config2, tmp_path / "again.ckpt")
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_magic_guard(tmp_path):
    _, _, path = _trained_tiny(tmp_path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(DataError, match="not a flowsynth checkpoint"):
        load_checkpoint(bad)


def test_checkpoint_crc_guard(tmp_path):
    _, _, path = _trained_tiny(tmp_path)
    blob = bytearray(path.read_bytes())
    blob[20] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(DataError, match="CRC"):
        load_checkpoint(bad)


def test_checkpoint_truncation_guard(tmp_path):
    _, _, path = _trained_tiny(tmp_path)
    blob = path.read_bytes()[:-9]
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(blob)
    with pytest.raises(DataError):
        load_checkpoint(bad)


def test_checkpoint_byte_size_formula(tmp_path):
    config, params, path = _trained_tiny(tmp_path)
    expected = 16  # magic + version + arch + count + context + heads + pad
    for name in params:
        numel = int(np.prod(params[name].data.shape))
        expected += 2 + len(name.encode("utf-8")) + 1 + 4 * params[name].data.ndim + 4 * numel
    expected += 4  # CRC trailer
    assert path.stat().st_size == expected
    assert count_params(config) == sum(p.data.size for p in params.values())


def test_checkpoint_recovers_custom_wavenet_config(tmp_path):
    config = ModelConfig(
        arch="wavenet", vocab_size=9, context_length=7, embed_dim=8,
        hidden_dim=12, conv_kernel=3, dilations=(1, 3),
    )
    params = init_params(config, Rng(4))
    path = tmp_path / "w.ckpt"
    save_checkpoint(params, config, path)
    loaded_config, _ = load_checkpoint(path)
    assert loaded_config.dilations == (1, 3)
    assert loaded_config.conv_kernel == 3
    assert loaded_config.hidden_dim == 12


def test_write_loss_csv(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_csv(path, [(0, 3.912), (1, 2.5)])
    assert path.read_text().splitlines() == ["step,loss", "0,3.912", "1,2.5"]
