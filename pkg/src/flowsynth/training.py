"""Mini-batch training loop, optimizers, and checkpoint persistence.

Teacher forcing over encoded symbol sentences: inputs are positions
0..L-2, targets are positions 1..L-1. The recorded loss unit is nats per
position (the summed-per-sequence, averaged-over-sequences form divided
by the fixed sequence length), so ln(vocab) is the untrained anchor.

The train/holdout split hashes sequence content, not file position:
permuting the dataset on disk moves no sequence across the split, and
batches drawn from the canonically ordered training pool are identical
under permutation too.
"""

from __future__ import annotations

import re
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .codec import SymbolDataset
from .errors import DataError, DivergenceError, UsageError
from .models import ModelConfig, ModelParams, forward, init_params, is_buffer, param_shapes
from .models import RNN, TRANSFORMER, WAVENET
from .rng import Rng, derive_seed, fnv1a64, splitmix64
from .tensor import EVAL, TRAIN, Tensor, backward, zero_grad

SGD = "sgd"
ADAM = "adam"
_DEFAULT_LR = {SGD: 0.1, ADAM: 3e-4}
_DECAY_AT_FRACTION = 2.0 / 3.0  # lr x0.1 for the final third of training
_HOLDOUT_CHUNK = 512


@dataclass
class TrainConfig:
    max_steps: int
    batch_size: int = 64
    optimizer: str = ADAM
    learning_rate: float = 0.0  # 0 -> optimizer default (sgd 0.1, adam 3e-4)
    grad_clip_norm: float = 5.0
    seed: int = 0
    eval_every: int = 100
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.max_steps < 1:
            raise UsageError("max_steps must be positive")
        if self.batch_size < 1:
            raise UsageError("batch_size must be positive")
        if self.optimizer not in (SGD, ADAM):
            raise UsageError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise UsageError("learning_rate must be positive")
        if not 0.0 < self.holdout_fraction < 0.5:
            raise UsageError("holdout_fraction must be in (0, 0.5)")
        if self.eval_every < 1:
            raise UsageError("eval_every must be positive")
        if self.learning_rate == 0.0:
            self.learning_rate = _DEFAULT_LR[self.optimizer]


@dataclass
class TrainReport:
    train_losses: list[float]
    holdout_losses: list[tuple[int, float]]  # (step, loss) pairs
    wall_time_s: float
    param_count: int

    @property
    def step0_loss(self) -> float:
        return self.train_losses[0]

    @property
    def final_train_loss(self) -> float:
        tail = self.train_losses[-10:]
        return float(np.mean(tail))

    @property
    def final_holdout_loss(self) -> float:
        return self.holdout_losses[-1][1]


def _sequence_key(row: np.ndarray) -> int:
    """Content hash of one sequence; mixed so raw symbol values spread."""
    _, mixed = splitmix64(fnv1a64(row.astype(np.int64).tobytes()))
    return mixed


def holdout_split(dataset: SymbolDataset, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Split sequence indices by content hash.

    Seed-free and position-free: the same sentence lands on the same side
    in every run and under any dataset permutation. Training indices come
    back canonically ordered (by hash) so batch streams are permutation
    invariant as well.
    """
    keys = np.array([_sequence_key(row) for row in dataset.sequences], dtype=np.uint64)
    threshold = np.uint64(int(fraction * 2.0**64))
    holdout_mask = keys < threshold
    train_idx = np.where(~holdout_mask)[0]
    hold_idx = np.where(holdout_mask)[0]
    train_idx = train_idx[np.argsort(keys[train_idx], kind="stable")]
    hold_idx = hold_idx[np.argsort(keys[hold_idx], kind="stable")]
    return train_idx, hold_idx


def make_batches(dataset: SymbolDataset, batch_size: int, rng: Rng, indices: np.ndarray | None = None):
    """Endless stream of (inputs [B, L-1], targets [B, L-1]) id batches.

    Sequence indices are drawn uniformly with replacement from `indices`
    (default: the whole dataset); the same rng seed yields the same
    stream.
    """
    if dataset.sequence_length < 2:
        raise DataError("sequences must have length >= 2 to form (input, target) pairs")
    pool = np.arange(dataset.n_sequences) if indices is None else np.asarray(indices)
    if pool.size == 0:
        raise DataError("empty dataset")
    n = int(pool.size)
    while True:
        picks = pool[[rng.randbelow(n) for _ in range(batch_size)]]
        seqs = dataset.sequences[picks]
        yield seqs[:, :-1], seqs[:, 1:]


def _position_loss(config: ModelConfig, params: ModelParams, inputs: np.ndarray, targets: np.ndarray, mode: str) -> Tensor:
    logits = forward(config, params, inputs, mode=mode)
    b, t, v = logits.shape
    flat = T.reshape(logits, (b * t, v))
    return T.cross_entropy(flat, targets.reshape(-1))  # default divisor = positions


def holdout_loss(config: ModelConfig, params: ModelParams, dataset: SymbolDataset, indices: np.ndarray) -> float:
    """Mean nats/position over the held-out sequences, eval mode."""
    total_nll = 0.0
    total_positions = 0
    for start in range(0, len(indices), _HOLDOUT_CHUNK):
        chunk = indices[start : start + _HOLDOUT_CHUNK]
        seqs = dataset.sequences[chunk]
        loss = _position_loss(config, params, seqs[:, :-1], seqs[:, 1:], EVAL)
        positions = seqs.shape[0] * (seqs.shape[1] - 1)
        total_nll += loss.item() * positions
        total_positions += positions
    return total_nll / max(total_positions, 1)


def _trainable(params: ModelParams) -> list[tuple[str, Tensor]]:
    return [(name, p) for name, p in sorted(params.items()) if p.requires_grad]


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm."""
    total = 0.0
    grads = []
    for _, p in _trainable(params):
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise DivergenceError("non-finite gradient")
        total += float(np.sum(p.grad.astype(np.float64) ** 2))
        grads.append(p)
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in grads:
            p.grad = p.grad * p.grad.dtype.type(scale)
    return norm


def sgd_step(params: ModelParams, lr: float) -> None:
    for _, p in _trainable(params):
        if p.grad is not None:
            p.data = p.data - p.data.dtype.type(lr) * p.grad


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ModelParams, state: AdamState, lr: float) -> None:
    """Standard Adam with bias correction."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correct1 = 1.0 - b1**state.t
    correct2 = 1.0 - b2**state.t
    for name, p in _trainable(params):
        if p.grad is None:
            continue
        g = p.grad.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / correct1) / (np.sqrt(v / correct2) + state.eps)
        p.data = (p.data.astype(np.float64) - lr * update).astype(p.data.dtype)


def train(
    config: ModelConfig,
    dataset: SymbolDataset,
    tcfg: TrainConfig,
    params: ModelParams | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Run tcfg.max_steps teacher-forced updates; returns final params.

    Aborts with DivergenceError if the loss goes NaN, or if after the
    first 10% of steps the smoothed loss exceeds twice the initial loss.
    """
    if config.vocab_size != dataset.vocab_size:
        raise DataError(
            f"model vocab {config.vocab_size} != dataset vocab {dataset.vocab_size}"
        )
    if config.context_length < dataset.sequence_length - 1:
        raise DataError(
            f"model context {config.context_length} shorter than input length "
            f"{dataset.sequence_length - 1}"
        )
    started = time.perf_counter()
    if params is None:
        params = init_params(config, Rng(derive_seed(tcfg.seed, "init")))
    train_idx, hold_idx = holdout_split(dataset, tcfg.holdout_fraction)
    if train_idx.size == 0:
        raise DataError("holdout split left no training sequences")
    batches = make_batches(dataset, tcfg.batch_size, Rng(derive_seed(tcfg.seed, "batches")), train_idx)

    adam_state = AdamState()
    train_losses: list[float] = []
    holdout_losses: list[tuple[int, float]] = []
    warmup = max(1, tcfg.max_steps // 10)
    decay_at = int(tcfg.max_steps * _DECAY_AT_FRACTION)
    initial_loss = None

    for step in range(tcfg.max_steps):
        inputs, targets = next(batches)
        try:
            loss = _position_loss(config, params, inputs, targets, TRAIN)
        except ValueError as exc:  # softmax NaN inside a diverged forward
            raise DivergenceError(f"forward pass produced non-finite values: {exc}") from exc
        loss_val = loss.item()
        if np.isnan(loss_val):
            raise DivergenceError(f"training loss is NaN at step {step}")
        train_losses.append(loss_val)
        if initial_loss is None:
            initial_loss = loss_val
        if step >= warmup:
            smoothed = float(np.mean(train_losses[-10:]))
            if smoothed > 2.0 * initial_loss:
                raise DivergenceError(
                    f"smoothed loss {smoothed:.4f} exceeds 2x initial {initial_loss:.4f} at step {step}"
                )
        if step % tcfg.eval_every == 0 and hold_idx.size:
            holdout_losses.append((step, holdout_loss(config, params, dataset, hold_idx)))

        backward(loss)
        clip_gradients(params, tcfg.grad_clip_norm)
        lr = tcfg.learning_rate * (0.1 if step >= decay_at else 1.0)
        if tcfg.optimizer == SGD:
            sgd_step(params, lr)
        else:
            adam_step(params, adam_state, lr)
        zero_grad(p for _, p in _trainable(params))

    if hold_idx.size:
        holdout_losses.append((tcfg.max_steps, holdout_loss(config, params, dataset, hold_idx)))
    report = TrainReport(
        train_losses=train_losses,
        holdout_losses=holdout_losses,
        wall_time_s=time.perf_counter() - started,
        param_count=sum(p.data.size for p in params.values()),
    )
    return params, report


def write_loss_csv(path: str | Path, series) -> None:
    """Two-column `step,loss` CSV; series is (step, loss) pairs."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, value in series:
            fh.write(f"{step},{format(float(value), '.9g')}\n")


# ---------------------------------------------------------------------------
# checkpoints: binary little-endian, CRC-32 trailer

_MAGIC = b"FSYN"
_VERSION = 1
_ARCH_TAGS = {WAVENET: 1, RNN: 2, TRANSFORMER: 3}
_TAG_ARCHS = {v: k for k, v in _ARCH_TAGS.items()}
_CONV_NAME = re.compile(r"^conv(\d+)\.r(\d+)\.filters$")
_BLOCK_NAME = re.compile(r"^block(\d+)\.")


def save_checkpoint(params: ModelParams, config: ModelConfig, path: str | Path) -> None:
    """16-byte header, sorted name/shape/payload blocks, CRC-32 trailer."""
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack(
        "<HHIHBB",
        _VERSION,
        _ARCH_TAGS[config.arch],
        len(params),
        config.context_length,
        config.n_heads,
        0,
    )
    for name in sorted(params):
        data = params[name].data.astype("<f4")
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<H", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<B", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes(order="C")
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, ModelParams]:
    """Read a checkpoint, verify CRC, and rebuild the model config.

    The architecture tag, context length and head count live in the
    header; every other hyperparameter is recovered from tensor names and
    shapes (conv dilations ride in the parameter names). The recovered
    config must regenerate exactly the stored shape table.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    blob = path.read_bytes()
    if len(blob) < 20:
        raise DataError(f"{path}: truncated checkpoint")
    if blob[:4] != _MAGIC:
        raise DataError(f"{path}: not a flowsynth checkpoint")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise DataError(f"{path}: CRC mismatch; file is corrupt")
    version, arch_tag, n_params, context_length, n_heads, _ = struct.unpack("<HHIHBB", blob[4:16])
    if version != _VERSION:
        raise DataError(f"{path}: checkpoint version {version}, expected {_VERSION}")
    if arch_tag not in _TAG_ARCHS:
        raise DataError(f"{path}: unknown architecture tag {arch_tag}")

    offset = 16
    end = len(blob) - 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        if offset + 2 > end:
            raise DataError(f"{path}: truncated checkpoint")
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        if offset + 1 > end:
            raise DataError(f"{path}: truncated checkpoint")
        rank = blob[offset]
        offset += 1
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        numel = int(np.prod(dims)) if rank else 1
        payload = blob[offset : offset + 4 * numel]
        if len(payload) != 4 * numel:
            raise DataError(f"{path}: truncated checkpoint")
        offset += 4 * numel
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if offset != end:
        raise DataError(f"{path}: {end - offset} unexpected trailing bytes")

    config = _config_from_tensors(_TAG_ARCHS[arch_tag], context_length, n_heads, tensors, path)
    expected = param_shapes(config)
    got = {name: arr.shape for name, arr in tensors.items()}
    if expected != got:
        raise DataError(f"{path}: shape table inconsistent with recovered config")
    params = {name: Tensor(arr, requires_grad=not is_buffer(name)) for name, arr in tensors.items()}
    return config, params


def _config_from_tensors(
    arch: str, context_length: int, n_heads: int, tensors: dict[str, np.ndarray], path: Path
) -> ModelConfig:
    if "embed.weight" not in tensors or tensors["embed.weight"].ndim != 2:
        raise DataError(f"{path}: missing embedding table")
    vocab, embed_dim = tensors["embed.weight"].shape
    kwargs = dict(
        arch=arch,
        vocab_size=int(vocab),
        context_length=int(context_length),
        embed_dim=int(embed_dim),
        n_heads=int(n_heads) if n_heads else 4,
    )
    if arch == WAVENET:
        convs = {}
        for name, arr in tensors.items():
            m = _CONV_NAME.match(name)
            if m:
                convs[int(m.group(1))] = (int(m.group(2)), arr)
        if not convs or sorted(convs) != list(range(len(convs))):
            raise DataError(f"{path}: conv layer names are not contiguous")
        dilations = tuple(convs[i][0] for i in sorted(convs))
        _, first = convs[0]
        kwargs.update(conv_kernel=int(first.shape[0]), dilations=dilations, hidden_dim=int(first.shape[2]))
    elif arch == RNN:
        if "rnn.w_h" not in tensors:
            raise DataError(f"{path}: missing recurrent weights")
        kwargs.update(hidden_dim=int(tensors["rnn.w_h"].shape[0]))
    else:
        blocks = {int(m.group(1)) for name in tensors if (m := _BLOCK_NAME.match(name))}
        if not blocks or sorted(blocks) != list(range(len(blocks))):
            raise DataError(f"{path}: transformer block names are not contiguous")
        kwargs.update(n_blocks=len(blocks), hidden_dim=int(embed_dim))
    return ModelConfig(**kwargs)
