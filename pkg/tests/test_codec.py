import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowsynth.codec import (
    Codebook,
    CategoryMap,
    NumericBins,
    decode,
    encode,
    fit_codebook,
    load_codebook,
    load_symbol_dataset,
    save_codebook,
    save_symbol_dataset,
    SymbolDataset,
)
from flowsynth.errors import DataError, UsageError
from flowsynth.ingest import CATEGORICAL, NUMERIC, ColumnSpec, FlowTable


def make_table(numeric=None, categorical=None):
    numeric = numeric or {}
    categorical = categorical or {}
    n = len(next(iter(numeric.values()))) if numeric else len(next(iter(categorical.values())))
    schema = []
    for j, name in enumerate(list(numeric) + list(categorical)):
        kind = NUMERIC if name in numeric else CATEGORICAL
        schema.append(ColumnSpec(name, kind, j))
    matrix = (
        np.column_stack([np.asarray(v, float) for v in numeric.values()])
        if numeric
        else np.zeros((n, 0))
    )
    return FlowTable(
        schema=schema,
        numeric_data=matrix,
        categorical_data={k: list(v) for k, v in categorical.items()},
        n_rows=n,
    )


def test_equal_width_uniform_unit_interval():
    # uniform on [0,1], K=49 equal width -> edges i/49
    table = make_table(numeric={"u": np.linspace(0.0, 1.0, 1000)})
    cb = fit_codebook(table, ["u"], k=49, mode="equalwidth")
    edges = cb.specs["u"].edges
    assert len(edges) == 50
    np.testing.assert_allclose(edges, np.arange(50) / 49.0, atol=1e-12)


def test_single_category_maps_to_symbol_zero():
    table = make_table(categorical={"proto": ["TCP"] * 10})
    cb = fit_codebook(table, ["proto"], k=49)
    dataset = encode(table, cb)
    np.testing.assert_array_equal(dataset.sequences[:, 1], 0)


def test_equal_frequency_sort_oracle():
    # column {1,1,2,3,3,3}, K=3: order statistics at ranks n/3=2 and 2n/3=4
    column = np.array([1.0, 1.0, 2.0, 3.0, 3.0, 3.0])
    srt = np.sort(column)
    oracle_edges = [srt[0], srt[2], srt[4], srt[-1]]  # [1, 2, 3, 3] -> collapse -> [1, 2, 3]
    table = make_table(numeric={"v": column})
    cb = fit_codebook(table, ["v"], k=3, mode="equalfreq")
    np.testing.assert_array_equal(cb.specs["v"].edges, sorted(set(oracle_edges)))
    ds = encode(table, cb)
    top_bin = cb.specs["v"].n_bins - 1
    assert ds.sequences[3, 1] == top_bin  # value 3 -> top bin
    assert ds.sequences[0, 1] == 0


def test_boundary_clamping():
    table = make_table(numeric={"v": np.linspace(10.0, 20.0, 100)})
    cb = fit_codebook(table, ["v"], k=5, mode="equalwidth")
    bins = cb.specs["v"]
    lo = encode(make_table(numeric={"v": [bins.edges[0], 5.0]}), cb).sequences[:, 1]
    hi = encode(make_table(numeric={"v": [bins.edges[-1], 99.0]}), cb).sequences[:, 1]
    assert list(lo) == [0, 0]  # v = edges[0] -> symbol 0; below-range clamps
    assert list(hi) == [bins.n_bins - 1] * 2  # v = edges[K] and beyond -> top symbol


def test_duration_encode_decode_hand_value():
    # codebook fit on durations uniform in [0, 1], K=49 equal width:
    # 0.212 -> floor(0.212 * 49) = 10; midpoint back = 10.5 / 49
    table = make_table(numeric={"Duration": np.linspace(0.0, 1.0, 500)})
    cb = fit_codebook(table, ["Duration"], k=49, mode="equalwidth")
    ds = encode(make_table(numeric={"Duration": [0.212]}), cb)
    assert ds.sequences[0, 1] == 10
    decoded, skipped = decode(ds, cb)
    assert skipped == 0
    assert decoded.numeric_column("Duration")[0] == pytest.approx(10.5 / 49.0, abs=1e-12)


def test_corpus_shape_30000_rows_9_features():
    rng = np.random.default_rng(0)
    numeric = {f"f{j}": rng.standard_normal(30_000) for j in range(9)}
    table = make_table(numeric=numeric)
    cb = fit_codebook(table, list(numeric), k=49)
    ds = encode(table, cb)
    assert ds.sequences.shape == (30_000, 10)
    assert ds.vocab_size == 50


def test_round_trip_within_half_bin_width():
    rng = np.random.default_rng(1)
    values = rng.uniform(-5, 5, size=2000)
    table = make_table(numeric={"v": values})
    for mode in ("equalwidth", "equalfreq"):
        cb = fit_codebook(table, ["v"], k=17, mode=mode)
        bins = cb.specs["v"]
        ds = encode(table, cb)
        decoded, _ = decode(ds, cb)
        got = decoded.numeric_column("v")
        widths = np.diff(bins.edges)
        ids = ds.sequences[:, 1]
        assert np.all(np.abs(got - values) <= widths[ids] / 2.0 + 1e-12)


def test_decode_skips_malformed_sequences():
    table = make_table(numeric={"v": np.linspace(0, 1, 50)})
    cb = fit_codebook(table, ["v"], k=4)
    good = encode(table, cb).sequences
    bad_start = good[0].copy()
    bad_start[0], bad_start[1] = bad_start[1], cb.start_symbol  # start symbol in value slot
    bad_id = good[1].copy()
    bad_id[1] = cb.k  # id >= K in value position
    stacked = np.vstack([good[:3], bad_start, bad_id])
    decoded, skipped = decode(stacked, cb)
    assert skipped == 2
    assert decoded.n_rows == 3


def test_decode_wrong_length_skips_all():
    table = make_table(numeric={"v": np.linspace(0, 1, 10)})
    cb = fit_codebook(table, ["v"], k=4)
    decoded, skipped = decode(np.zeros((5, 7), dtype=np.int64), cb)
    assert skipped == 5
    assert decoded.n_rows == 0


def test_unseen_category_goes_to_overflow_and_other():
    table = make_table(categorical={"proto": ["TCP"] * 5 + ["UDP"] * 3})
    cb = fit_codebook(table, ["proto"], k=4)
    ds = encode(make_table(categorical={"proto": ["ICMP", "TCP"]}), cb)
    assert ds.sequences[0, 1] == cb.overflow_symbol
    decoded, _ = decode(ds, cb)
    assert decoded.categorical_column("proto") == ["OTHER", "TCP"]


def test_category_ranking_frequency_then_lexicographic():
    cats = ["b"] * 3 + ["a"] * 3 + ["c"] * 5 + ["d"]
    cb = fit_codebook(make_table(categorical={"x": cats}), ["x"], k=3)
    # K-1 = 2 dedicated symbols: c (most frequent), then a vs b tie -> lexicographic
    assert cb.specs["x"].categories == ["c", "a"]


def test_fit_errors():
    table = make_table(numeric={"v": [1.0, 1.0, 1.0], "w": [1.0, 2.0, 3.0]})
    with pytest.raises(UsageError):
        fit_codebook(table, ["w"], k=1)
    with pytest.raises(DataError, match="constant"):
        fit_codebook(table, ["v"], k=4)
    with pytest.raises(DataError, match="unknown feature"):
        fit_codebook(table, ["nope"], k=4)


def test_codebook_roundtrip_structural_equality(tmp_path):
    rng = np.random.default_rng(2)
    table = make_table(
        numeric={"v": rng.standard_normal(100), "w": rng.uniform(0, 1, 100)},
        categorical={"proto": list(rng.choice(["TCP", "UDP", "ICMP"], 100))},
    )
    cb = fit_codebook(table, ["v", "proto", "w"], k=7, mode="equalfreq")
    path = tmp_path / "cb.txt"
    save_codebook(cb, path)
    loaded = load_codebook(path)
    assert loaded.features == cb.features
    assert loaded.k == cb.k and loaded.mode == cb.mode
    for name in cb.features:
        a, b = cb.specs[name], loaded.specs[name]
        if isinstance(a, NumericBins):
            assert a.edges.tobytes() == b.edges.tobytes()  # bit-exact
        else:
            assert a.categories == b.categories


def test_codebook_third_survives_bit_exact(tmp_path):
    edges = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
    cb = Codebook(features=["v"], specs={"v": NumericBins(edges=edges)}, k=3, mode="equalwidth")
    path = tmp_path / "cb.txt"
    save_codebook(cb, path)
    loaded = load_codebook(path)
    assert loaded.specs["v"].edges.tobytes() == edges.tobytes()


def test_codebook_version_guard(tmp_path):
    path = tmp_path / "cb.txt"
    path.write_text("codebook v9 K=4 mode=equalfreq\n", encoding="utf-8")
    with pytest.raises(DataError, match=r"version 'v9', expected 'v1'"):
        load_codebook(path)
    path.write_text("garbage\n", encoding="utf-8")
    with pytest.raises(DataError, match="not a codebook"):
        load_codebook(path)


def test_symdata_roundtrip(tmp_path):
    seqs = np.array([[4, 0, 1], [4, 3, 2]], dtype=np.int64)
    ds = SymbolDataset(sequences=seqs, vocab_size=5)
    path = tmp_path / "d.symdata"
    save_symbol_dataset(ds, path)
    text = path.read_text(encoding="utf-8")
    assert text.splitlines()[0] == "symdata v1 n=2 len=3 K=4"
    loaded = load_symbol_dataset(path)
    np.testing.assert_array_equal(loaded.sequences, seqs)
    assert loaded.vocab_size == 5


def test_symdata_rejects_bad_header(tmp_path):
    path = tmp_path / "d.symdata"
    path.write_text("symdata v2 n=1 len=2 K=3\n3 0\n", encoding="utf-8")
    with pytest.raises(DataError, match="version"):
        load_symbol_dataset(path)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.integers(2, 12),
    st.sampled_from(["equalwidth", "equalfreq"]),
    st.floats(-1e12, 1e12, allow_nan=False, allow_infinity=False),
)
def test_encode_total_on_any_finite_value(seed, k, mode, probe):
    rng = np.random.default_rng(seed)
    fit_vals = rng.uniform(-100, 100, size=50)
    table = make_table(numeric={"v": fit_vals}, categorical={"c": list(rng.choice(list("abcdef"), 50))})
    cb = fit_codebook(table, ["v", "c"], k=k, mode=mode)
    probe_table = make_table(numeric={"v": [probe]}, categorical={"c": ["zz-unseen"]})
    ds = encode(probe_table, cb)
    assert ds.sequences[0, 0] == cb.start_symbol
    assert 0 <= ds.sequences[0, 1] < k
    assert ds.sequences[0, 2] == cb.overflow_symbol


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 20), st.integers(40, 400))
def test_equal_frequency_balance_on_tie_free_data(seed, k, n):
    rng = np.random.default_rng(seed)
    values = rng.standard_normal(n)
    if len(np.unique(values)) != n:
        return  # ties are measure-zero; skip the degenerate draw
    table = make_table(numeric={"v": values})
    cb = fit_codebook(table, ["v"], k=k, mode="equalfreq")
    ds = encode(table, cb)
    counts = np.bincount(ds.sequences[:, 1], minlength=cb.specs["v"].n_bins)
    assert np.all(np.abs(counts[: cb.specs["v"].n_bins] - n / k) <= 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_vocabulary_closure(seed):
    rng = np.random.default_rng(seed)
    table = make_table(
        numeric={"a": rng.standard_normal(60), "b": rng.uniform(0, 9, 60)},
        categorical={"c": list(rng.choice(list("xyz"), 60))},
    )
    cb = fit_codebook(table, ["a", "b", "c"], k=int(rng.integers(2, 30)))
    ds = encode(table, cb)
    assert ds.sequences.min() >= 0 and ds.sequences.max() <= cb.k
    start_hits = (ds.sequences == cb.start_symbol).sum(axis=1)
    np.testing.assert_array_equal(start_hits, 1)  # exactly once ...
    np.testing.assert_array_equal(ds.sequences[:, 0], cb.start_symbol)  # ... at position 0
