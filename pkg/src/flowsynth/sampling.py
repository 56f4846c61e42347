"""Autoregressive generation of synthetic symbol sequences and flows."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .codec import Codebook, SymbolDataset, decode
from .errors import DataError, UsageError
from .ingest import FlowTable, save_csv
from .models import ModelConfig, ModelParams, forward
from .rng import Rng

_GREEDY_TEMPERATURE = 1e-6  # below this, sampling degenerates to argmax
_CHUNK = 4096  # fixed forward chunk so outputs never depend on n


def sample_sequences(
    config: ModelConfig,
    params: ModelParams,
    codebook: Codebook,
    n: int,
    temperature: float = 1.0,
    rng: Rng | None = None,
) -> SymbolDataset:
    """Draw n sequences by ancestral sampling from the model.

    Every sequence starts with the start symbol and runs exactly
    feature-count steps. At each step the start symbol's logit is masked
    out, so value symbols are the only outcomes and decoding can never
    see a malformed sequence. temperature scales the logits; below 1e-6
    it switches to argmax.
    """
    if config.vocab_size != codebook.vocab_size:
        raise DataError(f"model vocab {config.vocab_size} != codebook vocab {codebook.vocab_size}")
    if temperature <= 0:
        raise UsageError("temperature must be > 0")
    if n < 0:
        raise UsageError("n must be >= 0")
    if rng is None:
        rng = Rng(0)
    length = codebook.sequence_length
    k = codebook.k
    ids = np.zeros((n, length), dtype=np.int64)
    ids[:, 0] = codebook.start_symbol
    greedy = temperature < _GREEDY_TEMPERATURE
    for t in range(1, length):
        # uniforms drawn row-major before the forward pass, so chunking
        # of the forward never changes the stream
        draws = None if greedy else rng.uniforms(n)
        for lo in range(0, n, _CHUNK):
            hi = min(lo + _CHUNK, n)
            if lo == hi:
                break
            logits = forward(config, params, ids[lo:hi, :t]).data[:, -1, :].astype(np.float64)
            logits[:, codebook.start_symbol] = -np.inf
            if greedy:
                ids[lo:hi, t] = np.argmax(logits, axis=1)
            else:
                z = logits / temperature
                z -= z.max(axis=1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=1, keepdims=True)
                cum = np.cumsum(p, axis=1)
                u = draws[lo:hi] * cum[:, -1]  # guard the top edge against rounding
                picks = (cum < u[:, None]).sum(axis=1)
                ids[lo:hi, t] = np.minimum(picks, k - 1)
    assert np.all(ids[:, 1:] < k), "sampled a non-value symbol despite masking"
    return SymbolDataset(sequences=ids, vocab_size=codebook.vocab_size)


def generate_flows(
    config: ModelConfig,
    params: ModelParams,
    codebook: Codebook,
    n: int,
    temperature: float,
    rng: Rng,
    out_path: str | Path | None = None,
) -> FlowTable:
    """Sample, decode, and optionally write the synthetic flows as CSV."""
    dataset = sample_sequences(config, params, codebook, n, temperature, rng)
    table, skipped = decode(dataset, codebook)
    assert skipped == 0, "masked sampling cannot produce malformed sequences"
    if out_path is not None:
        save_csv(table, out_path)
    return table


def next_symbol_distribution(
    config: ModelConfig,
    params: ModelParams,
    codebook: Codebook,
    context: np.ndarray,
    temperature: float = 1.0,
) -> np.ndarray:
    """Masked next-symbol probabilities for one context (analysis helper)."""
    context = np.asarray(context)
    logits = forward(config, params, context[None, :]).data[0, -1, :].astype(np.float64)
    logits[codebook.start_symbol] = -np.inf
    z = logits / temperature
    z -= z.max()
    p = np.exp(z)
    return p / p.sum()
