"""The three next-symbol architectures behind one forward() interface.

Each model maps a batch of symbol-id contexts [B, T] to logits [B, T, V]
over the vocabulary, causally: the logit at position t only sees ids at
positions <= t. Parameters live in a flat name -> Tensor map so the
trainer and checkpoint code never special-case an architecture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import UsageError
from .rng import Rng
from .tensor import EVAL, Tensor

WAVENET = "wavenet"
RNN = "rnn"
TRANSFORMER = "transformer"
ARCHITECTURES = (WAVENET, RNN, TRANSFORMER)

# initialization families, resolved by init_params
_EMBED = "embed"  # N(0, 1)
_TANH_IN = "tanh_in"  # N(0, (5/3)^2 / fan_in): keeps tanh pre-activations alive
_RELU_IN = "relu_in"  # N(0, 2 / fan_in)
_LINEAR = "linear"  # N(0, 1 / fan_in)
_ZEROS = "zeros"
_ONES = "ones"
_OUT_EPS = "out_eps"  # U(-eps, eps): near-uniform first-pass distribution

TANH_GAIN = 5.0 / 3.0


def default_dilations(context_length: int, kernel: int) -> tuple[int, ...]:
    """Doubling schedule 1, 2, 4, ... until the receptive field covers T."""
    dilations = [1]
    while receptive_field(kernel, tuple(dilations)) < context_length:
        dilations.append(dilations[-1] * 2)
    return tuple(dilations)


def receptive_field(kernel: int, dilations: tuple[int, ...]) -> int:
    return 1 + (kernel - 1) * sum(dilations)


@dataclass
class ModelConfig:
    arch: str
    vocab_size: int
    context_length: int
    embed_dim: int = 64
    hidden_dim: int = 0  # 0 -> per-arch default (wavenet 64, rnn 128, transformer embed_dim)
    n_blocks: int = 4
    n_heads: int = 4
    conv_kernel: int = 2
    dilations: tuple[int, ...] = ()
    eps_init: float = 1e-3

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise UsageError(f"unknown architecture {self.arch!r}; pick one of {ARCHITECTURES}")
        if self.vocab_size < 2:
            raise UsageError("vocab_size must be at least 2")
        if self.context_length < 1:
            raise UsageError("context_length must be at least 1")
        if self.hidden_dim == 0:
            self.hidden_dim = {WAVENET: 64, RNN: 128, TRANSFORMER: self.embed_dim}[self.arch]
        if self.arch == TRANSFORMER and self.embed_dim % self.n_heads != 0:
            raise UsageError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.arch == WAVENET:
            if self.conv_kernel < 1:
                raise UsageError("conv_kernel must be at least 1")
            if not self.dilations:
                self.dilations = default_dilations(self.context_length, self.conv_kernel)
            else:
                self.dilations = tuple(int(r) for r in self.dilations)
            if receptive_field(self.conv_kernel, self.dilations) < self.context_length:
                raise UsageError(
                    f"dilation schedule {self.dilations} (kernel {self.conv_kernel}) has "
                    f"receptive field {receptive_field(self.conv_kernel, self.dilations)} "
                    f"< context {self.context_length}"
                )
        else:
            self.dilations = ()


ModelParams = dict[str, Tensor]


def _spec_table(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init family) for every tensor the model owns.

    Single source of truth for init_params, count_params and the
    checkpoint shape check. Names encode what shapes cannot (conv
    dilations), so a config is fully recoverable from a checkpoint.
    """
    v, d, h = config.vocab_size, config.embed_dim, config.hidden_dim
    table: list[tuple[str, tuple[int, ...], str]] = [("embed.weight", (v, d), _EMBED)]
    if config.arch == WAVENET:
        c_in = d
        for i, r in enumerate(config.dilations):
            base = f"conv{i}.r{r}"
            table.append((f"{base}.filters", (config.conv_kernel, c_in, h), _TANH_IN))
            table.append((f"{base}.bias", (h,), _ZEROS))
            table.append((f"bn{i}.gain", (h,), _ONES))
            table.append((f"bn{i}.shift", (h,), _ZEROS))
            table.append((f"bn{i}.running_mean", (h,), _ZEROS))
            table.append((f"bn{i}.running_var", (h,), _ONES))
            c_in = h
        out_in = h
    elif config.arch == RNN:
        table.append(("rnn.w_x", (d, h), _TANH_IN))
        table.append(("rnn.w_h", (h, h), _TANH_IN))
        table.append(("rnn.bias", (h,), _ZEROS))
        out_in = h
    else:
        table.append(("pos.weight", (config.context_length, d), _EMBED))
        inner = 4 * d
        for i in range(config.n_blocks):
            b = f"block{i}"
            for proj in ("wq", "wk", "wv", "wo"):
                table.append((f"{b}.attn.{proj}", (d, d), _LINEAR))
                table.append((f"{b}.attn.{proj[1]}bias", (d,), _ZEROS))
            table.append((f"{b}.ln1.gain", (d,), _ONES))
            table.append((f"{b}.ln1.shift", (d,), _ZEROS))
            table.append((f"{b}.ffn.w1", (d, inner), _RELU_IN))
            table.append((f"{b}.ffn.b1", (inner,), _ZEROS))
            table.append((f"{b}.ffn.w2", (inner, d), _LINEAR))
            table.append((f"{b}.ffn.b2", (d,), _ZEROS))
            table.append((f"{b}.ln2.gain", (d,), _ONES))
            table.append((f"{b}.ln2.shift", (d,), _ZEROS))
        out_in = d
    table.append(("out.weight", (out_in, v), _OUT_EPS))
    table.append(("out.bias", (v,), _OUT_EPS))
    return table


def is_buffer(name: str) -> bool:
    """Running statistics: serialized with the model but never optimized."""
    return ".running_" in name


def init_params(config: ModelConfig, rng: Rng) -> ModelParams:
    """Draw all parameters in a fixed order from the given stream."""
    eps = config.eps_init
    params: ModelParams = {}
    for name, shape, kind in _spec_table(config):
        n = int(np.prod(shape))
        if kind == _ZEROS:
            data = np.zeros(shape)
        elif kind == _ONES:
            data = np.ones(shape)
        elif kind == _EMBED:
            data = rng.normal_matrix(shape)
        elif kind == _TANH_IN:
            fan_in = int(np.prod(shape[:-1]))
            data = rng.normal_matrix(shape, scale=TANH_GAIN / math.sqrt(fan_in))
        elif kind == _RELU_IN:
            fan_in = shape[0]
            data = rng.normal_matrix(shape, scale=math.sqrt(2.0 / fan_in))
        elif kind == _LINEAR:
            fan_in = shape[0]
            data = rng.normal_matrix(shape, scale=math.sqrt(1.0 / fan_in))
        elif kind == _OUT_EPS:
            data = rng.uniform_matrix(shape, -eps, eps) if eps > 0 else np.zeros(shape)
        else:
            raise AssertionError(kind)
        params[name] = Tensor(data, requires_grad=not is_buffer(name))
        assert params[name].data.size == n
    return params


def count_params(config: ModelConfig) -> int:
    """Total serialized tensor entries, running statistics included."""
    return sum(int(np.prod(shape)) for _, shape, _ in _spec_table(config))


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {name: shape for name, shape, _ in _spec_table(config)}


def forward(config: ModelConfig, params: ModelParams, ids: np.ndarray, mode: str = EVAL) -> Tensor:
    """Next-symbol logits [B, T, V] for a batch of contexts [B, T]."""
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError(f"ids must be [batch, time], got shape {ids.shape}")
    if config.arch == WAVENET:
        return _forward_wavenet(config, params, ids, mode)
    if config.arch == RNN:
        return _forward_rnn(config, params, ids)
    return _forward_transformer(config, params, ids)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.matmul(x, w) + b


def _forward_wavenet(config: ModelConfig, params: ModelParams, ids: np.ndarray, mode: str) -> Tensor:
    bsz, t_len = ids.shape
    h = T.embedding_lookup(params["embed.weight"], ids)  # [B,T,d]
    for i, r in enumerate(config.dilations):
        h = T.causal_conv1d(h, params[f"conv{i}.r{r}.filters"], r) + params[f"conv{i}.r{r}.bias"]
        c = h.shape[-1]
        flat = T.reshape(h, (bsz * t_len, c))  # positions normalize as batch samples
        flat = T.batch_norm(
            flat,
            params[f"bn{i}.gain"],
            params[f"bn{i}.shift"],
            mode,
            params[f"bn{i}.running_mean"],
            params[f"bn{i}.running_var"],
        )
        h = T.tanh_act(T.reshape(flat, (bsz, t_len, c)))
    flat = T.reshape(h, (bsz * t_len, h.shape[-1]))
    logits = _linear(flat, params["out.weight"], params["out.bias"])
    return T.reshape(logits, (bsz, t_len, config.vocab_size))


def _forward_rnn(config: ModelConfig, params: ModelParams, ids: np.ndarray) -> Tensor:
    bsz, t_len = ids.shape
    emb = T.embedding_lookup(params["embed.weight"], ids)
    w_x, w_h, bias = params["rnn.w_x"], params["rnn.w_h"], params["rnn.bias"]
    h = Tensor(np.zeros((bsz, config.hidden_dim)))
    step_logits = []
    for t in range(t_len):
        x_t = T.select(emb, 1, t)  # [B,d]
        h = T.tanh_act(T.matmul(h, w_h) + T.matmul(x_t, w_x) + bias)
        step_logits.append(_linear(h, params["out.weight"], params["out.bias"]))
    return T.stack(step_logits, axis=1)


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v with future scores masked to -inf.

    q, k, v: [B, H, T, head_dim]. With T=1 the sole score softmaxes to 1,
    so the output is exactly v.
    """
    t_len, head_dim = q.shape[-2], q.shape[-1]
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(head_dim))
    future = np.triu(np.ones((t_len, t_len), dtype=bool), k=1)
    scores = T.masked_fill(scores, future, float("-inf"))
    return T.matmul(T.softmax_rows(scores), v)


def _forward_transformer(config: ModelConfig, params: ModelParams, ids: np.ndarray) -> Tensor:
    bsz, t_len = ids.shape
    if t_len > config.context_length:
        raise ValueError(f"sequence length {t_len} exceeds context {config.context_length}")
    d, heads = config.embed_dim, config.n_heads
    head_dim = d // heads
    tok = T.embedding_lookup(params["embed.weight"], ids)
    pos = T.embedding_lookup(params["pos.weight"], np.arange(t_len))
    h = tok + pos

    def split_heads(x: Tensor) -> Tensor:
        return T.transpose(T.reshape(x, (bsz, t_len, heads, head_dim)), (0, 2, 1, 3))

    for i in range(config.n_blocks):
        b = f"block{i}"
        flat = T.reshape(h, (bsz * t_len, d))
        q = split_heads(_linear(flat, params[f"{b}.attn.wq"], params[f"{b}.attn.qbias"]))
        k = split_heads(_linear(flat, params[f"{b}.attn.wk"], params[f"{b}.attn.kbias"]))
        v = split_heads(_linear(flat, params[f"{b}.attn.wv"], params[f"{b}.attn.vbias"]))
        ctx = T.transpose(causal_attention(q, k, v), (0, 2, 1, 3))  # [B,T,H,hd]
        ctx = T.reshape(ctx, (bsz * t_len, d))
        out = _linear(ctx, params[f"{b}.attn.wo"], params[f"{b}.attn.obias"])
        h = T.layer_norm(h + T.reshape(out, (bsz, t_len, d)), params[f"{b}.ln1.gain"], params[f"{b}.ln1.shift"])
        flat = T.reshape(h, (bsz * t_len, d))
        f1 = T.relu_act(_linear(flat, params[f"{b}.ffn.w1"], params[f"{b}.ffn.b1"]))
        f2 = _linear(f1, params[f"{b}.ffn.w2"], params[f"{b}.ffn.b2"])
        h = T.layer_norm(h + T.reshape(f2, (bsz, t_len, d)), params[f"{b}.ln2.gain"], params[f"{b}.ln2.shift"])
    flat = T.reshape(h, (bsz * t_len, d))
    logits = _linear(flat, params["out.weight"], params["out.bias"])
    return T.reshape(logits, (bsz, t_len, config.vocab_size))
