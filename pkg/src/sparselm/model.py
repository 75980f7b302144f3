"""GPT-style decoder-only transformer over the kit's tensor library.

Pre-LN blocks, learned absolute position embeddings, attention logits
scaled by 1/sqrt(d_head), output projection tied to the token embedding
by default. The six weight matrices per block (wq, wk, wv, wo, w_ff_in,
w_ff_out) are the sparsifiable set; embeddings, LayerNorm parameters and
biases stay dense.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

SPARSIFIABLE_ROLES = ("wq", "wk", "wv", "wo", "w_ff_in", "w_ff_out")

INIT_STD = 0.02
NEG_INF_BIAS = -1e9  # additive pre-softmax mask; underflows to exactly 0 attention
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_head: int
    vocab_size: int
    context_window: int
    d_ff: int | None = None
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.n_heads * self.d_head != self.d_model:
            raise ContractError(
                f"n_heads*d_head = {self.n_heads * self.d_head} != d_model = {self.d_model}"
            )
        if self.context_window < 1:
            raise ContractError("context_window must be >= 1")
        for field in ("n_layers", "d_model", "n_heads", "d_head", "vocab_size", "d_ff"):
            if getattr(self, field) < 1:
                raise ContractError(f"{field} must be positive")


# Architecture rows for the med / large / xl presets; vocab and context
# window follow the full-scale defaults (42,384 learned vocab, 1024 window).
PRESETS = {
    "med": ModelConfig(n_layers=24, d_model=1024, n_heads=16, d_head=64,
                       vocab_size=42384, context_window=1024),
    "large": ModelConfig(n_layers=18, d_model=1536, n_heads=12, d_head=128,
                         vocab_size=42384, context_window=1024),
    "xl": ModelConfig(n_layers=24, d_model=2048, n_heads=16, d_head=128,
                      vocab_size=42384, context_window=1024),
}


class ParamStore(dict):
    """Named map: parameter path -> Tensor."""

    def sparsifiable_paths(self):
        return [p for p in self if is_sparsifiable(p)]


def is_sparsifiable(path: str) -> bool:
    return path.rsplit(".", 1)[-1] in SPARSIFIABLE_ROLES


def param_specs(config: ModelConfig):
    """Ordered (path, shape, init_kind) triples for every parameter."""
    d, f = config.d_model, config.d_ff
    specs = [
        ("tok_emb", (config.vocab_size, d), "normal"),
        ("pos_emb", (config.context_window, d), "normal"),
    ]
    for i in range(config.n_layers):
        p = f"layers.{i}"
        specs += [
            (f"{p}.ln1.gain", (d,), "ones"),
            (f"{p}.ln1.bias", (d,), "zeros"),
            (f"{p}.wq", (d, d), "normal"),
            (f"{p}.bq", (d,), "zeros"),
            (f"{p}.wk", (d, d), "normal"),
            (f"{p}.bk", (d,), "zeros"),
            (f"{p}.wv", (d, d), "normal"),
            (f"{p}.bv", (d,), "zeros"),
            (f"{p}.wo", (d, d), "residual"),
            (f"{p}.bo", (d,), "zeros"),
            (f"{p}.ln2.gain", (d,), "ones"),
            (f"{p}.ln2.bias", (d,), "zeros"),
            (f"{p}.w_ff_in", (d, f), "normal"),
            (f"{p}.b_ff_in", (f,), "zeros"),
            (f"{p}.w_ff_out", (f, d), "residual"),
            (f"{p}.b_ff_out", (d,), "zeros"),
        ]
    specs += [
        ("ln_f.gain", (d,), "ones"),
        ("ln_f.bias", (d,), "zeros"),
    ]
    if not config.tie_embeddings:
        specs.append(("lm_head", (d, config.vocab_size), "normal"))
    return specs


def init_params(config: ModelConfig, seed: int, dtype: str = "float32") -> ParamStore:
    """Seeded init: normal(0, 0.02), residual projections scaled by
    1/sqrt(2*n_layers), biases zero, LN gains one."""
    rng = np.random.default_rng(seed)
    resid_std = INIT_STD / math.sqrt(2.0 * config.n_layers)
    store = ParamStore()
    for path, shape, kind in param_specs(config):
        if kind == "normal":
            data = rng.normal(0.0, INIT_STD, size=shape)
        elif kind == "residual":
            data = rng.normal(0.0, resid_std, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        store[path] = Tensor(data, requires_grad=True, dtype=dtype)
    return store


def count_params(config: ModelConfig, include_embeddings: bool = True) -> int:
    """Exact parameter count. With include_embeddings=False the token,
    position and (untied) output-projection tables are excluded, leaving
    the block weight matrices plus LayerNorm/bias terms."""
    emb_paths = {"tok_emb", "pos_emb", "lm_head"}
    total = 0
    for path, shape, _ in param_specs(config):
        if not include_embeddings and path in emb_paths:
            continue
        total += math.prod(shape)
    return total


def count_matrix_params(config: ModelConfig) -> int:
    """Size of the sparsifiable set: the six block matrices, 12*L*d^2 when
    d_ff = 4*d_model. This is the headline 'model size' convention."""
    return sum(
        math.prod(shape) for path, shape, _ in param_specs(config) if is_sparsifiable(path)
    )


def sparse_matrix_params(config: ModelConfig, sparsity: float) -> int:
    """Remaining active matrix parameters at uniform sparsity s: (1-s)*matrix count."""
    total = count_matrix_params(config)
    zeros = int(math.floor(sparsity * total + 0.5))
    return total - zeros


def store_param_count(store: ParamStore) -> int:
    return sum(t.data.size for t in store.values())


def _project(x, w, b=None):
    """(batch, seq, d_in) @ (d_in, d_out) + bias."""
    bsz, seq, d_in = x.data.shape
    flat = T.reshape(x, (bsz * seq, d_in))
    out = T.matmul(flat, w)
    if b is not None:
        out = T.add(out, b)
    return T.reshape(out, (bsz, seq, w.data.shape[1]))


def forward_logits(params: ParamStore, config: ModelConfig, tokens,
                   masks=None, prompt_embeddings=None, prompt_positions=None) -> Tensor:
    """Causal decoder forward pass; returns logits (batch, seq, vocab).

    With `masks`, every sparsifiable weight is used as mask*weight. With
    prompt injection, the given embedding rows replace the token-embedding
    lookups at `prompt_positions` before position embeddings are added.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ContractError(f"tokens must be (batch, seq), got shape {tokens.shape}")
    bsz, seq = tokens.shape
    if seq > config.context_window:
        raise ContractError(f"sequence length {seq} exceeds context window {config.context_window}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ContractError(f"token id outside [0, {config.vocab_size})")

    def eff(path):
        w = params[path]
        if masks is not None and path in masks:
            return T.mul(w, masks[path])
        return w

    dtype = params["tok_emb"].data.dtype
    x = T.embedding(params["tok_emb"], tokens)
    if prompt_embeddings is not None and prompt_embeddings.data.shape[0] > 0:
        x = T.inject_rows(x, prompt_embeddings, prompt_positions)
    x = T.add(x, T.narrow(params["pos_emb"], 0, 0, seq))

    causal_bias = np.triu(np.full((seq, seq), NEG_INF_BIAS, dtype=dtype), k=1)
    scale = 1.0 / math.sqrt(config.d_head)
    h, dh = config.n_heads, config.d_head

    for i in range(config.n_layers):
        p = f"layers.{i}"
        attn_in = T.layer_norm(x, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"], LN_EPS)

        def heads(t):
            return T.transpose(T.reshape(t, (bsz, seq, h, dh)), (0, 2, 1, 3))

        q = heads(_project(attn_in, eff(f"{p}.wq"), params[f"{p}.bq"]))
        k = heads(_project(attn_in, eff(f"{p}.wk"), params[f"{p}.bk"]))
        v = heads(_project(attn_in, eff(f"{p}.wv"), params[f"{p}.bv"]))

        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
        weights = T.softmax(T.add(scores, causal_bias), axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (bsz, seq, h * dh))
        x = T.add(x, _project(ctx, eff(f"{p}.wo"), params[f"{p}.bo"]))

        ff_in = T.layer_norm(x, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"], LN_EPS)
        hidden = T.gelu(_project(ff_in, eff(f"{p}.w_ff_in"), params[f"{p}.b_ff_in"]))
        x = T.add(x, _project(hidden, eff(f"{p}.w_ff_out"), params[f"{p}.b_ff_out"]))

    x = T.layer_norm(x, params["ln_f.gain"], params["ln_f.bias"], LN_EPS)
    if config.tie_embeddings:
        head = T.transpose(params["tok_emb"], (1, 0))
    else:
        head = params["lm_head"]
    return _project(x, head)


def lm_loss(params: ParamStore, config: ModelConfig, tokens, masks=None) -> Tensor:
    """Mean next-token cross-entropy over shifted targets."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] < 2:
        raise ContractError(f"lm_loss needs (batch, seq>=2) tokens, got shape {tokens.shape}")
    bsz, seq = tokens.shape
    logits = forward_logits(params, config, tokens, masks=masks)
    pred = T.reshape(T.narrow(logits, 1, 0, seq - 1), (bsz * (seq - 1), config.vocab_size))
    targets = tokens[:, 1:].reshape(-1)
    return T.cross_entropy(pred, targets)


def clone_params(store: ParamStore) -> ParamStore:
    """Independent deep copy (fresh buffers, no grads)."""
    out = ParamStore()
    for path, t in store.items():
        out[path] = Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=t.dtype)
    return out
