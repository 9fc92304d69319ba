"""Transformer encoder in plain numpy, with a hand-written backward pass.

Every block is post-norm: ``LN(x + MHA(x))`` followed by ``LN(y + FFN(y))``.
Query/key/value projections for all heads are stored side by side in one
``(d, h * d_k)`` matrix; head ``i`` owns columns ``i*d_k:(i+1)*d_k``.

Forward functions return a cache that the matching backward function
consumes, so gradients are exact for whatever the forward pass computed
(including dropout masks and padding).
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, FormatError, VocabularyError

CHECKPOINT_MAGIC = b"TWEMBED-CKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Vocabulary:
    """Node tokens ``0..R-1`` followed by CLS, MASK and PAD."""

    n_nodes: int

    @property
    def cls(self) -> int:
        return self.n_nodes

    @property
    def mask(self) -> int:
        return self.n_nodes + 1

    @property
    def pad(self) -> int:
        return self.n_nodes + 2

    @property
    def size(self) -> int:
        return self.n_nodes + 3

    def is_node(self, tok) -> np.ndarray:
        return np.asarray(tok) < self.n_nodes


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d: int = 252
    heads: int = 4
    layers: int = 6
    d_ff: int | None = None
    max_seq: int = 21
    dropout: float = 0.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d < 1 or self.heads < 1 or self.layers < 0:
            raise ConfigError("d and heads must be positive, layers non-negative")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d)
        if self.d_ff < 1 or self.max_seq < 1 or self.vocab_size < 1:
            raise ConfigError("d_ff, max_seq and vocab_size must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def d_k(self) -> int:
        return self.d // self.heads


def positional_encoding(pos, d: int) -> np.ndarray:
    """Sinusoidal encoding; ``pos`` may be an int or an array of positions."""
    pos = np.asarray(pos, dtype=np.float64)
    i2 = np.arange(0, d, 2, dtype=np.float64)
    angles = pos[..., None] / np.power(10000.0, i2 / d)
    pe = np.empty(pos.shape + (d,))
    pe[..., 0::2] = np.sin(angles)
    pe[..., 1::2] = np.cos(angles[..., : d // 2])
    return pe


def xavier(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class EncoderState:
    """Configuration plus a flat ``name -> ndarray`` parameter dictionary."""

    def __init__(self, config: EncoderConfig, params: dict):
        self.config = config
        self.params = params
        self.validate()

    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int = 0) -> "EncoderState":
        rng = np.random.default_rng(seed)
        d, f, hk = config.d, config.d_ff, config.heads * config.d_k
        p = {"tok_emb": rng.normal(0.0, 0.02, size=(config.vocab_size, d))}
        for l in range(config.layers):
            p[f"L{l}.Wq"] = xavier(rng, d, hk)
            p[f"L{l}.Wk"] = xavier(rng, d, hk)
            p[f"L{l}.Wv"] = xavier(rng, d, hk)
            p[f"L{l}.Wo"] = xavier(rng, hk, d)
            p[f"L{l}.ln1_g"] = np.ones(d)
            p[f"L{l}.ln1_b"] = np.zeros(d)
            p[f"L{l}.W1"] = xavier(rng, d, f)
            p[f"L{l}.b1"] = np.zeros(f)
            p[f"L{l}.W2"] = xavier(rng, f, d)
            p[f"L{l}.b2"] = np.zeros(d)
            p[f"L{l}.ln2_g"] = np.ones(d)
            p[f"L{l}.ln2_b"] = np.zeros(d)
        return cls(config, p)

    def expected_shapes(self) -> dict:
        c = self.config
        d, f, hk = c.d, c.d_ff, c.heads * c.d_k
        shapes = {"tok_emb": (c.vocab_size, d)}
        for l in range(c.layers):
            shapes.update({
                f"L{l}.Wq": (d, hk), f"L{l}.Wk": (d, hk), f"L{l}.Wv": (d, hk), f"L{l}.Wo": (hk, d),
                f"L{l}.ln1_g": (d,), f"L{l}.ln1_b": (d,),
                f"L{l}.W1": (d, f), f"L{l}.b1": (f,), f"L{l}.W2": (f, d), f"L{l}.b2": (d,),
                f"L{l}.ln2_g": (d,), f"L{l}.ln2_b": (d,),
            })
        return shapes

    def validate(self):
        shapes = self.expected_shapes()
        if set(shapes) != set(self.params):
            missing = sorted(set(shapes) - set(self.params))
            extra = sorted(set(self.params) - set(shapes))
            raise ConfigError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name} has shape {self.params[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise ConfigError(f"{name} contains non-finite values")

    def layer(self, l: int) -> dict:
        prefix = f"L{l}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}


# --- primitives --------------------------------------------------------------

def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def attention(Q, K, V, key_mask=None, return_weights=False):
    """``softmax(Q K^T / sqrt(d_k)) V`` over the last two axes.

    ``key_mask`` (broadcastable to the score matrix, True = attend) removes
    padded keys; their weights are exactly zero.
    """
    d_k = Q.shape[-1]
    scores = (Q @ np.swapaxes(K, -1, -2)) / np.sqrt(d_k)
    if key_mask is not None:
        scores = np.where(key_mask, scores, -np.inf)
    m = scores.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(scores - m)
    weights = e / e.sum(axis=-1, keepdims=True)
    out = weights @ V
    return (out, weights) if return_weights else out


def layer_norm(z, g, b, eps):
    mu = z.mean(axis=-1, keepdims=True)
    var = z.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (z - mu) * inv
    return g * xhat + b, (xhat, inv, g)


def layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    n = dy.shape[-1]
    dz = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    return dz, dg, db


def _split_heads(x, h):
    B, n, hk = x.shape
    return x.reshape(B, n, h, hk // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, n, k = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, n, h * k)


def _dropout(x, rate, rng):
    if rate == 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


# --- forward / backward ----------------------------------------------------------

def multi_head_forward(X, lp, heads, key_mask=None):
    """Multi-head self-attention; returns ``(output, cache)``."""
    Q = _split_heads(X @ lp["Wq"], heads)
    K = _split_heads(X @ lp["Wk"], heads)
    V = _split_heads(X @ lp["Wv"], heads)
    km = None if key_mask is None else key_mask[:, None, None, :]
    ctx, A = attention(Q, K, V, km, return_weights=True)
    C = _merge_heads(ctx)
    out = C @ lp["Wo"]
    return out, (X, Q, K, V, A, C)


def multi_head(X, state: EncoderState, layer: int, key_mask=None) -> np.ndarray:
    """Multi-head self-attention of one layer applied to ``X`` of shape ``(B, n, d)`` or ``(n, d)``."""
    squeeze = X.ndim == 2
    X3 = X[None] if squeeze else X
    if X3.shape[-1] != state.config.d:
        raise ConfigError(f"input width {X3.shape[-1]} does not match d={state.config.d}")
    km = None if key_mask is None else np.asarray(key_mask).reshape(X3.shape[0], -1)
    out, _ = multi_head_forward(X3, state.layer(layer), state.config.heads, km)
    return out[0] if squeeze else out


def multi_head_backward(dout, lp, cache):
    X, Q, K, V, A, C = cache
    d_k = Q.shape[-1]
    heads = Q.shape[1]
    g = {"Wo": np.einsum("bnc,bnd->cd", C, dout)}
    dctx = _split_heads(dout @ lp["Wo"].T, heads)
    dA = dctx @ np.swapaxes(V, -1, -2)
    dV = np.swapaxes(A, -1, -2) @ dctx
    dS = A * (dA - (dA * A).sum(-1, keepdims=True)) / np.sqrt(d_k)
    dQ = dS @ K
    dK = np.swapaxes(dS, -1, -2) @ Q
    dQm, dKm, dVm = _merge_heads(dQ), _merge_heads(dK), _merge_heads(dV)
    g["Wq"] = np.einsum("bnd,bnc->dc", X, dQm)
    g["Wk"] = np.einsum("bnd,bnc->dc", X, dKm)
    g["Wv"] = np.einsum("bnd,bnc->dc", X, dVm)
    dX = dQm @ lp["Wq"].T + dKm @ lp["Wk"].T + dVm @ lp["Wv"].T
    return dX, g


def feed_forward(x, W1, b1, W2, b2):
    """Position-wise ``max(0, x W1 + b1) W2 + b2``."""
    return np.maximum(0.0, x @ W1 + b1) @ W2 + b2


def _block_forward(X, lp, cfg: EncoderConfig, key_mask, rng):
    attn, mh_cache = multi_head_forward(X, lp, cfg.heads, key_mask)
    attn, drop1 = _dropout(attn, cfg.dropout, rng)
    Y1, ln1 = layer_norm(X + attn, lp["ln1_g"], lp["ln1_b"], cfg.ln_eps)
    pre = Y1 @ lp["W1"] + lp["b1"]
    hid = np.maximum(pre, 0.0)
    ff = hid @ lp["W2"] + lp["b2"]
    ff, drop2 = _dropout(ff, cfg.dropout, rng)
    Y2, ln2 = layer_norm(Y1 + ff, lp["ln2_g"], lp["ln2_b"], cfg.ln_eps)
    return Y2, (mh_cache, drop1, ln1, Y1, pre, hid, drop2, ln2)


def _block_backward(dY2, lp, cache):
    mh_cache, drop1, ln1, Y1, pre, hid, drop2, ln2 = cache
    g = {}
    dZ2, g["ln2_g"], g["ln2_b"] = layer_norm_backward(dY2, ln2)
    dff = dZ2 if drop2 is None else dZ2 * drop2
    g["b2"] = dff.reshape(-1, dff.shape[-1]).sum(axis=0)
    g["W2"] = np.einsum("bnf,bnd->fd", hid, dff)
    dpre = (dff @ lp["W2"].T) * (pre > 0)
    g["b1"] = dpre.reshape(-1, dpre.shape[-1]).sum(axis=0)
    g["W1"] = np.einsum("bnd,bnf->df", Y1, dpre)
    dY1 = dZ2 + dpre @ lp["W1"].T
    dZ1, g["ln1_g"], g["ln1_b"] = layer_norm_backward(dY1, ln1)
    dattn = dZ1 if drop1 is None else dZ1 * drop1
    dX, gm = multi_head_backward(dattn, lp, mh_cache)
    g.update(gm)
    return dZ1 + dX, g


def _check_tokens(tokens, cfg: EncoderConfig):
    if tokens.ndim != 2:
        raise VocabularyError("tokens must be a (batch, length) integer array")
    if tokens.shape[1] > cfg.max_seq:
        raise VocabularyError(f"sequence length {tokens.shape[1]} exceeds max_seq={cfg.max_seq}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        bad = tokens[(tokens < 0) | (tokens >= cfg.vocab_size)]
        raise VocabularyError(f"unknown token id {int(bad[0])} (vocabulary size {cfg.vocab_size})")


def encode_forward(tokens, state: EncoderState, key_mask=None, rng=None):
    """Batched forward pass; returns ``(hidden, cache)`` with hidden ``(B, n, d)``.

    ``key_mask`` marks non-padding positions. ``rng`` is only used when the
    config enables dropout.
    """
    cfg = state.config
    tokens = np.asarray(tokens)
    _check_tokens(tokens, cfg)
    n = tokens.shape[1]
    X = state.params["tok_emb"][tokens] + positional_encoding(np.arange(n), cfg.d)
    caches = []
    for l in range(cfg.layers):
        X, c = _block_forward(X, state.layer(l), cfg, key_mask, rng)
        caches.append(c)
    return X, (tokens, caches)


def encode_backward(dH, state: EncoderState, cache) -> dict:
    """Gradients of every encoder parameter given ``dL/dhidden``."""
    tokens, caches = cache
    cfg = state.config
    grads = {}
    dX = dH
    for l in reversed(range(cfg.layers)):
        dX, g = _block_backward(dX, state.layer(l), caches[l])
        for k, v in g.items():
            grads[f"L{l}.{k}"] = v
    demb = np.zeros_like(state.params["tok_emb"])
    np.add.at(demb, tokens.reshape(-1), dX.reshape(-1, cfg.d))
    grads["tok_emb"] = demb
    return grads


def encode(tokens, state: EncoderState, key_mask=None):
    """Contextual embeddings of one sequence or a batch.

    Returns ``(per_position, cls)``; ``cls`` is the row at position 0.
    """
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    toks = tokens[None] if single else tokens
    km = None if key_mask is None else np.asarray(key_mask, dtype=bool).reshape(toks.shape)
    H, _ = encode_forward(toks, state, km)
    if single:
        return H[0], H[0, 0]
    return H, H[:, 0]


def attention_weights(tokens, state: EncoderState, key_mask=None) -> list:
    """Per-layer attention weight tensors ``(B, h, n, n)`` for inspection."""
    tokens = np.asarray(tokens)
    _, (_, caches) = encode_forward(tokens, state, key_mask)
    return [c[0][4] for c in caches]


# --- checkpoint -------------------------------------------------------------------

def save_checkpoint(path, state: EncoderState, extra_arrays: dict | None = None, meta: dict | None = None) -> None:
    """Binary container: magic, JSON header, then raw little-endian float64 tensors.

    Output depends only on the inputs, so identical states give identical bytes.
    """
    arrays = dict(state.params)
    if extra_arrays:
        arrays.update(extra_arrays)
    names = sorted(arrays)
    manifest = []
    offset = 0
    blobs = []
    for name in names:
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        blob = a.tobytes()
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(state.config),
        "vocabulary": {"n_nodes": state.config.vocab_size - 3, "size": state.config.vocab_size},
        "tensors": manifest,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(blobs)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(body)
        fh.write(hashlib.sha256(hbytes + body).digest())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`: ``(state, extra_arrays, meta)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    if buf.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file", path)
    version, hlen = struct.unpack("<IQ", buf.read(12))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path)
    hbytes = buf.read(hlen)
    body = raw[buf.tell():-32]
    if hashlib.sha256(hbytes + body).digest() != raw[-32:]:
        raise FormatError("checkpoint checksum mismatch", path)
    header = json.loads(hbytes)
    cfg = EncoderConfig(**header["config"])
    arrays = {}
    for t in header["tensors"]:
        chunk = body[t["offset"]:t["offset"] + t["nbytes"]]
        arrays[t["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(t["shape"]).astype(np.float64)
    probe = EncoderState.__new__(EncoderState)
    probe.config = cfg
    state_keys = set(probe.expected_shapes())
    enc, extra = {}, {}
    for k, v in arrays.items():
        (enc if k in state_keys else extra)[k] = v
    return EncoderState(cfg, enc), extra, header.get("meta", {})
