"""Minimal deterministic decoder-only transformer (float64, numpy).

Gemma-flavoured: RMSNorm pre-norms, rotary positions on q and k, grouped-query
attention, gated-GELU MLP, LM head tied to the embedding table. Everything is a
pure function of an immutable :class:`ModelWeights`.

The per-layer helpers (:func:`project_qkv`, :func:`output_projection`,
:func:`mlp_residual`, :func:`final_logits`) accept an arbitrary stack of
leading batch axes, so the sharded protocol can call them on a subset of rows
and the attack code can call them on a batch of candidate prompts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NEG_INF = -np.inf


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    d_emb: int
    H: int
    H_KV: int
    d: int
    V: int
    mlp_hidden: int
    max_seq: int
    norm_eps: float = 1e-6
    rope_theta: float = 10000.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("num_layers", "d_emb", "H", "H_KV", "d", "mlp_hidden", "max_seq"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {value!r}")
        if self.V < 2:
            raise ValueError(f"V must be >= 2, got {self.V}")
        if self.H % self.H_KV != 0:
            raise ValueError(f"H not divisible by H_KV ({self.H} % {self.H_KV} != 0)")
        if not self.norm_eps > 0:
            raise ValueError(f"norm_eps must be > 0, got {self.norm_eps}")
        if not self.rope_theta > 0:
            raise ValueError(f"rope_theta must be > 0, got {self.rope_theta}")

    @property
    def group(self) -> int:
        return self.H // self.H_KV

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "d_emb": self.d_emb,
            "H": self.H,
            "H_KV": self.H_KV,
            "d": self.d,
            "V": self.V,
            "mlp_hidden": self.mlp_hidden,
            "max_seq": self.max_seq,
            "norm_eps": self.norm_eps,
            "rope_theta": self.rope_theta,
        }


@dataclass(frozen=True, eq=False)
class LayerWeights:
    attn_norm: np.ndarray  # (d_emb,)
    wq: np.ndarray  # (d_emb, H, d)
    wk: np.ndarray  # (d_emb, H_KV, d)
    wv: np.ndarray  # (d_emb, H_KV, d)
    wo: np.ndarray  # (H, d, d_emb)
    mlp_norm: np.ndarray  # (d_emb,)
    w_gate: np.ndarray  # (d_emb, mlp_hidden)
    w_up: np.ndarray  # (d_emb, mlp_hidden)
    w_down: np.ndarray  # (mlp_hidden, d_emb)

    def arrays(self):
        return (self.attn_norm, self.wq, self.wk, self.wv, self.wo,
                self.mlp_norm, self.w_gate, self.w_up, self.w_down)


@dataclass(frozen=True, eq=False)
class ModelWeights:
    config: ModelConfig
    seed: int
    embedding: np.ndarray  # (V, d_emb); also the LM head
    layers: tuple[LayerWeights, ...]
    final_norm: np.ndarray  # (d_emb,)

    def arrays(self):
        yield self.embedding
        for layer in self.layers:
            yield from layer.arrays()
        yield self.final_norm

    def fingerprint(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.digest()


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def new_model(config: ModelConfig, seed: int) -> ModelWeights:
    """Draw weights from a PCG64 stream seeded by ``seed``.

    Matrices are standard normal scaled by ``1/sqrt(fan_in)``; norm gains are
    ``1 + 0.1 * N(0, 1)`` so the norms are not the identity.
    """
    config.validate()
    rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    c = config

    def mat(shape, fan_in):
        return _frozen(rng.standard_normal(shape) / np.sqrt(fan_in))

    def gain():
        return _frozen(1.0 + 0.1 * rng.standard_normal(c.d_emb))

    embedding = _frozen(rng.standard_normal((c.V, c.d_emb)))
    layers = []
    for _ in range(c.num_layers):
        layers.append(LayerWeights(
            attn_norm=gain(),
            wq=mat((c.d_emb, c.H, c.d), c.d_emb),
            wk=mat((c.d_emb, c.H_KV, c.d), c.d_emb),
            wv=mat((c.d_emb, c.H_KV, c.d), c.d_emb),
            wo=mat((c.H, c.d, c.d_emb), c.H * c.d),
            mlp_norm=gain(),
            w_gate=mat((c.d_emb, c.mlp_hidden), c.d_emb),
            w_up=mat((c.d_emb, c.mlp_hidden), c.d_emb),
            w_down=mat((c.mlp_hidden, c.d_emb), c.mlp_hidden),
        ))
    return ModelWeights(config=c, seed=seed, embedding=embedding,
                        layers=tuple(layers), final_norm=gain())


# ---------------------------------------------------------------------------
# building blocks


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gain


def gelu_tanh(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def rope(x: np.ndarray, positions: np.ndarray, theta: float) -> np.ndarray:
    """Rotate-half rotary embedding over the last axis of ``x`` (..., n, d).

    ``positions`` are absolute 0-based token positions, shape (n,). For odd
    ``d`` the final component is left unrotated.
    """
    d = x.shape[-1]
    half = d // 2
    if half == 0:
        return x
    inv_freq = theta ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    x1 = x[..., :half]
    x2 = x[..., half:2 * half]
    out = np.empty_like(x)
    out[..., :half] = x1 * cos - x2 * sin
    out[..., half:2 * half] = x1 * sin + x2 * cos
    if d % 2:
        out[..., -1] = x[..., -1]
    return out


def repeat_kv(x: np.ndarray, group: int) -> np.ndarray:
    """Broadcast (..., H_KV, n, d) key/value heads to (..., H, n, d)."""
    if group == 1:
        return x
    return np.repeat(x, group, axis=-3)


def causal_mask(q_index: np.ndarray, k_index: np.ndarray) -> np.ndarray:
    """0 where key index <= query index, -inf elsewhere."""
    q_index = np.asarray(q_index)
    k_index = np.asarray(k_index)
    return np.where(k_index[None, :] <= q_index[:, None], 0.0, NEG_INF)


def attention_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                        mask: np.ndarray | None = None) -> np.ndarray:
    """Subtract-max softmax attention, per head, with GQA broadcast.

    q: (..., H, n, d); k, v: (..., H_KV, M, d); mask broadcastable to
    (..., H, n, M) with entries in {0, -inf}. A row that is entirely masked
    yields NaN; callers never produce one under a causal mask.
    """
    if q.ndim < 3 or k.ndim != q.ndim or v.shape != k.shape:
        raise ValueError(f"shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    H, H_KV = q.shape[-3], k.shape[-3]
    if q.shape[-1] != k.shape[-1] or H % H_KV:
        raise ValueError(f"shape mismatch: q{q.shape} k{k.shape}")
    k = repeat_kv(k, H // H_KV)
    v = repeat_kv(v, H // H_KV)
    scores = q @ np.swapaxes(k, -1, -2)
    if mask is not None:
        scores = scores + mask
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ v


def project_qkv(model: ModelWeights, layer: int, h: np.ndarray,
                positions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pre-attention norm, Q/K/V projection, RoPE; q carries the 1/sqrt(d) scale.

    h: (..., n, d_emb) -> q (..., H, n, d), k and v (..., H_KV, n, d).
    """
    cfg = model.config
    w = model.layers[layer]
    x = rms_norm(h, w.attn_norm, cfg.norm_eps)
    q = np.einsum("...ne,ehd->...hnd", x, w.wq)
    k = np.einsum("...ne,ehd->...hnd", x, w.wk)
    v = np.einsum("...ne,ehd->...hnd", x, w.wv)
    q = rope(q, positions, cfg.rope_theta) / np.sqrt(cfg.d)
    k = rope(k, positions, cfg.rope_theta)
    return q, k, v


def output_projection(model: ModelWeights, layer: int, heads: np.ndarray) -> np.ndarray:
    """(..., H, n, d) attention output -> (..., n, d_emb)."""
    return np.einsum("...hnd,hde->...ne", heads, model.layers[layer].wo)


def mlp_residual(model: ModelWeights, layer: int, h: np.ndarray) -> np.ndarray:
    w = model.layers[layer]
    x = rms_norm(h, w.mlp_norm, model.config.norm_eps)
    return h + (gelu_tanh(x @ w.w_gate) * (x @ w.w_up)) @ w.w_down


def final_logits(model: ModelWeights, h: np.ndarray) -> np.ndarray:
    x = rms_norm(h, model.final_norm, model.config.norm_eps)
    return x @ model.embedding.T


# ---------------------------------------------------------------------------
# vanilla forward


def _check_tokens(model: ModelWeights, tokens) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64)
    if t.ndim == 0 or t.shape[-1] == 0:
        raise ValueError("empty token sequence")
    if t.shape[-1] > model.config.max_seq:
        raise ValueError(f"sequence length {t.shape[-1]} exceeds max_seq {model.config.max_seq}")
    if t.min() < 0 or t.max() >= model.config.V:
        raise ValueError(f"token id outside [0, {model.config.V})")
    return t


def decoder_layer(model: ModelWeights, layer: int, h: np.ndarray) -> np.ndarray:
    n = h.shape[-2]
    pos = np.arange(n)
    q, k, v = project_qkv(model, layer, h, pos)
    attn = attention_reference(q, k, v, causal_mask(pos, pos))
    h = h + output_projection(model, layer, attn)
    return mlp_residual(model, layer, h)


def forward_batch(model: ModelWeights, tokens: np.ndarray, L: int) -> np.ndarray:
    """Hidden states after ``L`` layers for a (B, n) batch of token ids."""
    if not 0 <= L <= model.config.num_layers:
        raise ValueError(f"layer count {L} outside [0, {model.config.num_layers}]")
    t = _check_tokens(model, tokens)
    h = model.embedding[t]
    for layer in range(L):
        h = decoder_layer(model, layer, h)
    return h


def forward_prefix(model: ModelWeights, tokens, L: int) -> np.ndarray:
    """N x d_emb hidden rows after the first ``L`` decoder layers (L=0: embeddings)."""
    t = _check_tokens(model, tokens)
    if t.ndim != 1:
        raise ValueError("forward_prefix expects a 1-D token sequence")
    return forward_batch(model, t, L)


def forward_full(model: ModelWeights, tokens) -> np.ndarray:
    h = forward_prefix(model, tokens, model.config.num_layers)
    return final_logits(model, h)


def greedy_decode(model: ModelWeights, prompt, n_new: int) -> list[int]:
    tokens = [int(t) for t in _check_tokens(model, prompt)]
    if n_new < 0:
        raise ValueError("n_new must be >= 0")
    if len(tokens) + n_new > model.config.max_seq:
        raise ValueError(
            f"prompt length {len(tokens)} + n_new {n_new} exceeds max_seq {model.config.max_seq}")
    for _ in range(n_new):
        logits = forward_full(model, tokens)
        tokens.append(int(np.argmax(logits[-1])))
    return tokens
