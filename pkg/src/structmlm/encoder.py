"""Sliding-window + global-token sparse attention encoder.

A pre-norm transformer encoder in pure numpy (float64) with hand-written
reverse-mode gradients. Attention for ordinary rows is computed over an
explicit banded index structure of shape (n, window+1) plus the global
columns, never materializing n x n, so cost stays linear in n for fixed
window and global count. Rows that are themselves global attend densely.
A textbook dense attention oracle exists for equivalence tests only.

Shape conventions: (n, d) for token activations, (H, n, dh) for per-head
tensors with dh = d // H.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import NoMaskedPositionsError, SequenceTooLongError

LABEL_IGNORE = -1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    window: int  # total span; a token attends to |i - j| <= window // 2
    vocab_size: int
    max_len: int
    share_global_projections: bool = True
    tie_mlm_head: bool = True

    def __post_init__(self):
        if min(self.n_layers, self.n_heads, self.d_model, self.d_ff, self.vocab_size, self.max_len) <= 0:
            raise ValueError("all ModelConfig dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.window < 0 or self.window % 2 != 0:
            raise ValueError("window must be even and non-negative")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "window": self.window,
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "share_global_projections": self.share_global_projections,
            "tie_mlm_head": self.tie_mlm_head,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class AttentionPattern:
    """The allowed-pair predicate: (i, j) is allowed iff |i - j| <= window/2,
    or i is global, or j is global. Every (i, i) is allowed."""

    n: int
    window: int
    global_positions: Tuple[int, ...]

    def __post_init__(self):
        g = tuple(sorted(set(int(p) for p in self.global_positions)))
        if g and (g[0] < 0 or g[-1] >= self.n):
            raise ValueError("global positions out of range")
        object.__setattr__(self, "global_positions", g)

    @classmethod
    def from_global_mask(cls, global_mask: Sequence[int], window: int) -> "AttentionPattern":
        mask = np.asarray(global_mask)
        return cls(int(mask.shape[0]), window, tuple(int(i) for i in np.flatnonzero(mask)))

    def allows(self, i: int, j: int) -> bool:
        return abs(i - j) <= self.window // 2 or i in self.global_positions or j in self.global_positions

    def allowed_mask(self) -> np.ndarray:
        """Dense (n, n) boolean mask; for tests and analysis only."""
        idx = np.arange(self.n)
        mask = np.abs(idx[:, None] - idx[None, :]) <= self.window // 2
        for p in self.global_positions:
            mask[p, :] = True
            mask[:, p] = True
        return mask


def pair_count(n: int, window: int, global_positions: Iterable[int]) -> int:
    """Exact cardinality of the allowed-pair set."""
    if n <= 0:
        return 0
    k = min(window // 2, n - 1)
    i = np.arange(n)
    band = np.minimum(i + k, n - 1) - np.maximum(i - k, 0) + 1
    total = int(band.sum())
    g = sorted(set(int(p) for p in global_positions))
    if g and (g[0] < 0 or g[-1] >= n):
        raise ValueError("global positions out of range")
    for a in g:
        total += 2 * (n - int(band[a]))  # row a and column a beyond the band
    for a in g:  # pairs with both ends global and outside the band are counted twice
        for b in g:
            if abs(a - b) > k:
                total -= 1
    return total


class _PatternIndex:
    """Banded gather indices realizing the allowed lists of a pattern.

    Band slots covering global columns are masked out; those pairs are
    handled by the global part, so the union stays duplicate-free.
    """

    def __init__(self, pattern: AttentionPattern):
        n = pattern.n
        k = min(pattern.window // 2, max(n - 1, 0))
        offsets = np.arange(-k, k + 1)
        cols = np.arange(n)[:, None] + offsets[None, :]  # (n, T)
        in_range = (cols >= 0) & (cols < n)
        self.cols = np.clip(cols, 0, n - 1)
        self.is_global = np.zeros(n, dtype=bool)
        g = np.asarray(pattern.global_positions, dtype=np.int64)
        if g.size:
            self.is_global[g] = True
        self.g_pos = g
        self.band_ok = in_range & ~self.is_global[self.cols] & ~self.is_global[:, None]
        self.n = n
        self.k_half = k
        self.pattern = pattern


@dataclass
class SparseAttentionWeights:
    """Attention weights of one layer in banded + global form.

    p_band holds non-global rows' weights over their band slots, p_glob the
    same rows' weights on the global columns, and p_full the dense rows of
    the global positions. Disallowed pairs carry exactly zero everywhere.
    """

    index: _PatternIndex
    p_band: np.ndarray  # (H, n, T)
    p_glob: np.ndarray  # (H, n, g)
    p_full: np.ndarray  # (H, g, n)

    @property
    def n_heads(self) -> int:
        return self.p_band.shape[0]

    def to_dense(self) -> np.ndarray:
        """(H, n, n) weights with structural zeros; for tests/analysis."""
        idx = self.index
        H, n = self.n_heads, idx.n
        dense = np.zeros((H, n, n))
        np.add.at(dense, (np.arange(H)[:, None, None], np.arange(n)[None, :, None], idx.cols[None, :, :]),
                  np.where(idx.band_ok[None, :, :], self.p_band, 0.0))
        if idx.g_pos.size:
            dense[:, :, idx.g_pos] = self.p_glob
            dense[:, idx.g_pos, :] = self.p_full
        return dense

    def mean_heads(self) -> np.ndarray:
        return self.to_dense().mean(axis=0)


@dataclass
class ActivationTrace:
    """Per-layer attention weights captured during one forward pass."""

    layers: List[SparseAttentionWeights] = field(default_factory=list)

    def mean_heads(self, layer: int) -> np.ndarray:
        return self.layers[layer].mean_heads()


def _band_scatter_add(target, coeff, source, k_half):
    """target[:, i + t - k_half] += coeff[:, i, t] * source[:, i] for every
    in-range band slot, without materializing an (H, n, T, dh) temporary.
    Out-of-range slots were masked to coefficient zero upstream."""
    n = target.shape[1]
    for t in range(coeff.shape[2]):
        o = t - k_half
        if o >= 0:
            if o < n:
                target[:, o:] += coeff[:, : n - o, t, None] * source[:, : n - o]
        elif -o < n:
            target[:, : n + o] += coeff[:, -o:, t, None] * source[:, -o:]


def _band_gather_dot(a, b, k_half, T):
    """out[:, i, t] = a[:, i] . b[:, i + t - k_half] for in-range slots,
    zero elsewhere. Banded counterpart of a @ b.T."""
    H, n, _ = a.shape
    out = np.zeros((H, n, T))
    for t in range(T):
        o = t - k_half
        if o >= 0:
            if o < n:
                out[:, : n - o, t] = np.einsum("hnd,hnd->hn", a[:, : n - o], b[:, o:])
        elif -o < n:
            out[:, -o:, t] = np.einsum("hnd,hnd->hn", a[:, -o:], b[:, : n + o])
    return out


def _band_weighted_sum(coeff, source, k_half):
    """out[:, i] = sum_t coeff[:, i, t] * source[:, i + t - k_half]."""
    H, n, T = coeff.shape
    out = np.zeros((H, n, source.shape[2]))
    for t in range(T):
        o = t - k_half
        if o >= 0:
            if o < n:
                out[:, : n - o] += coeff[:, : n - o, t, None] * source[:, o:]
        elif -o < n:
            out[:, -o:] += coeff[:, -o:, t, None] * source[:, : n + o]
    return out


def _sparse_attention_core(q, k, v, qg, kg, vg, idx: _PatternIndex):
    """Multi-head sparse attention. All of q..vg are (H, n, dh); the g*
    tensors are the same objects as q/k/v when projections are shared.

    Returns (out (H, n, dh), weights, cache-for-backward).
    """
    H, n, dh = q.shape
    scale = 1.0 / math.sqrt(dh)
    g = idx.g_pos
    T = idx.cols.shape[1]

    s_band = _band_gather_dot(q, k, idx.k_half, T) * scale
    s_band = np.where(idx.band_ok[None], s_band, -np.inf)
    band_max = s_band.max(axis=-1)  # -inf on global rows

    if g.size:
        kg_cols = kg[:, g]  # (H, g, dh)
        s_glob = np.einsum("hnd,hgd->hng", q, kg_cols) * scale
        row_max = np.maximum(band_max, s_glob.max(axis=-1))
    else:
        s_glob = np.zeros((H, n, 0))
        row_max = band_max

    e_band = np.exp(s_band - row_max[..., None])
    e_glob = np.exp(s_glob - row_max[..., None]) if g.size else s_glob
    denom = e_band.sum(axis=-1) + (e_glob.sum(axis=-1) if g.size else 0.0)
    p_band = e_band / denom[..., None]
    p_glob = e_glob / denom[..., None] if g.size else e_glob

    out = _band_weighted_sum(p_band, v, idx.k_half)
    if g.size:
        out += np.einsum("hng,hgd->hnd", p_glob, vg[:, g])
        # global rows attend densely, in global projection space
        qg_rows = qg[:, g]
        s_full = np.einsum("hgd,hmd->hgm", qg_rows, kg) * scale
        s_full -= s_full.max(axis=-1, keepdims=True)
        e_full = np.exp(s_full)
        p_full = e_full / e_full.sum(axis=-1, keepdims=True)
        out[:, g] = np.einsum("hgm,hmd->hgd", p_full, vg)
        p_band = p_band.copy()
        p_glob = p_glob.copy()
        p_band[:, g] = 0.0
        p_glob[:, g] = 0.0
    else:
        p_full = np.zeros((H, 0, n))

    weights = SparseAttentionWeights(idx, p_band, p_glob, p_full)
    cache = (q, k, v, qg, kg, vg, weights)
    return out, weights, cache


def _sparse_attention_core_backward(d_out, cache):
    """Gradients of the core w.r.t. q, k, v and the global-projection
    variants. Structural zeros receive exactly zero gradient because the
    masked band slots have p = 0."""
    q, k, v, qg, kg, vg, weights = cache
    idx = weights.index
    H, n, dh = q.shape
    scale = 1.0 / math.sqrt(dh)
    g = idx.g_pos
    k_half = idx.k_half
    p_band, p_glob, p_full = weights.p_band, weights.p_glob, weights.p_full

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    dqg = np.zeros_like(q)
    dkg = np.zeros_like(k)
    dvg = np.zeros_like(v)

    d_ng = d_out
    if g.size:
        d_ng = d_out.copy()
        d_ng[:, g] = 0.0

    dp_band = _band_gather_dot(d_ng, v, k_half, p_band.shape[2])
    dp_band *= idx.band_ok[None]
    row_dot = (p_band * dp_band).sum(axis=-1)
    if g.size:
        dp_glob = np.einsum("hnd,hgd->hng", d_ng, vg[:, g])
        row_dot = row_dot + (p_glob * dp_glob).sum(axis=-1)
    ds_band = p_band * (dp_band - row_dot[..., None])
    dq += _band_weighted_sum(ds_band, k, k_half) * scale
    _band_scatter_add(dk, ds_band * scale, q, k_half)
    _band_scatter_add(dv, p_band, d_ng, k_half)
    if g.size:
        ds_glob = p_glob * (dp_glob - row_dot[..., None])
        dq += np.einsum("hng,hgd->hnd", ds_glob, kg[:, g]) * scale
        dkg[:, g] += np.einsum("hng,hnd->hgd", ds_glob, q) * scale
        dvg[:, g] += np.einsum("hng,hnd->hgd", p_glob, d_ng)

        d_g = d_out[:, g]  # (H, g, dh) dense global rows
        dp_full = np.einsum("hgd,hmd->hgm", d_g, vg)
        dvg += np.einsum("hgm,hgd->hmd", p_full, d_g)
        ds_full = p_full * (dp_full - (p_full * dp_full).sum(axis=-1, keepdims=True))
        dqg[:, g] += np.einsum("hgm,hmd->hgd", ds_full, kg) * scale
        dkg += np.einsum("hgm,hgd->hmd", ds_full, qg[:, g]) * scale
    return dq, dk, dv, dqg, dkg, dvg


def sparse_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, pattern: AttentionPattern):
    """Single-head sparse attention over (n, dh) matrices.

    Returns (output (n, dh), weights (n, n)) with weights exactly zero at
    disallowed pairs. The dense weights matrix is assembled only for the
    return value; computation itself stays banded.
    """
    if q.shape[0] != pattern.n:
        raise ValueError(f"pattern length {pattern.n} does not match sequence length {q.shape[0]}")
    idx = _PatternIndex(pattern)
    qh, kh, vh = (np.asarray(a, dtype=np.float64)[None] for a in (q, k, v))
    out, weights, _ = _sparse_attention_core(qh, kh, vh, qh, kh, vh, idx)
    return out[0], weights.to_dense()[0]


def dense_reference_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Textbook scaled-dot-product attention over all pairs (oracle)."""
    q = np.asarray(q, dtype=np.float64)
    scores = q @ np.asarray(k, dtype=np.float64).T / math.sqrt(q.shape[-1])
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    p = e / e.sum(axis=-1, keepdims=True)
    return p @ np.asarray(v, dtype=np.float64), p


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _layer_tensor_names(config: ModelConfig, i: int) -> List[str]:
    names = [f"layer{i}.wq", f"layer{i}.wk", f"layer{i}.wv", f"layer{i}.wo"]
    if not config.share_global_projections:
        names += [f"layer{i}.gwq", f"layer{i}.gwk", f"layer{i}.gwv"]
    names += [
        f"layer{i}.ffn_w1",
        f"layer{i}.ffn_b1",
        f"layer{i}.ffn_w2",
        f"layer{i}.ffn_b2",
        f"layer{i}.ln1_scale",
        f"layer{i}.ln1_shift",
        f"layer{i}.ln2_scale",
        f"layer{i}.ln2_shift",
    ]
    return names


def tensor_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    d, f, V = config.d_model, config.d_ff, config.vocab_size
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["tok_emb"] = (V, d)
    shapes["pos_emb"] = (config.max_len, d)
    for i in range(config.n_layers):
        for name in _layer_tensor_names(config, i):
            base = name.split(".")[1]
            shapes[name] = {
                "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
                "gwq": (d, d), "gwk": (d, d), "gwv": (d, d),
                "ffn_w1": (d, f), "ffn_b1": (f,), "ffn_w2": (f, d), "ffn_b2": (d,),
                "ln1_scale": (d,), "ln1_shift": (d,), "ln2_scale": (d,), "ln2_shift": (d,),
            }[base]
    if not config.tie_mlm_head:
        shapes["head_w"] = (d, V)
    return shapes


@dataclass
class Parameters:
    """All trainable tensors, keyed by canonical name, plus their config."""

    config: ModelConfig
    tensors: "OrderedDict[str, np.ndarray]"

    def copy(self) -> "Parameters":
        return Parameters(self.config, OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def equals(self, other: "Parameters") -> bool:
        """Bitwise equality of every tensor."""
        return set(self.tensors) == set(other.tensors) and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


def init_parameters(config: ModelConfig, seed: int) -> Parameters:
    """Xavier-uniform matrices, zero vectors, unit layer-norm scales.
    Tensors are drawn in canonical name order so init is reproducible."""
    rng = np.random.default_rng(seed)
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in tensor_shapes(config).items():
        if len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
        elif name.endswith("_scale"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return Parameters(config, tensors)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

_LN_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _layer_norm(x, scale, shift):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * scale + shift, (xhat, inv, scale)


def _layer_norm_backward(dy, cache):
    xhat, inv, scale = cache
    dxhat = dy * scale
    dscale = (dy * xhat).sum(axis=0)
    dshift = dy.sum(axis=0)
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dscale, dshift


def _gelu(x):
    x2 = x * x
    u = _GELU_C * x * (1.0 + _GELU_A * x2)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), t


def _gelu_backward(dy, x, t):
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _split_heads(x, n_heads):
    n, d = x.shape
    return x.reshape(n, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    H, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, H * dh)


def _forward_cached(params: Parameters, ids: np.ndarray, global_mask: np.ndarray, want_trace: bool = False):
    cfg = params.config
    t = params.tensors
    n = ids.shape[0]
    if n > cfg.max_len:
        raise SequenceTooLongError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    pattern = AttentionPattern.from_global_mask(global_mask, cfg.window)
    idx = _PatternIndex(pattern)

    x = t["tok_emb"][ids] + t["pos_emb"][:n]
    caches = []
    trace = ActivationTrace() if want_trace else None
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        h1, ln1_cache = _layer_norm(x, t[p + "ln1_scale"], t[p + "ln1_shift"])
        q = _split_heads(h1 @ t[p + "wq"], cfg.n_heads)
        k = _split_heads(h1 @ t[p + "wk"], cfg.n_heads)
        v = _split_heads(h1 @ t[p + "wv"], cfg.n_heads)
        if cfg.share_global_projections:
            qg, kg, vg = q, k, v
        else:
            qg = _split_heads(h1 @ t[p + "gwq"], cfg.n_heads)
            kg = _split_heads(h1 @ t[p + "gwk"], cfg.n_heads)
            vg = _split_heads(h1 @ t[p + "gwv"], cfg.n_heads)
        attn, weights, attn_cache = _sparse_attention_core(q, k, v, qg, kg, vg, idx)
        merged = _merge_heads(attn)
        x = x + merged @ t[p + "wo"]
        h2, ln2_cache = _layer_norm(x, t[p + "ln2_scale"], t[p + "ln2_shift"])
        u = h2 @ t[p + "ffn_w1"] + t[p + "ffn_b1"]
        a, tanh_u = _gelu(u)
        x = x + a @ t[p + "ffn_w2"] + t[p + "ffn_b2"]
        caches.append((h1, ln1_cache, attn_cache, merged, h2, ln2_cache, u, a, tanh_u))
        if want_trace:
            trace.layers.append(weights)

    head = t["tok_emb"].T if cfg.tie_mlm_head else t["head_w"]
    logits = x @ head
    return logits, (ids, x, caches), trace


def forward(params: Parameters, ids: Sequence[int], global_mask: Sequence[int], want_trace: bool = True):
    """MLM logits (n, vocab) for one sequence, plus the attention trace."""
    ids = np.asarray(ids, dtype=np.int64)
    global_mask = np.asarray(global_mask)
    logits, _, trace = _forward_cached(params, ids, global_mask, want_trace=want_trace)
    return logits, trace


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def mlm_loss(logits: np.ndarray, labels: Sequence[int]) -> float:
    """Mean natural-log cross entropy over positions whose label is not the
    LABEL_IGNORE sentinel."""
    labels = np.asarray(labels, dtype=np.int64)
    sel = labels != LABEL_IGNORE
    if not sel.any():
        raise NoMaskedPositionsError("no labeled positions")
    logp = _log_softmax(logits[sel])
    return float(-logp[np.arange(sel.sum()), labels[sel]].mean())


def _backward_through_model(dlogits, params: Parameters, fwd_cache, grads: Dict[str, np.ndarray]):
    cfg = params.config
    t = params.tensors
    ids, x_final, caches = fwd_cache
    n = ids.shape[0]

    if cfg.tie_mlm_head:
        grads["tok_emb"] += dlogits.T @ x_final
        dx = dlogits @ t["tok_emb"]
    else:
        grads["head_w"] += x_final.T @ dlogits
        dx = dlogits @ t["head_w"].T

    for i in reversed(range(cfg.n_layers)):
        p = f"layer{i}."
        h1, ln1_cache, attn_cache, merged, h2, ln2_cache, u, a, tanh_u = caches[i]

        # x_out = x_mid + gelu(h2 @ w1 + b1) @ w2 + b2
        da = dx @ t[p + "ffn_w2"].T
        grads[p + "ffn_w2"] += a.T @ dx
        grads[p + "ffn_b2"] += dx.sum(axis=0)
        du = _gelu_backward(da, u, tanh_u)
        dh2 = du @ t[p + "ffn_w1"].T
        grads[p + "ffn_w1"] += h2.T @ du
        grads[p + "ffn_b1"] += du.sum(axis=0)
        dx_mid, dscale2, dshift2 = _layer_norm_backward(dh2, ln2_cache)
        grads[p + "ln2_scale"] += dscale2
        grads[p + "ln2_shift"] += dshift2
        dx = dx + dx_mid

        # x_mid = x_in + merge(attn) @ wo
        dmerged = dx @ t[p + "wo"].T
        grads[p + "wo"] += merged.T @ dx
        d_attn = _split_heads(dmerged, cfg.n_heads)
        dq, dk, dv, dqg, dkg, dvg = _sparse_attention_core_backward(d_attn, attn_cache)
        if cfg.share_global_projections:
            dq, dk, dv = dq + dqg, dk + dkg, dv + dvg
            dh1 = _merge_heads(dq) @ t[p + "wq"].T + _merge_heads(dk) @ t[p + "wk"].T + _merge_heads(dv) @ t[p + "wv"].T
            grads[p + "wq"] += h1.T @ _merge_heads(dq)
            grads[p + "wk"] += h1.T @ _merge_heads(dk)
            grads[p + "wv"] += h1.T @ _merge_heads(dv)
        else:
            dh1 = np.zeros_like(h1)
            for name, grad in (("wq", dq), ("wk", dk), ("wv", dv), ("gwq", dqg), ("gwk", dkg), ("gwv", dvg)):
                gm = _merge_heads(grad)
                dh1 += gm @ t[p + name].T
                grads[p + name] += h1.T @ gm
        dx_in, dscale1, dshift1 = _layer_norm_backward(dh1, ln1_cache)
        grads[p + "ln1_scale"] += dscale1
        grads[p + "ln1_shift"] += dshift1
        dx = dx + dx_in

    np.add.at(grads["tok_emb"], ids, dx)
    grads["pos_emb"][:n] += dx


def zero_grads(params: Parameters) -> Dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.tensors.items()}


def loss_and_grads(params: Parameters, rows: Sequence[Tuple[np.ndarray, np.ndarray, np.ndarray]]):
    """Pooled masked cross entropy over a list of (ids, labels, global_mask)
    rows plus its exact gradients. The mean is taken over all masked
    positions of the batch; rows are processed in fixed order."""
    forwards = []
    total_masked = 0
    for ids, labels, global_mask in rows:
        ids = np.asarray(ids, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        logits, cache, _ = _forward_cached(params, ids, np.asarray(global_mask))
        sel = labels != LABEL_IGNORE
        forwards.append((logits, cache, labels, sel))
        total_masked += int(sel.sum())
    if total_masked == 0:
        raise NoMaskedPositionsError("batch contains no masked positions")

    grads = zero_grads(params)
    ce_sum = 0.0
    for logits, cache, labels, sel in forwards:
        logp = _log_softmax(logits)
        rows_sel = np.flatnonzero(sel)
        ce_sum += float(-logp[rows_sel, labels[rows_sel]].sum())
        dlogits = np.zeros_like(logits)
        probs = np.exp(logp[rows_sel])
        probs[np.arange(rows_sel.size), labels[rows_sel]] -= 1.0
        dlogits[rows_sel] = probs / total_masked
        _backward_through_model(dlogits, params, cache, grads)
    return ce_sum / total_masked, grads


def backward(params: Parameters, batch) -> Dict[str, np.ndarray]:
    """Exact gradients of the batch's mean masked cross entropy with respect
    to every parameter tensor."""
    rows = [
        (batch.input_ids[b], batch.labels[b], batch.global_mask[b])
        for b in range(batch.input_ids.shape[0])
    ]
    _, grads = loss_and_grads(params, rows)
    return grads
