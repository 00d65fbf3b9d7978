"""Bottleneck graph adapter: similarity-graph construction, adaptive local
feature aggregation, and the residual forward pass, with analytic gradients
for every learnable parameter.

Pipeline order (the feature-fusion matrix is applied after graph
propagation, and pooling operates on the post-fusion hidden features
reshaped to [B, H, W, D_hidden]):

    Z   = GELU(flatten(x) @ down + b_down)
    S   = tanh(cos_sim(Z) / sqrt(D_hidden))
    A   = row-normalized top-k graph from S with rank weights
    F   = (A @ Z) @ W_fusion
    Z'  = gated_residual(F, hybrid_pool(dual_pool(F)))
    out = unflatten(dropout(Z') @ up + b_up) + x

Discrete selections (top-k membership, the chosen neighbor count k, the
floor inside adaptive_k, max-pool argmax) are treated as constants of the
forward pass: they receive zero gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .numerics import (
    check_finite,
    gelu,
    gelu_grad,
    l2_normalize,
    matmul,
    sigmoid,
    sigmoid_grad,
    softmax,
    softmax_vjp,
)

__all__ = [
    "DsgaConfig",
    "DsgaParams",
    "SimilarityGraph",
    "similarity_matrix",
    "init_rank_weights",
    "rank_weights",
    "adaptive_k",
    "build_graph",
    "propagate",
    "dual_pool",
    "hybrid_pool",
    "gated_residual",
    "dropout_mask",
    "dsga_forward",
    "dsga_vjp",
    "parameter_count",
    "init_dsga_params",
]


@dataclass
class DsgaConfig:
    """Adapter hyperparameters. ``d_hidden = floor(reduction_ratio * embed_dim)``."""

    embed_dim: int
    reduction_ratio: float = 0.25
    k_max: int = 8
    decay_exponent: float = 2.0
    dropout_prob: float = 0.1
    mode: str = "eval"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be positive, got {self.embed_dim}")
        if not 0.0 < self.reduction_ratio <= 1.0:
            raise ValueError(f"reduction_ratio must be in (0, 1], got {self.reduction_ratio}")
        if self.k_max < 1:
            raise ValueError(f"k_max must be >= 1, got {self.k_max}")
        if self.decay_exponent <= 0:
            raise ValueError(f"decay_exponent must be positive, got {self.decay_exponent}")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError(f"dropout_prob must be in [0, 1), got {self.dropout_prob}")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        if self.d_hidden < 1:
            raise ValueError(
                f"floor(reduction_ratio * embed_dim) = {self.d_hidden} must be >= 1"
            )

    @property
    def d_hidden(self) -> int:
        return int(math.floor(self.reduction_ratio * self.embed_dim))


@dataclass
class DsgaParams:
    """Learnable state: down/up projections (with biases), the feature-fusion
    matrix, pre-softmax rank-weight logits, and the three scalar gates."""

    down_w: np.ndarray  # [D, D_hidden]
    down_b: np.ndarray  # [D_hidden]
    up_w: np.ndarray    # [D_hidden, D]
    up_b: np.ndarray    # [D]
    fusion_w: np.ndarray  # [D_hidden, D_hidden]
    rank_logits: np.ndarray  # [K_max]
    theta_k: float
    w_p_raw: float
    w_n_raw: float

    def count(self) -> int:
        return int(
            self.down_w.size
            + self.down_b.size
            + self.up_w.size
            + self.up_b.size
            + self.fusion_w.size
            + self.rank_logits.size
            + 3
        )

    def named_arrays(self):
        return {
            "down_w": self.down_w,
            "down_b": self.down_b,
            "up_w": self.up_w,
            "up_b": self.up_b,
            "fusion_w": self.fusion_w,
            "rank_logits": self.rank_logits,
        }


def init_rank_weights(k_max: int, p: float) -> np.ndarray:
    """Polynomial-decay logits: 1 - (r / (k_max - 1))^p for ranks r = 0..k_max-1."""
    if k_max < 1:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    if k_max == 1:
        return np.array([1.0])
    r = np.arange(k_max, dtype=np.float64)
    return 1.0 - (r / (k_max - 1)) ** p


def rank_weights(raw: np.ndarray) -> np.ndarray:
    """Softmax over the rank logits; positive, sums to 1, one weight per rank."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 1:
        return np.array([1.0])
    return softmax(raw)


def adaptive_k(theta_k: float, k_max: int) -> int:
    """k = min(K_max, max(1, floor(sigmoid(theta) * (K_max - 1) + 1)))."""
    if k_max < 1:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    k = int(math.floor(sigmoid(theta_k) * (k_max - 1) + 1.0))
    return min(k_max, max(1, k))


def init_theta_k(k_max: int) -> float:
    return math.log(k_max / 2.0)


def init_dsga_params(cfg: DsgaConfig, precision: str = "single") -> DsgaParams:
    """Seeded initialization; up-projection scale matches the down one (callers
    zero it out to start from the identity map)."""
    dtype = np.float32 if precision == "single" else np.float64
    rng = np.random.default_rng(cfg.seed)
    d, dh = cfg.embed_dim, cfg.d_hidden

    def linear(fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    return DsgaParams(
        down_w=linear(d, (d, dh)),
        down_b=linear(d, (dh,)),
        up_w=linear(dh, (dh, d)),
        up_b=linear(dh, (d,)),
        fusion_w=linear(dh, (dh, dh)),
        rank_logits=init_rank_weights(cfg.k_max, cfg.decay_exponent).astype(dtype),
        theta_k=init_theta_k(cfg.k_max),
        w_p_raw=0.0,
        w_n_raw=0.0,
    )


@dataclass
class SimilarityGraph:
    """Per-batch-element sparse top-k adjacency.

    ``neighbors[b, i]`` holds the k neighbor indices of node i sorted by
    descending similarity (ties broken by lowest index, node i excluded);
    ``edge_weights`` are the row-normalized rank weights and ``self_weights``
    the normalized self-connection, so each row sums to 1.
    """

    neighbors: np.ndarray     # [B, N, k] int
    edge_weights: np.ndarray  # [B, N, k]
    self_weights: np.ndarray  # [B, N]
    k: int
    raw_similarity: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def batch(self) -> int:
        return self.neighbors.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.neighbors.shape[1]

    def to_dense(self) -> np.ndarray:
        """Materialize the [B, N, N] row-stochastic adjacency matrix."""
        b, n, k = self.neighbors.shape
        dense = np.zeros((b, n, n), dtype=self.edge_weights.dtype)
        bi = np.arange(b)[:, None, None]
        ni = np.arange(n)[None, :, None]
        if k > 0:
            dense[bi, ni, self.neighbors] = self.edge_weights
        dense[np.arange(b)[:, None], np.arange(n)[None, :], np.arange(n)[None, :]] = (
            self.self_weights
        )
        return dense

    def as_json_obj(self):
        out = []
        for b in range(self.batch):
            nodes = []
            for i in range(self.num_nodes):
                nodes.append(
                    {
                        "node": i,
                        "self_weight": float(self.self_weights[b, i]),
                        "neighbors": [
                            {
                                "index": int(self.neighbors[b, i, r]),
                                "rank": r,
                                "weight": float(self.edge_weights[b, i, r]),
                            }
                            for r in range(self.k)
                        ],
                    }
                )
            out.append(nodes)
        return out


def similarity_matrix(z: np.ndarray) -> np.ndarray:
    """Temperature-controlled cosine similarity: tanh(<z_i, z_j> / sqrt(D_hidden))
    on row-wise L2-normalized features. Symmetric, entries in (-1, 1)."""
    z = np.asarray(z)
    if z.ndim != 3:
        raise ValueError(f"expected [B, N, D_hidden], got shape {z.shape}")
    zh = l2_normalize(z, axis=-1)
    scale = 1.0 / math.sqrt(z.shape[-1])
    return np.tanh(matmul(zh, zh.transpose(0, 2, 1)) * scale)


def build_graph(
    s: np.ndarray,
    k: int,
    weights: np.ndarray,
    keep_similarity: bool = False,
) -> SimilarityGraph:
    """Top-k neighborhood selection plus rank-weighted, row-normalized adjacency.

    Self-connections carry pre-normalization weight 1 and never compete in
    the top-k. k is clamped to N - 1 when fewer candidates exist (N = 1
    yields the pure self-loop graph).
    """
    s = np.asarray(s)
    if s.ndim != 3 or s.shape[1] != s.shape[2]:
        raise ValueError(f"expected square [B, N, N] similarities, got {s.shape}")
    weights = np.asarray(weights, dtype=np.float64)
    b, n, _ = s.shape
    k_eff = min(int(k), n - 1)
    if k_eff < 0:
        k_eff = 0
    if k_eff > weights.size:
        raise ValueError(f"k={k_eff} exceeds available rank weights ({weights.size})")

    if k_eff == 0:
        neighbors = np.zeros((b, n, 0), dtype=np.intp)
        edge_weights = np.zeros((b, n, 0))
        self_weights = np.ones((b, n))
    else:
        masked = s.astype(np.float64, copy=True)
        diag = np.arange(n)
        masked[:, diag, diag] = -np.inf
        # stable sort on the negated scores: descending similarity, ties by lowest index
        order = np.argsort(-masked, axis=-1, kind="stable")
        neighbors = order[:, :, :k_eff]
        used = weights[:k_eff]
        row_sum = 1.0 + float(used.sum())
        edge_weights = np.broadcast_to(used / row_sum, (b, n, k_eff)).copy()
        self_weights = np.full((b, n), 1.0 / row_sum)

    return SimilarityGraph(
        neighbors=neighbors,
        edge_weights=edge_weights,
        self_weights=self_weights,
        k=k_eff,
        raw_similarity=s.copy() if keep_similarity else None,
    )


def propagate(graph: SimilarityGraph, z: np.ndarray) -> np.ndarray:
    """Sparse aggregation out_i = A_ii z_i + sum_r A_{i,nbr(i,r)} z_{nbr(i,r)}."""
    z = np.asarray(z)
    b, n, _ = z.shape
    if graph.batch != b or graph.num_nodes != n:
        raise ValueError(
            f"graph is {graph.batch}x{graph.num_nodes} nodes, features are {b}x{n}"
        )
    out = graph.self_weights[..., None] * z
    if graph.k > 0:
        gathered = z[np.arange(b)[:, None, None], graph.neighbors]  # [B,N,k,Dh]
        out = out + np.sum(graph.edge_weights[..., None] * gathered, axis=2)
    return out


def _reflect_indices(n: int) -> np.ndarray:
    """Source index per padded position for pad-1 reflection (replicates at n=1)."""
    if n == 1:
        return np.zeros(3, dtype=np.intp)
    idx = np.arange(-1, n + 1)
    idx[0] = 1
    idx[-1] = n - 2
    return idx


_OFFSETS = [(dy, dx) for dy in range(3) for dx in range(3)]


def _dual_pool_trace(zp: np.ndarray):
    zp = np.asarray(zp)
    if zp.ndim != 4:
        raise ValueError(f"expected [B, H, W, C], got shape {zp.shape}")
    _, h, w, _ = zp.shape
    rows = _reflect_indices(h)
    cols = _reflect_indices(w)
    padded = zp[:, rows][:, :, cols]  # [B, H+2, W+2, C]
    stack = np.stack(
        [padded[:, dy : dy + h, dx : dx + w] for dy, dx in _OFFSETS], axis=0
    )
    mx = stack.max(axis=0)
    argmax = stack.argmax(axis=0)
    av = stack.mean(axis=0)
    return mx, av, argmax, rows, cols


def dual_pool(zp: np.ndarray):
    """Parallel 3x3 max and average pooling, stride 1, reflective padding of 1;
    output shapes equal the input shape."""
    mx, av, _, _, _ = _dual_pool_trace(zp)
    return mx, av


def _dual_pool_vjp(dmx, dav, argmax, rows, cols, shape):
    b, h, w, c = shape
    dpadded = np.zeros((b, h + 2, w + 2, c), dtype=np.float64)
    for o, (dy, dx) in enumerate(_OFFSETS):
        contrib = np.where(argmax == o, dmx, 0.0) + dav / 9.0
        dpadded[:, dy : dy + h, dx : dx + w] += contrib
    folded_rows = np.zeros((b, h, w + 2, c), dtype=np.float64)
    np.add.at(folded_rows, (slice(None), rows), dpadded)
    out = np.zeros((b, h, w, c), dtype=np.float64)
    np.add.at(out, (slice(None), slice(None), cols), folded_rows)
    return out


def hybrid_pool(max_t: np.ndarray, avg_t: np.ndarray, w_p_raw: float) -> np.ndarray:
    """Learnable blend sigmoid(w_p) * max + (1 - sigmoid(w_p)) * avg."""
    if np.shape(max_t) != np.shape(avg_t):
        raise ValueError(f"pooled shapes differ: {np.shape(max_t)} vs {np.shape(avg_t)}")
    sp = sigmoid(w_p_raw)
    return sp * np.asarray(max_t) + (1.0 - sp) * np.asarray(avg_t)


def gated_residual(zp: np.ndarray, pooled: np.ndarray, w_n_raw: float) -> np.ndarray:
    """out = (1 - g) * zp + g * pooled with g = 0.5 * sigmoid(w_n_raw) in (0, 0.5),
    so at least half of the ungated features always survive."""
    if np.shape(zp) != np.shape(pooled):
        raise ValueError(f"shapes differ: {np.shape(zp)} vs {np.shape(pooled)}")
    g = 0.5 * sigmoid(w_n_raw)
    return (1.0 - g) * np.asarray(zp) + g * np.asarray(pooled)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def dropout_mask(n: int, prob: float, seed: int, stream: int = 0) -> np.ndarray:
    """Inverted-dropout scale factors from a counter-based generator.

    Element i keeps iff hash(seed, stream, i) maps above prob; kept elements
    are scaled by 1/(1-prob). Independent of thread schedule by construction.
    """
    if prob == 0.0:
        return np.ones(n)
    base = np.full(n, np.uint64(seed & 0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    with np.errstate(over="ignore"):
        base = _mix64(base + np.uint64(stream) * np.uint64(0xD1B54A32D192ED03))
        h = _mix64(base + np.arange(n, dtype=np.uint64))
    u = (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)
    return np.where(u >= prob, 1.0 / (1.0 - prob), 0.0)


def _forward_trace(x, params: DsgaParams, cfg: DsgaConfig, keep_similarity=False):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected [B, H, W, D], got shape {x.shape}")
    b, h, w, d = x.shape
    if d != cfg.embed_dim:
        raise ValueError(f"input channel dim {d} != configured embed_dim {cfg.embed_dim}")
    n = h * w
    check_finite(x, "input")

    t = {"x": x, "shape": (b, h, w, d), "n": n}
    xf = x.reshape(b, n, d)
    t["pre"] = check_finite(matmul(xf, params.down_w) + params.down_b, "down-projection")
    t["z"] = gelu(t["pre"])
    t["s"] = check_finite(similarity_matrix(t["z"]), "similarity")
    k = adaptive_k(params.theta_k, cfg.k_max)
    t["w_rank"] = rank_weights(params.rank_logits)
    t["graph"] = build_graph(t["s"], k, t["w_rank"], keep_similarity=keep_similarity)
    t["g"] = propagate(t["graph"], t["z"])
    t["f"] = check_finite(matmul(t["g"], params.fusion_w), "fusion")
    fr = t["f"].reshape(b, h, w, cfg.d_hidden)
    t["fr"] = fr
    mx, av, argmax, rows, cols = _dual_pool_trace(fr)
    t.update(mx=mx, av=av, argmax=argmax, rows=rows, cols=cols)
    t["pooled"] = hybrid_pool(mx, av, params.w_p_raw)
    t["zp"] = gated_residual(fr, t["pooled"], params.w_n_raw)

    flat = t["zp"].reshape(b, n, cfg.d_hidden)
    if cfg.mode == "train" and cfg.dropout_prob > 0.0:
        scale = dropout_mask(flat.size, cfg.dropout_prob, cfg.seed).reshape(flat.shape)
    else:
        scale = None
    t["drop_scale"] = scale
    t["dropped"] = flat if scale is None else flat * scale
    delta = (matmul(t["dropped"], params.up_w) + params.up_b).reshape(b, h, w, d)
    # graph weights are built in float64; keep the residual sum in the input dtype
    t["out"] = check_finite(delta.astype(x.dtype, copy=False) + x, "up-projection")
    return t


def dsga_forward(x, params: DsgaParams, cfg: DsgaConfig, keep_similarity=False):
    """Residual adapter forward pass; returns (output, similarity graph).

    Output shape equals input shape; with a zero up-projection the map is
    the identity bit-for-bit in eval mode.
    """
    t = _forward_trace(x, params, cfg, keep_similarity=keep_similarity)
    return t["out"], t["graph"]


def dsga_vjp(x, params: DsgaParams, cfg: DsgaConfig, upstream):
    """Cotangents of sum(upstream * dsga_forward(x)) wrt x and all parameters.

    Requires eval mode or dropout_prob = 0. theta_k sits behind the floor in
    adaptive_k and therefore gets zero gradient; graph structure is held
    fixed (top-k membership does not differentiate).
    """
    if cfg.mode == "train" and cfg.dropout_prob > 0.0:
        raise ValueError("dsga_vjp requires eval mode or dropout_prob = 0")
    upstream = np.asarray(upstream, dtype=np.float64)
    t = _forward_trace(x, params, cfg)
    if upstream.shape != t["out"].shape:
        raise ValueError(
            f"upstream shape {upstream.shape} != output shape {t['out'].shape}"
        )
    b, h, w, d = t["shape"]
    n = t["n"]
    dh = cfg.d_hidden
    graph: SimilarityGraph = t["graph"]

    dx = upstream.copy()  # residual term
    uf = upstream.reshape(b, n, d)

    # up-projection
    d_up_w = np.einsum("bnh,bnd->hd", t["dropped"], uf)
    d_up_b = uf.sum(axis=(0, 1))
    d_dropped = matmul(uf, params.up_w.T)
    d_zp_flat = d_dropped  # vjp path has no dropout by precondition
    d_zp = d_zp_flat.reshape(b, h, w, dh)

    # gated residual
    g = 0.5 * sigmoid(params.w_n_raw)
    d_fr = (1.0 - g) * d_zp
    d_pooled = g * d_zp
    d_w_n = float(np.sum((t["pooled"] - t["fr"]) * d_zp)) * 0.5 * sigmoid_grad(
        params.w_n_raw
    )

    # hybrid pooling
    sp = sigmoid(params.w_p_raw)
    d_mx = sp * d_pooled
    d_av = (1.0 - sp) * d_pooled
    d_w_p = float(np.sum((t["mx"] - t["av"]) * d_pooled)) * sigmoid_grad(params.w_p_raw)

    # dual pooling (argmax fixed)
    d_fr = d_fr + _dual_pool_vjp(
        d_mx, d_av, t["argmax"], t["rows"], t["cols"], (b, h, w, dh)
    )
    d_f = d_fr.reshape(b, n, dh)

    # fusion
    d_fusion_w = np.einsum("bnh,bng->hg", t["g"], d_f)
    d_g = matmul(d_f, params.fusion_w.T)

    # graph propagation: out_i = A_ii z_i + sum_r w_r/s * z_nbr
    d_z = graph.self_weights[..., None] * d_g
    d_w_used = np.zeros(graph.k)
    d_row_sum = 0.0
    row_sum = 1.0 + float(t["w_rank"][: graph.k].sum()) if graph.k > 0 else 1.0
    if graph.k > 0:
        bi = np.arange(b)[:, None, None]
        gathered = t["z"][bi, graph.neighbors]  # [B,N,k,Dh]
        # scatter cotangent back to neighbor features
        contrib = graph.edge_weights[..., None] * d_g[:, :, None, :]  # [B,N,k,Dh]
        flat_idx = (np.arange(b)[:, None, None] * n + graph.neighbors).reshape(-1)
        np.add.at(
            d_z.reshape(b * n, dh), flat_idx, contrib.reshape(-1, dh)
        )
        # cotangent on the normalized adjacency values
        d_edge = np.sum(gathered * d_g[:, :, None, :], axis=-1)  # [B,N,k]
        d_self = np.sum(t["z"] * d_g, axis=-1)  # [B,N]
        # A_edge[r] = w_r / s and A_self = 1 / s with s = 1 + sum(w[:k])
        d_w_used = d_edge.sum(axis=(0, 1)) / row_sum
        d_row_sum = -(
            float(np.sum(d_edge * graph.edge_weights)) + float(np.sum(d_self * graph.self_weights))
        ) / row_sum
    d_w_rank = np.zeros_like(t["w_rank"])
    d_w_rank[: graph.k] = d_w_used + d_row_sum
    d_rank_logits = softmax_vjp(t["w_rank"], d_w_rank)
    if params.rank_logits.size == 1:
        d_rank_logits = np.zeros(1)

    # activation and down-projection
    d_pre = d_z * gelu_grad(t["pre"])
    xf = np.asarray(x).reshape(b, n, d)
    d_down_w = np.einsum("bnd,bnh->dh", xf, d_pre)
    d_down_b = d_pre.sum(axis=(0, 1))
    dx += matmul(d_pre, params.down_w.T).reshape(b, h, w, d)

    grads = DsgaParams(
        down_w=d_down_w,
        down_b=d_down_b,
        up_w=d_up_w,
        up_b=d_up_b,
        fusion_w=d_fusion_w,
        rank_logits=d_rank_logits,
        theta_k=0.0,
        w_p_raw=d_w_p,
        w_n_raw=d_w_n,
    )
    return dx, grads


def parameter_count(cfg: DsgaConfig, num_layers: int) -> int:
    """Trainable scalars for a stack of adapters: per layer,
    D*Dh + Dh + Dh*D + D + Dh^2 + K_max + 3."""
    if num_layers < 0:
        raise ValueError(f"num_layers must be >= 0, got {num_layers}")
    d, dh = cfg.embed_dim, cfg.d_hidden
    per_layer = d * dh + dh + dh * d + d + dh * dh + cfg.k_max + 3
    return num_layers * per_layer
