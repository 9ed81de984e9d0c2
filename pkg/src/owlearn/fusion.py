"""Generalized fusion of per-modality representations.

Four schemes: fixed weighted average, learnable auto-weighting, a per-sample
attention head, and evidential (trusted) combination. Each forward returns a
cache that its backward consumes; gradients are exact and validated against
finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .numerics import as_matrix, row_softmax


class FusionKind(Enum):
    WEIGHTED_AVERAGE = "weighted-average"
    AUTO_WEIGHT = "auto-weight"
    ATTENTION = "attention"
    TRUSTED = "trusted"

    @classmethod
    def from_name(cls, name: str) -> "FusionKind":
        for kind in cls:
            if kind.value == name:
                return kind
        names = ", ".join(k.value for k in cls)
        raise ValueError(f"unknown fusion kind {name!r}; expected one of: {names}")


@dataclass
class FusionParams:
    """Fusion choice plus its (possibly learnable) parameters.

    weights: fixed convex weights for WEIGHTED_AVERAGE.
    logits:  learnable per-modality logits for AUTO_WEIGHT.
    query:   learnable K-vector scoring head for ATTENTION.
    TRUSTED has no parameters.
    """

    kind: FusionKind
    weights: np.ndarray | None = None
    logits: np.ndarray | None = None
    query: np.ndarray | None = None

    def learnable(self) -> list[np.ndarray]:
        out = []
        if self.kind is FusionKind.AUTO_WEIGHT:
            out.append(self.logits)
        elif self.kind is FusionKind.ATTENTION:
            out.append(self.query)
        return out


@dataclass
class FusionGrads:
    d_logits: np.ndarray | None = None
    d_query: np.ndarray | None = None

    def learnable(self) -> list[np.ndarray]:
        return [g for g in (self.d_logits, self.d_query) if g is not None]


def init_fusion(kind: FusionKind, n_modalities: int, n_classes: int,
                weights=None) -> FusionParams:
    if kind is FusionKind.WEIGHTED_AVERAGE:
        if weights is None:
            w = np.full(n_modalities, 1.0 / n_modalities)
        else:
            w = np.asarray(weights, dtype=np.float64)
            if w.shape != (n_modalities,):
                raise ValueError(f"need {n_modalities} weights, got shape {w.shape}")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("weights must be non-negative and sum to 1")
        return FusionParams(kind=kind, weights=w)
    if kind is FusionKind.AUTO_WEIGHT:
        return FusionParams(kind=kind, logits=np.zeros(n_modalities))
    if kind is FusionKind.ATTENTION:
        return FusionParams(kind=kind, query=np.zeros(n_classes))
    if kind is FusionKind.TRUSTED:
        return FusionParams(kind=kind)
    raise ValueError(f"unhandled fusion kind {kind}")


def _check_z_list(z_list):
    if not z_list:
        raise ValueError("fuse: modality list is empty")
    zs = [as_matrix(z, f"z_list[{i}]") for i, z in enumerate(z_list)]
    shape = zs[0].shape
    for i, z in enumerate(zs):
        if z.shape != shape:
            raise ValueError(f"fuse: z_list[{i}] has shape {z.shape}, expected {shape}")
    return zs


def _softplus(z):
    return np.logaddexp(0.0, z)


def _dirichlet_belief(z, k):
    """Evidence, belief masses and uncertainty for one modality."""
    e = _softplus(z)
    s = e.sum(axis=1, keepdims=True) + k
    return e, e / s, k / s[:, 0]


def _combine(b1, u1, b2, u2):
    """Reduced Dempster combination of two (belief, uncertainty) pairs."""
    conflict = b1.sum(axis=1) * b2.sum(axis=1) - np.sum(b1 * b2, axis=1)
    denom = 1.0 - conflict
    b = (b1 * b2 + b1 * u2[:, None] + b2 * u1[:, None]) / denom[:, None]
    u = u1 * u2 / denom
    return b, u, denom


def fuse(params: FusionParams, z_list):
    """Fuse per-modality representations into one N x K matrix.

    Returns (fused, cache). TRUSTED outputs expected class probabilities
    (row-stochastic); the other kinds stay in representation space.
    """
    zs = _check_z_list(z_list)
    m = len(zs)
    kind = params.kind
    if kind is FusionKind.WEIGHTED_AVERAGE:
        w = params.weights
        if w is None or w.shape != (m,):
            raise ValueError(f"weighted-average fusion needs {m} fixed weights")
        fused = sum(w[i] * zs[i] for i in range(m))
        return fused, {"kind": kind, "zs": zs}
    if kind is FusionKind.AUTO_WEIGHT:
        logits = params.logits
        if logits is None or logits.shape != (m,):
            raise ValueError(f"auto-weight fusion needs {m} logits")
        shifted = logits - logits.max()
        ew = np.exp(shifted)
        w = ew / ew.sum()
        fused = sum(w[i] * zs[i] for i in range(m))
        return fused, {"kind": kind, "zs": zs, "w": w}
    if kind is FusionKind.ATTENTION:
        q = params.query
        if q is None:
            raise ValueError("attention fusion needs a query vector")
        scores = np.stack([z @ q for z in zs], axis=1)          # N x M
        w = row_softmax(scores)                                  # N x M
        fused = sum(w[:, i:i + 1] * zs[i] for i in range(m))
        return fused, {"kind": kind, "zs": zs, "w": w, "q": q}
    if kind is FusionKind.TRUSTED:
        k = zs[0].shape[1]
        evid, beliefs, uncerts = [], [], []
        for z in zs:
            e, b, u = _dirichlet_belief(z, k)
            evid.append(e)
            beliefs.append(b)
            uncerts.append(u)
        # fold modalities pairwise, keeping intermediates for the backward pass
        combined = [(beliefs[0], uncerts[0])]
        denoms = []
        for i in range(1, m):
            b_acc, u_acc = combined[-1]
            b_new, u_new, denom = _combine(b_acc, u_acc, beliefs[i], uncerts[i])
            combined.append((b_new, u_new))
            denoms.append(denom)
        b_fin, u_fin = combined[-1]
        fused = b_fin + u_fin[:, None] / k
        cache = {"kind": kind, "zs": zs, "k": k, "evid": evid,
                 "beliefs": beliefs, "uncerts": uncerts,
                 "combined": combined, "denoms": denoms}
        return fused, cache
    raise ValueError(f"unhandled fusion kind {kind}")


def _combine_backward(gb, gu, b1, u1, b2, u2, b_out, u_out, denom):
    """Adjoint of _combine; returns grads for both input (belief, u) pairs."""
    d = denom[:, None]
    # through b_out = num / denom and u_out = u1*u2 / denom
    g_num = gb / d
    g_denom = -np.sum(gb * b_out, axis=1) / denom
    g_denom += -(gu * u_out) / denom
    db1 = g_num * (b2 + u2[:, None])
    db2 = g_num * (b1 + u1[:, None])
    du1 = np.sum(g_num * b2, axis=1) + gu * u2 / denom
    du2 = np.sum(g_num * b1, axis=1) + gu * u1 / denom
    # denom = 1 - conflict, conflict = (sum b1)(sum b2) - b1.b2
    g_conf = -g_denom
    db1 += g_conf[:, None] * (b2.sum(axis=1, keepdims=True) - b2)
    db2 += g_conf[:, None] * (b1.sum(axis=1, keepdims=True) - b1)
    return db1, du1, db2, du2


def _belief_backward(gb, gu, z, e, k):
    """Adjoint of _dirichlet_belief back to the raw representation z."""
    s = e.sum(axis=1, keepdims=True) + k
    # b = e/s, u = k/s[:,0]
    ge = gb / s
    gs = -np.sum(gb * e, axis=1, keepdims=True) / s ** 2
    gs += (-k * gu / (s[:, 0] ** 2))[:, None]
    ge += gs  # s depends on every evidence entry with unit weight
    return ge * _sigmoid(z)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def fuse_backward(params: FusionParams, cache, upstream):
    """Exact reverse-mode of fuse; returns (per-modality grads, FusionGrads)."""
    if not isinstance(cache, dict) or cache.get("kind") is not params.kind:
        raise ValueError("fuse_backward: cache does not match fusion parameters")
    g = as_matrix(upstream, "upstream")
    zs = cache["zs"]
    m = len(zs)
    kind = params.kind
    if kind is FusionKind.WEIGHTED_AVERAGE:
        return [params.weights[i] * g for i in range(m)], FusionGrads()
    if kind is FusionKind.AUTO_WEIGHT:
        w = cache["w"]
        dz = [w[i] * g for i in range(m)]
        contrib = np.array([float(np.sum(g * zs[i])) for i in range(m)])
        d_logits = w * (contrib - float(np.dot(w, contrib)))
        return dz, FusionGrads(d_logits=d_logits)
    if kind is FusionKind.ATTENTION:
        w, q = cache["w"], cache["q"]
        t = np.stack([np.sum(g * z, axis=1) for z in zs], axis=1)   # N x M
        ds = w * (t - np.sum(w * t, axis=1, keepdims=True))          # N x M
        dz = [w[:, i:i + 1] * g + ds[:, i:i + 1] * q[None, :] for i in range(m)]
        d_query = sum(zs[i].T @ ds[:, i] for i in range(m))
        return dz, FusionGrads(d_query=d_query)
    if kind is FusionKind.TRUSTED:
        k = cache["k"]
        beliefs, uncerts = cache["beliefs"], cache["uncerts"]
        combined, denoms = cache["combined"], cache["denoms"]
        gb = g.copy()
        gu = g.sum(axis=1) / k
        db_mod = [None] * m
        du_mod = [None] * m
        for i in range(m - 1, 0, -1):
            b_acc, u_acc = combined[i - 1]
            b_out, u_out = combined[i]
            gb, gu, db_i, du_i = _combine_backward(
                gb, gu, b_acc, u_acc, beliefs[i], uncerts[i], b_out, u_out,
                denoms[i - 1])
            db_mod[i], du_mod[i] = db_i, du_i
        db_mod[0], du_mod[0] = gb, gu
        dz = [
            _belief_backward(db_mod[i], du_mod[i], zs[i], cache["evid"][i], k)
            for i in range(m)
        ]
        return dz, FusionGrads()
    raise ValueError(f"unhandled fusion kind {kind}")
