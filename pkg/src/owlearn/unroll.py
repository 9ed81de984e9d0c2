"""Unrolled proximal-gradient layers and their correspondence to ISTA.

A layer computes ``prox(Z F - alpha * G Z W + X U, theta_t)``. With the
parameters produced by :func:`init_from_ista` this is exactly one ISTA step,
which the tests exploit as an oracle. F, W, U are shared across layers;
theta is per layer.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .fusion import FusionKind, FusionParams, fuse, init_fusion
from .graph import GraphOperator
from .numerics import as_matrix, frob, make_rng, spectral_norm
from .prox import IstaProblem, ProxKind, ista_lipschitz, prox_apply


@dataclass
class LayerParams:
    """Shared layer matrices plus per-layer thresholds for one modality."""

    f: np.ndarray                 # K x K
    w: np.ndarray                 # K x K
    u: np.ndarray                 # D x K
    theta: np.ndarray             # (T,) thresholds, one per layer
    alpha: float                  # damping factor in [0, 1)
    prox_kind: ProxKind

    def __post_init__(self):
        self.f = as_matrix(self.f, "f")
        self.w = as_matrix(self.w, "w")
        self.u = as_matrix(self.u, "u")
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        k = self.f.shape[0]
        if self.f.shape != (k, k) or self.w.shape != (k, k):
            raise ValueError(f"f and w must be square K x K, got {self.f.shape}, {self.w.shape}")
        if self.u.shape[1] != k:
            raise ValueError(f"u must be D x {k}, got {self.u.shape}")
        if np.any(self.theta < 0):
            raise ValueError("theta entries must be >= 0")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")

    @property
    def n_classes(self) -> int:
        return self.f.shape[0]

    @property
    def n_features(self) -> int:
        return self.u.shape[0]

    def copy(self) -> "LayerParams":
        return LayerParams(self.f.copy(), self.w.copy(), self.u.copy(),
                           self.theta.copy(), self.alpha, self.prox_kind)


@dataclass
class UnrolledModel:
    """T unrolled layers per modality plus a fusion head."""

    t_layers: int
    params: list[LayerParams]
    graphs: list[GraphOperator | None]
    fusion: FusionParams
    seed: int = 0

    def __post_init__(self):
        if self.t_layers < 1:
            raise ValueError("t_layers must be >= 1")
        if len(self.graphs) != len(self.params):
            raise ValueError("need one graph slot per modality")
        for p in self.params:
            if p.theta.shape[0] != self.t_layers:
                raise ValueError(
                    f"theta has {p.theta.shape[0]} entries for {self.t_layers} layers")

    @property
    def n_modalities(self) -> int:
        return len(self.params)

    def copy(self) -> "UnrolledModel":
        fusion = FusionParams(
            kind=self.fusion.kind,
            weights=None if self.fusion.weights is None else self.fusion.weights.copy(),
            logits=None if self.fusion.logits is None else self.fusion.logits.copy(),
            query=None if self.fusion.query is None else self.fusion.query.copy(),
        )
        return UnrolledModel(self.t_layers, [p.copy() for p in self.params],
                             list(self.graphs), fusion, self.seed)


@dataclass
class LayerTrace:
    z_in: np.ndarray
    preact: np.ndarray
    gz: np.ndarray | None      # G @ z_in, kept for the backward pass


@dataclass
class ForwardCache:
    x_list: list[np.ndarray]
    layers: list[list[LayerTrace]]      # [modality][layer]
    z_final: list[np.ndarray]
    fusion_cache: dict


def random_dictionary(k_atoms: int, n_features: int, rng: np.random.Generator) -> np.ndarray:
    """K x D dictionary with i.i.d. standard normal rows, row-normalized."""
    d = rng.standard_normal((k_atoms, n_features))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d


def init_from_ista(problem: IstaProblem, t_layers: int,
                   rng: np.random.Generator | None = None,
                   k_classes: int | None = None) -> UnrolledModel:
    """Map an ISTA problem onto layer parameters that replicate its iteration.

    F = I - D D^T / L, W = I / L, U = D^T / L and theta = beta / L for every
    layer. If the problem carries no dictionary one is drawn from ``rng``
    (standard normal rows, normalized), which requires ``k_classes``.
    """
    if t_layers < 1:
        raise ValueError("t_layers must be >= 1")
    if problem.d is None:
        if k_classes is None:
            raise ValueError("k_classes is required when the problem has no dictionary")
        if rng is None:
            raise ValueError("rng is required to draw a dictionary")
        d = random_dictionary(k_classes, problem.x.shape[1], rng)
        problem = dataclasses.replace(problem, d=d)
    d = problem.d
    k = d.shape[0]
    lip = ista_lipschitz(problem)
    params = LayerParams(
        f=np.eye(k) - (d @ d.T) / lip,
        w=np.eye(k) / lip,
        u=d.T / lip,
        theta=np.full(t_layers, problem.beta / lip),
        alpha=problem.alpha,
        prox_kind=problem.prox_kind,
    )
    fusion = init_fusion(FusionKind.WEIGHTED_AVERAGE, 1, k)
    return UnrolledModel(t_layers=t_layers, params=[params],
                         graphs=[problem.graph], fusion=fusion)


def _preactivation(params: LayerParams, z: np.ndarray, xu: np.ndarray,
                   graph: GraphOperator | None):
    """Linear part Z F - alpha * G Z W + X U; returns (preact, G @ Z).

    ``xu`` is the precomputed data term X @ U, shared by every layer of a
    forward pass.
    """
    a = z @ params.f
    a += xu
    gz = None
    if params.alpha > 0.0:
        if graph is None:
            raise ValueError("layer has alpha > 0 but no graph operator")
        gz = graph.matrix @ z
        a -= params.alpha * (gz @ params.w)
    return a, gz


def layer_forward(params: LayerParams, layer_index: int, z, x,
                  graph: GraphOperator | None = None) -> np.ndarray:
    """One unrolled layer: prox of the linear part at this layer's threshold."""
    z = as_matrix(z, "z")
    x = as_matrix(x, "x")
    if z.shape[1] != params.n_classes:
        raise ValueError(f"z has {z.shape[1]} columns, expected {params.n_classes}")
    if x.shape[1] != params.n_features:
        raise ValueError(f"x has {x.shape[1]} columns, expected {params.n_features}")
    if z.shape[0] != x.shape[0]:
        raise ValueError(f"z has {z.shape[0]} rows but x has {x.shape[0]}")
    a, _ = _preactivation(params, z, x @ params.u, graph)
    return prox_apply(a, float(params.theta[layer_index]), params.prox_kind)


def model_forward(model: UnrolledModel, x_per_modality):
    """Run all layers for every modality from Z = 0, then fuse.

    Returns (z_fused, z_per_modality, cache); the cache keeps every
    pre-activation and graph product for reverse mode.
    """
    if len(x_per_modality) != model.n_modalities:
        raise ValueError(
            f"model has {model.n_modalities} modalities but got "
            f"{len(x_per_modality)} inputs")
    xs = [as_matrix(x, f"x[{m}]") for m, x in enumerate(x_per_modality)]
    n = xs[0].shape[0]
    for m, x in enumerate(xs):
        if x.shape[0] != n:
            raise ValueError(f"modality {m} has {x.shape[0]} rows, expected {n}")
    traces: list[list[LayerTrace]] = []
    z_final: list[np.ndarray] = []
    for m in range(model.n_modalities):
        params = model.params[m]
        graph = model.graphs[m]
        z = np.zeros((n, params.n_classes))
        xu = xs[m] @ params.u
        layer_traces = []
        for t in range(model.t_layers):
            a, gz = _preactivation(params, z, xu, graph)
            layer_traces.append(LayerTrace(z_in=z, preact=a, gz=gz))
            z = prox_apply(a, float(params.theta[t]), params.prox_kind)
        traces.append(layer_traces)
        z_final.append(z)
    fused, fusion_cache = fuse(model.fusion, z_final)
    cache = ForwardCache(x_list=xs, layers=traces, z_final=z_final,
                         fusion_cache=fusion_cache)
    return fused, z_final, cache


def propagation_map(model: UnrolledModel, modality: int, x: np.ndarray):
    """The single-layer map phi(Z) iterated by the fixed-point analysis."""
    params = model.params[modality]
    graph = model.graphs[modality]
    theta0 = float(params.theta[0])
    xu = x @ params.u

    def phi(z):
        a, _ = _preactivation(params, z, xu, graph)
        return prox_apply(a, theta0, params.prox_kind)

    return phi


def linear_map_norm(params: LayerParams, graph: GraphOperator | None,
                    n_rows: int, iters: int = 300, tol: float = 1e-12) -> float:
    """Spectral norm of Z -> Z F - alpha * G Z W via matrix-free power iteration."""
    g = graph.matrix if (graph is not None and params.alpha > 0.0) else None

    def fwd(z):
        out = z @ params.f
        if g is not None:
            out = out - params.alpha * (g @ z @ params.w)
        return out

    def adj(z):
        out = z @ params.f.T
        if g is not None:
            out = out - params.alpha * (g @ z @ params.w.T)
        return out

    rng = make_rng(7)
    v = rng.standard_normal((n_rows, params.n_classes))
    v /= frob(v)
    sigma = 0.0
    for _ in range(iters):
        w = adj(fwd(v))
        norm = frob(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        sigma_next = frob(fwd(v))
        if abs(sigma_next - sigma) <= tol * max(1.0, sigma_next):
            return sigma_next
        sigma = sigma_next
    return sigma


def rescale_linear_part(model: UnrolledModel, modality: int, n_rows: int,
                        target: float) -> UnrolledModel:
    """Scale F and W so the layer's linear map has spectral norm ``target``."""
    out = model.copy()
    params = out.params[modality]
    current = linear_map_norm(params, out.graphs[modality], n_rows)
    if current == 0.0:
        raise ValueError("linear part is identically zero; cannot rescale")
    scale = target / current
    params.f *= scale
    params.w *= scale
    return out


@dataclass
class ContractionReport:
    max_ratio: float
    analytic_bound: float
    linear_norm: float
    passed: bool
    decay_rate: float
    fixed_point_iters: int
    fixed_point_gap: float
    initial_gap: float
    trials: int

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def verify_contraction(model: UnrolledModel, modality: int = 0, trials: int = 20,
                       rng: np.random.Generator | None = None,
                       x: np.ndarray | None = None, n_rows: int = 32,
                       fp_tol: float = 1e-10,
                       max_fp_iters: int = 100000) -> ContractionReport:
    """Empirical audit of the contraction property of the layer map.

    Measures the Lipschitz ratio ||phi(Z) - phi(Z')|| / ||Z - Z'|| over random
    pairs and compares it with the analytic bound ||F|| + alpha*||G||*||W||,
    then iterates phi to a fixed point and reports the worst per-step decay
    ratio and the iteration count to reach ``fp_tol``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if rng is None:
        rng = make_rng(0)
    params = model.params[modality]
    graph = model.graphs[modality]
    if graph is not None:
        n_rows = graph.matrix.shape[0]
    if x is None:
        x = rng.standard_normal((n_rows, params.n_features))
    else:
        x = as_matrix(x, "x")
        n_rows = x.shape[0]
        if graph is not None and graph.matrix.shape[0] != n_rows:
            raise ValueError("x row count does not match the graph")
    phi = propagation_map(model, modality, x)

    g_norm = graph.spectral_norm if graph is not None else 0.0
    bound = spectral_norm(params.f) + params.alpha * g_norm * spectral_norm(params.w)
    lin_norm = linear_map_norm(params, graph, n_rows)

    max_ratio = 0.0
    for _ in range(trials):
        z1 = rng.standard_normal((n_rows, params.n_classes))
        z2 = rng.standard_normal((n_rows, params.n_classes))
        denom = frob(z1 - z2)
        if denom == 0.0:
            continue
        ratio = frob(phi(z1) - phi(z2)) / denom
        max_ratio = max(max_ratio, ratio)

    z = np.zeros((n_rows, params.n_classes))
    z_next = phi(z)
    gap = frob(z_next - z)
    initial_gap = gap
    decay_rate = 0.0
    iters = 1
    while gap >= fp_tol and iters < max_fp_iters:
        z, z_next = z_next, phi(z_next)
        gap_next = frob(z_next - z)
        if gap > 0:
            decay_rate = max(decay_rate, gap_next / gap)
        gap = gap_next
        iters += 1

    return ContractionReport(
        max_ratio=max_ratio,
        analytic_bound=bound,
        linear_norm=lin_norm,
        passed=max_ratio <= bound + 1e-9,
        decay_rate=decay_rate,
        fixed_point_iters=iters,
        fixed_point_gap=gap,
        initial_gap=initial_gap,
        trials=trials,
    )
