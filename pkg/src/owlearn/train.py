"""Reverse-mode differentiation over the unrolled graph and the training protocols.

``backward`` produces exact gradients for every learnable parameter (shared
layer matrices, per-layer thresholds, fusion parameters); ``grad_check``
certifies them against central finite differences, excluding coordinates
whose perturbation crosses a prox kink. ``run_protocol1`` and
``run_protocol2`` are the end-to-end single- and multi-modal trainers.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .data import OpenWorldDataset
from .fusion import FusionGrads, FusionKind, fuse_backward, init_fusion
from .graph import hypergraph_laplacian, knn_graph
from .numerics import make_rng, row_softmax
from .openworld import (LOG_CLAMP, AccuracyReport, AgentThreshold, LossReport,
                        known_loss, open_world_accuracy, predict,
                        rank_and_discard, select_agent, total_loss)
from .prox import IstaProblem, ProxKind
from .unroll import ForwardCache, UnrolledModel, init_from_ista, model_forward


# ---------------------------------------------------------------------------
# Reverse mode

@dataclass
class ModalityGrads:
    d_f: np.ndarray
    d_w: np.ndarray
    d_u: np.ndarray
    d_theta: np.ndarray


@dataclass
class GradSet:
    modalities: list[ModalityGrads]
    fusion: FusionGrads

    def check_finite(self):
        for g in self.modalities:
            for arr in (g.d_f, g.d_w, g.d_u, g.d_theta):
                if not np.all(np.isfinite(arr)):
                    raise ValueError("gradient contains NaN or Inf")
        return self


def _prox_backward(preact, theta, kind: ProxKind, grad_out):
    """Subgradients of prox(a, theta) w.r.t. a and theta.

    Zero at exact kinks (measure-zero in float space); the soft threshold
    passes gradient on the active set with d/dtheta = -sign(a), the row-group
    threshold is differentiated through the radial shrinkage formula.
    """
    if kind is ProxKind.IDENTITY:
        return grad_out.copy(), 0.0
    if kind is ProxKind.SOFT_THRESHOLD:
        active = np.abs(preact) > theta
        grad_pre = np.where(active, grad_out, 0.0)
        d_theta = float(np.sum(-np.sign(preact[active]) * grad_out[active]))
        return grad_pre, d_theta
    if kind is ProxKind.ROW_GROUP_THRESHOLD:
        r = np.linalg.norm(preact, axis=1)
        active = r > theta
        inv_r = np.where(active, 1.0 / np.where(r > 0, r, 1.0), 0.0)
        dot = np.sum(preact * grad_out, axis=1)
        coef = np.where(active, 1.0 - theta * inv_r, 0.0)
        grad_pre = coef[:, None] * grad_out \
            + (theta * dot * inv_r ** 3)[:, None] * preact
        grad_pre[~active] = 0.0
        d_theta = float(np.sum(-(dot * inv_r)[active]))
        return grad_pre, d_theta
    raise ValueError(f"unhandled prox kind {kind}")


def backward(model: UnrolledModel, cache: ForwardCache, upstream) -> GradSet:
    """Exact gradients of a scalar loss given d(loss)/d(fused Z)."""
    if cache is None or len(cache.layers) != model.n_modalities:
        raise ValueError("backward: cache does not match the model")
    dz_list, fusion_grads = fuse_backward(model.fusion, cache.fusion_cache,
                                          upstream)
    per_modality = []
    for m in range(model.n_modalities):
        params = model.params[m]
        graph = model.graphs[m]
        x = cache.x_list[m]
        g = dz_list[m]
        d_f = np.zeros_like(params.f)
        d_w = np.zeros_like(params.w)
        d_theta = np.zeros_like(params.theta)
        da_total = np.zeros_like(g)   # U enters every layer through the same X
        for t in range(model.t_layers - 1, -1, -1):
            tr = cache.layers[m][t]
            da, dth = _prox_backward(tr.preact, float(params.theta[t]),
                                     params.prox_kind, g)
            d_theta[t] += dth
            da_total += da
            d_f += tr.z_in.T @ da
            if params.alpha > 0.0 and graph is not None:
                d_w += -params.alpha * (tr.gz.T @ da)
                g = da @ params.f.T - params.alpha * ((graph.matrix @ da) @ params.w.T)
            else:
                g = da @ params.f.T
        per_modality.append(ModalityGrads(d_f=d_f, d_w=d_w, d_u=x.T @ da_total,
                                          d_theta=d_theta))
    return GradSet(modalities=per_modality, fusion=fusion_grads).check_finite()


def softmax_backward(z_hat, d_zhat):
    """Chain d(loss)/d(probabilities) through the row softmax."""
    inner = np.sum(d_zhat * z_hat, axis=1, keepdims=True)
    return z_hat * (d_zhat - inner)


# ---------------------------------------------------------------------------
# Loss assembly

@dataclass
class LossConfig:
    """Everything the per-epoch loss needs besides the model output."""

    labels: np.ndarray
    labeled_mask: np.ndarray
    pool_mask: np.ndarray          # unlabeled samples ranked for the unknown loss
    lam1: float = 1.0
    lam2: float = 1.0
    discard_frac: float = 0.1


def probabilities(model: UnrolledModel, z_fused):
    """Fused output to row-stochastic scores.

    Trusted fusion already emits probabilities; a second softmax would
    destroy its evidential semantics, so it passes through unchanged.
    """
    if model.fusion.kind is FusionKind.TRUSTED:
        return z_fused
    return row_softmax(z_fused)


def loss_forward(z_hat, cfg: LossConfig, selected_mask=None, pseudo=None):
    """Loss value plus the frozen selection/pseudo-labels actually used."""
    if selected_mask is None:
        selected_mask = rank_and_discard(z_hat, cfg.pool_mask, cfg.discard_frac)
    if pseudo is None:
        pseudo = np.argmax(z_hat, axis=1)
    l_k = known_loss(z_hat, cfg.labels, cfg.labeled_mask)
    sel_idx = np.flatnonzero(selected_mask)
    if sel_idx.size:
        l_u = float(np.mean(np.log(np.maximum(
            z_hat[sel_idx, pseudo[sel_idx]], LOG_CLAMP))))
    else:
        l_u = 0.0
    n_u = int(np.sum(cfg.pool_mask))
    dropped = n_u - sel_idx.size
    report = LossReport(
        l_k=l_k, l_u=l_u, l_total=total_loss(l_k, l_u, cfg.lam1, cfg.lam2),
        n_labeled=int(np.sum(cfg.labeled_mask)), n_unlabeled_used=sel_idx.size,
        discarded_low=dropped // 2, discarded_high=dropped // 2,
        empty_selection=(sel_idx.size == 0 and cfg.lam2 > 0))
    return report, selected_mask, pseudo


def loss_grad_zhat(z_hat, cfg: LossConfig, selected_mask, pseudo):
    """d(total loss)/d(z_hat) with selection and pseudo-labels held fixed."""
    d = np.zeros_like(z_hat)
    lab_idx = np.flatnonzero(np.asarray(cfg.labeled_mask, dtype=bool))
    y = np.asarray(cfg.labels, dtype=np.int64)[lab_idx]
    p = z_hat[lab_idx, y]
    live = p > LOG_CLAMP
    d[lab_idx[live], y[live]] -= cfg.lam1 / (lab_idx.size * p[live])
    sel_idx = np.flatnonzero(selected_mask)
    if sel_idx.size:
        ps = z_hat[sel_idx, pseudo[sel_idx]]
        live = ps > LOG_CLAMP
        d[sel_idx[live], pseudo[sel_idx][live]] += cfg.lam2 / (sel_idx.size * ps[live])
    return d


# ---------------------------------------------------------------------------
# Optimizers

class AdamOptimizer:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


class SgdOptimizer:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr
        self.t = 0

    def step(self, grads):
        self.t += 1
        for p, g in zip(self.params, grads):
            p -= self.lr * g


def make_optimizer(name: str, params, lr):
    if name == "adam":
        return AdamOptimizer(params, lr)
    if name == "sgd":
        return SgdOptimizer(params, lr)
    raise ValueError(f"unknown optimizer {name!r}; expected 'adam' or 'sgd'")


def collect_params(model: UnrolledModel):
    """Learnable arrays in a fixed order: (f, w, u, theta) per modality, fusion last."""
    out = []
    for p in model.params:
        out.extend([p.f, p.w, p.u, p.theta])
    out.extend(model.fusion.learnable())
    return out


def collect_grads(grads: GradSet):
    out = []
    for g in grads.modalities:
        out.extend([g.d_f, g.d_w, g.d_u, g.d_theta])
    out.extend(grads.fusion.learnable())
    return out


# ---------------------------------------------------------------------------
# Configuration

@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 0.001
    lam1: float = 1.0
    lam2: float = 1.0
    seed: int = 0
    optimizer: str = "adam"
    discard_frac: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


@dataclass
class ModelSpec:
    t_layers: int = 3
    prox: str = "soft-threshold"
    alpha: float = 0.5
    beta: float = 0.1
    graph: str = "knn"             # none | knn | hypergraph
    knn_k: int = 10
    fusion: str = "weighted-average"
    fusion_weights: list | None = None

    def prox_kind(self) -> ProxKind:
        return ProxKind.from_name(self.prox)

    def fusion_kind(self) -> FusionKind:
        return FusionKind.from_name(self.fusion)


@dataclass
class TraceRow:
    epoch: int
    l_k: float
    l_u: float
    l_total: float
    acc_val: float


@dataclass
class TrainResult:
    model: UnrolledModel
    agent: AgentThreshold
    trace: list[TraceRow]
    metrics: AccuracyReport
    final_loss: LossReport


def build_graphs(dataset: OpenWorldDataset, spec: ModelSpec):
    """Per-modality graph operators, honoring any graphs the dataset carries."""
    if spec.graph == "none" or spec.alpha == 0.0:
        return [None] * dataset.n_modalities
    if dataset.graphs is not None:
        return list(dataset.graphs)
    out = []
    for x in dataset.modalities:
        if spec.graph == "knn":
            out.append(knn_graph(x, spec.knn_k))
        elif spec.graph == "hypergraph":
            out.append(hypergraph_laplacian(x, spec.knn_k))
        else:
            raise ValueError(f"unknown graph mode {spec.graph!r}")
    return out


def build_model(dataset: OpenWorldDataset, cfg: TrainConfig,
                spec: ModelSpec) -> UnrolledModel:
    """ISTA-initialized model for the dataset; one parameter set per modality.

    Each modality draws its dictionary from a fresh generator seeded with
    cfg.seed, so identical modalities start identical (this is what makes
    the multi-modal protocol collapse exactly onto the single-modal one).
    """
    k = dataset.n_known
    graphs = build_graphs(dataset, spec)
    params = []
    for m, x in enumerate(dataset.modalities):
        alpha = spec.alpha if graphs[m] is not None else 0.0
        problem = IstaProblem(x=x, d=None, alpha=alpha, beta=spec.beta,
                              graph=graphs[m], prox_kind=spec.prox_kind())
        sub = init_from_ista(problem, spec.t_layers, make_rng(cfg.seed),
                             k_classes=k)
        params.append(sub.params[0])
    fusion = init_fusion(spec.fusion_kind(), dataset.n_modalities, k,
                         weights=spec.fusion_weights)
    return UnrolledModel(t_layers=spec.t_layers, params=params, graphs=graphs,
                         fusion=fusion, seed=cfg.seed)


def _agent_pool(dataset: OpenWorldDataset) -> np.ndarray:
    # agent statistics come from the mixed validation + unlabeled pool;
    # labels of these rows are never read during selection
    return dataset.masks.validation | dataset.masks.unlabeled


def _run(dataset: OpenWorldDataset, cfg: TrainConfig,
         spec: ModelSpec) -> TrainResult:
    if dataset.masks is None:
        raise ValueError("dataset has no partition masks; split it first")
    if not np.any(dataset.masks.labeled_train):
        raise ValueError("degenerate split: labeled training set is empty")
    model = build_model(dataset, cfg, spec)
    n_mod = model.n_modalities
    loss_cfg = LossConfig(labels=dataset.labels,
                          labeled_mask=dataset.masks.labeled_train,
                          pool_mask=dataset.masks.unlabeled,
                          lam1=cfg.lam1, lam2=cfg.lam2,
                          discard_frac=cfg.discard_frac)
    opt = make_optimizer(cfg.optimizer, collect_params(model), cfg.lr)
    val_idx = np.flatnonzero(dataset.masks.validation)
    trace: list[TraceRow] = []
    report = None
    for epoch in range(1, cfg.epochs + 1):
        z_fused, _, cache = model_forward(model, dataset.modalities)
        z_hat = probabilities(model, z_fused)
        report, selected, pseudo = loss_forward(z_hat, loss_cfg)
        d_zhat = loss_grad_zhat(z_hat, loss_cfg, selected, pseudo)
        upstream = d_zhat if model.fusion.kind is FusionKind.TRUSTED \
            else softmax_backward(z_hat, d_zhat)
        grads = backward(model, cache, upstream)
        if n_mod > 1:
            # The fusion average scales each modality's gradient by its
            # weight; train per-modality blocks at the modality count so the
            # effective rate matches the single-modal protocol exactly.
            for g in grads.modalities:
                g.d_f *= n_mod
                g.d_w *= n_mod
                g.d_u *= n_mod
                g.d_theta *= n_mod
        opt.step(collect_grads(grads))
        for p in model.params:
            np.maximum(p.theta, 0.0, out=p.theta)   # thresholds stay >= 0
        if val_idx.size:
            acc_val = float(np.mean(
                np.argmax(z_hat[val_idx], axis=1) == dataset.labels[val_idx]))
        else:
            acc_val = float("nan")
        trace.append(TraceRow(epoch=epoch, l_k=report.l_k, l_u=report.l_u,
                              l_total=report.l_total, acc_val=acc_val))
    z_fused, _, _ = model_forward(model, dataset.modalities)
    z_hat = probabilities(model, z_fused)
    agent = select_agent(z_hat[_agent_pool(dataset)])
    pred = predict(z_hat, agent)
    test = dataset.masks.test
    metrics = open_world_accuracy(pred[test], dataset.labels[test],
                                  dataset.known_classes)
    return TrainResult(model=model, agent=agent, trace=trace, metrics=metrics,
                       final_loss=report)


def run_protocol1(dataset: OpenWorldDataset, cfg: TrainConfig,
                  spec: ModelSpec) -> TrainResult:
    """Single-modal trustworthy open-world training."""
    if dataset.n_modalities != 1:
        raise ValueError(
            f"protocol 1 is single-modal; dataset has {dataset.n_modalities} modalities")
    return _run(dataset, cfg, spec)


def run_protocol2(dataset: OpenWorldDataset, cfg: TrainConfig,
                  spec: ModelSpec) -> TrainResult:
    """Multi-modal protocol: per-modality layers, generalized fusion, shared loss."""
    if dataset.n_modalities < 2:
        raise ValueError(
            f"protocol 2 needs >= 2 modalities, got {dataset.n_modalities}")
    n = dataset.modalities[0].shape[0]
    for m, x in enumerate(dataset.modalities):
        if x.shape[0] != n:
            raise ValueError(
                f"modality {m} has {x.shape[0]} samples, expected {n}")
    return _run(dataset, cfg, spec)


def evaluate(model: UnrolledModel, dataset: OpenWorldDataset):
    """Forward a trained model and recompute agent, predictions and metrics."""
    z_fused, _, _ = model_forward(model, dataset.modalities)
    z_hat = probabilities(model, z_fused)
    agent = select_agent(z_hat[_agent_pool(dataset)])
    pred = predict(z_hat, agent)
    test = dataset.masks.test
    metrics = open_world_accuracy(pred[test], dataset.labels[test],
                                  dataset.known_classes)
    return agent, metrics, pred


# ---------------------------------------------------------------------------
# Gradient checking

@dataclass
class GradCheckReport:
    max_rel_err: float
    per_tensor: dict
    kink_adjacent: list
    n_checked: int
    passed: bool
    eps: float
    tol: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _forward_fingerprint(model: UnrolledModel, x_list):
    """Active-set signature of every prox in the forward pass.

    Two evaluations whose fingerprints differ straddle a kink, so their
    finite difference is not trustworthy.
    """
    z_fused, _, cache = model_forward(model, x_list)
    parts = []
    for m in range(model.n_modalities):
        params = model.params[m]
        for t in range(model.t_layers):
            a = cache.layers[m][t].preact
            th = float(params.theta[t])
            if params.prox_kind is ProxKind.SOFT_THRESHOLD:
                parts.append(np.packbits(np.abs(a) > th).tobytes())
            elif params.prox_kind is ProxKind.ROW_GROUP_THRESHOLD:
                parts.append(np.packbits(np.linalg.norm(a, axis=1) > th).tobytes())
    return z_fused, cache, b"".join(parts)


def grad_check(model: UnrolledModel, x_list, loss_cfg: LossConfig,
               eps: float = 1e-6, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Selection and pseudo-labels are frozen at the base point, matching what
    the analytic gradient differentiates. Coordinates whose +/- eps
    evaluations cross a prox kink are reported and excluded.
    """
    n = x_list[0].shape[0]
    if n > 64:
        raise ValueError(f"grad_check is meant for small problems (N <= 64), got N={n}")
    model = model.copy()
    z_fused, cache, _ = _forward_fingerprint(model, x_list)
    z_hat = probabilities(model, z_fused)
    _, selected, pseudo = loss_forward(z_hat, loss_cfg)

    def loss_at(current_model):
        zf, _, fp = _forward_fingerprint(current_model, x_list)
        zh = probabilities(current_model, zf)
        rep, _, _ = loss_forward(zh, loss_cfg, selected_mask=selected,
                                 pseudo=pseudo)
        return rep.l_total, fp

    d_zhat = loss_grad_zhat(z_hat, loss_cfg, selected, pseudo)
    upstream = d_zhat if model.fusion.kind is FusionKind.TRUSTED \
        else softmax_backward(z_hat, d_zhat)
    grads = backward(model, cache, upstream)

    names, tensors, grad_tensors = [], [], []
    for m in range(model.n_modalities):
        p, g = model.params[m], grads.modalities[m]
        names += [f"mod{m}.f", f"mod{m}.w", f"mod{m}.u", f"mod{m}.theta"]
        tensors += [p.f, p.w, p.u, p.theta]
        grad_tensors += [g.d_f, g.d_w, g.d_u, g.d_theta]
    for pt, gt in zip(model.fusion.learnable(), grads.fusion.learnable()):
        names.append("fusion")
        tensors.append(pt)
        grad_tensors.append(gt)

    per_tensor = {}
    kinks = []
    n_checked = 0
    max_err = 0.0
    for name, tensor, analytic in zip(names, tensors, grad_tensors):
        worst = 0.0
        flat = tensor.reshape(-1)
        g_flat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lo_plus, fp_plus = loss_at(model)
            flat[i] = orig - eps
            lo_minus, fp_minus = loss_at(model)
            flat[i] = orig
            if fp_plus != fp_minus:
                kinks.append((name, i))
                continue
            fd = (lo_plus - lo_minus) / (2.0 * eps)
            an = g_flat[i]
            denom = max(abs(fd), abs(an))
            if denom < 1e-7:
                err = 0.0 if abs(fd - an) < 1e-9 else abs(fd - an)
            else:
                err = abs(fd - an) / denom
            worst = max(worst, float(err))
            n_checked += 1
        per_tensor[name] = max(worst, per_tensor.get(name, 0.0))
        max_err = max(max_err, worst)
    return GradCheckReport(max_rel_err=max_err, per_tensor=per_tensor,
                           kink_adjacent=kinks, n_checked=n_checked,
                           passed=bool(max_err < tol), eps=eps, tol=tol)


def make_grad_check_problem(prox: str, use_graph: bool, fusion: str,
                            seed: int = 0, n: int = 16, d_feat: int = 6,
                            k: int = 3, t_layers: int = 2, n_modalities: int = 2):
    """Small seeded setup exercising one configuration of the gradient check."""
    rng = make_rng(seed)
    x_list = [rng.standard_normal((n, d_feat)) for _ in range(n_modalities)]
    graphs = [knn_graph(x, 3) if use_graph else None for x in x_list]
    alpha = 0.5 if use_graph else 0.0
    params = []
    for m, x in enumerate(x_list):
        problem = IstaProblem(x=x, d=None, alpha=alpha, beta=0.2,
                              graph=graphs[m], prox_kind=ProxKind.from_name(prox))
        sub = init_from_ista(problem, t_layers, make_rng(seed + m), k_classes=k)
        params.append(sub.params[0])
    fusion_params = init_fusion(FusionKind.from_name(fusion), n_modalities, k)
    if fusion_params.logits is not None:
        fusion_params.logits += rng.standard_normal(n_modalities) * 0.1
    if fusion_params.query is not None:
        fusion_params.query += rng.standard_normal(k) * 0.1
    model = UnrolledModel(t_layers=t_layers, params=params, graphs=graphs,
                          fusion=fusion_params, seed=seed)
    labels = rng.integers(0, k, size=n)
    labeled = np.zeros(n, dtype=bool)
    labeled[: n // 3] = True
    pool = np.zeros(n, dtype=bool)
    pool[n // 3:] = True
    loss_cfg = LossConfig(labels=labels, labeled_mask=labeled, pool_mask=pool)
    return model, x_list, loss_cfg
