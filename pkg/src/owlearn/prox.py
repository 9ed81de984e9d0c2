"""Proximal operators, the Moreau envelope, and the reference ISTA iteration.

The unrolled layers must reproduce these iterations exactly, so everything
here is written once and reused as the ground truth in tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .graph import GraphOperator
from .numerics import as_matrix, frob, spectral_norm


class ProxKind(Enum):
    """Shrinkage family applied after the linear part of a layer."""

    SOFT_THRESHOLD = "soft-threshold"      # elementwise l1 shrinkage
    ROW_GROUP_THRESHOLD = "row-group"      # l2,1 shrinkage on rows
    IDENTITY = "identity"                  # theta -> 0 limit of both

    @classmethod
    def from_name(cls, name: str) -> "ProxKind":
        for kind in cls:
            if kind.value == name:
                return kind
        names = ", ".join(k.value for k in cls)
        raise ValueError(f"unknown prox kind {name!r}; expected one of: {names}")


def soft_threshold(z, theta: float) -> np.ndarray:
    """Elementwise sign(z) * max(|z| - theta, 0)."""
    if theta < 0:
        raise ValueError(f"soft_threshold: theta must be >= 0, got {theta}")
    z = np.asarray(z, dtype=np.float64)
    return np.sign(z) * np.maximum(np.abs(z) - theta, 0.0)


def row_group_threshold(z, theta: float) -> np.ndarray:
    """Scale each row by (||row|| - theta)/||row|| when ||row|| > theta, else zero it."""
    if theta < 0:
        raise ValueError(f"row_group_threshold: theta must be >= 0, got {theta}")
    z = as_matrix(z, "z")
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    scale = np.zeros_like(norms)
    np.divide(np.maximum(norms - theta, 0.0), norms, out=scale, where=norms > 0)
    return z * scale


def prox_apply(z, theta: float, kind: ProxKind) -> np.ndarray:
    if kind is ProxKind.SOFT_THRESHOLD:
        return soft_threshold(z, theta)
    if kind is ProxKind.ROW_GROUP_THRESHOLD:
        return row_group_threshold(z, theta)
    if kind is ProxKind.IDENTITY:
        return np.asarray(z, dtype=np.float64).copy()
    raise ValueError(f"unhandled prox kind {kind}")


def penalty_value(z, kind: ProxKind) -> float:
    """The regularizer g(z) the prox kind shrinks against (unweighted)."""
    z = np.asarray(z, dtype=np.float64)
    if kind is ProxKind.SOFT_THRESHOLD:
        return float(np.abs(z).sum())
    if kind is ProxKind.ROW_GROUP_THRESHOLD:
        return float(np.linalg.norm(np.atleast_2d(z), axis=1).sum())
    if kind is ProxKind.IDENTITY:
        return 0.0
    raise ValueError(f"unhandled prox kind {kind}")


def prox_oracle(x_point, theta: float, kind: ProxKind,
                grid_radius: float = 2.0, grid_step: float = 1e-4) -> np.ndarray:
    """Brute-force argmin of 0.5*||z - x||^2 + theta*g(z) by grid search.

    Test-only certificate for the closed forms above. The l1 problem is
    separable, so each entry gets its own 1-D grid; the l2,1 problem is
    searched radially along each row direction.
    """
    if grid_step <= 0:
        raise ValueError("prox_oracle: grid_step must be > 0")
    x = as_matrix(x_point, "x_point")
    if theta == 0 or kind is ProxKind.IDENTITY:
        return x.copy()
    offsets = np.arange(-grid_radius, grid_radius + grid_step, grid_step)
    if kind is ProxKind.SOFT_THRESHOLD:
        flat = x.reshape(-1, 1)
        cand = flat + offsets[None, :]
        obj = 0.5 * (cand - flat) ** 2 + theta * np.abs(cand)
        best = cand[np.arange(cand.shape[0]), obj.argmin(axis=1)]
        return best.reshape(x.shape)
    if kind is ProxKind.ROW_GROUP_THRESHOLD:
        out = np.zeros_like(x)
        for i in range(x.shape[0]):
            r0 = float(np.linalg.norm(x[i]))
            if r0 == 0.0:
                continue
            ts = np.maximum(r0 + offsets, 0.0)
            obj = 0.5 * (ts - r0) ** 2 + theta * ts
            t_best = ts[obj.argmin()]
            out[i] = (t_best / r0) * x[i]
        return out
    raise ValueError(f"unhandled prox kind {kind}")


def moreau_envelope(x_point, mu: float, theta: float, kind: ProxKind) -> float:
    """Smoothed value (1/2mu)*||p - x||^2 + theta*g(p) at p = prox_{mu*theta*g}(x)."""
    if mu <= 0:
        raise ValueError(f"moreau_envelope: mu must be > 0, got {mu}")
    x = as_matrix(x_point, "x_point")
    p = prox_apply(x, mu * theta, kind)
    return float(np.sum((p - x) ** 2) / (2.0 * mu) + theta * penalty_value(p, kind))


@dataclass
class IstaProblem:
    """Sparse-coding problem 0.5*||x - z d||^2 + (alpha/2)*tr(z^T G z) + beta*g(z).

    ``x`` is N x D data, ``d`` a K x D dictionary (rows are atoms), ``graph``
    an optional normalized propagation operator, and ``prox_kind`` selects g.
    ``d`` may be left None and filled in later by the unrolling initializer.
    """

    x: np.ndarray
    d: np.ndarray | None
    alpha: float = 0.0
    beta: float = 0.0
    graph: GraphOperator | None = None
    prox_kind: ProxKind = ProxKind.SOFT_THRESHOLD

    def __post_init__(self):
        self.x = as_matrix(self.x, "x")
        if self.d is not None:
            self.d = as_matrix(self.d, "d")
            if self.d.shape[1] != self.x.shape[1]:
                raise ValueError(
                    f"dictionary is {self.d.shape[0]}x{self.d.shape[1]} but data has "
                    f"{self.x.shape[1]} features"
                )
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.graph is not None and self.graph.matrix.shape[0] != self.x.shape[0]:
            raise ValueError(
                f"graph is over {self.graph.matrix.shape[0]} nodes but data has "
                f"{self.x.shape[0]} rows"
            )

    @property
    def n_samples(self) -> int:
        return self.x.shape[0]

    @property
    def k_atoms(self) -> int:
        if self.d is None:
            raise ValueError("dictionary not set")
        return self.d.shape[0]


def ista_lipschitz(p: IstaProblem) -> float:
    """Gradient Lipschitz constant sigma_max(D D^T) + alpha * sigma_max(G)."""
    if p.d is None or not np.any(p.d):
        raise ValueError("ista_lipschitz: dictionary is missing or zero")
    lip = spectral_norm(p.d) ** 2
    if p.graph is not None and p.alpha > 0:
        lip += p.alpha * p.graph.spectral_norm
    return float(lip)


def ista_objective(p: IstaProblem, z) -> float:
    z = as_matrix(z, "z")
    resid = p.x - z @ p.d
    val = 0.5 * float(np.sum(resid ** 2))
    if p.graph is not None and p.alpha > 0:
        gz = p.graph.matrix @ z
        val += 0.5 * p.alpha * float(np.sum(z * gz))
    val += p.beta * penalty_value(z, p.prox_kind)
    return val


def ista_step(p: IstaProblem, z, lipschitz: float | None = None) -> np.ndarray:
    """One proximal-gradient step with fixed step 1/L and threshold beta/L."""
    z = as_matrix(z, "z")
    if p.d is None:
        raise ValueError("ista_step: dictionary not set")
    if z.shape != (p.x.shape[0], p.d.shape[0]):
        raise ValueError(
            f"ista_step: z is {z.shape[0]}x{z.shape[1]}, expected "
            f"{p.x.shape[0]}x{p.d.shape[0]}"
        )
    lip = ista_lipschitz(p) if lipschitz is None else lipschitz
    grad = z @ (p.d @ p.d.T) - p.x @ p.d.T
    if p.graph is not None and p.alpha > 0:
        grad += p.alpha * (p.graph.matrix @ z)
    return prox_apply(z - grad / lip, p.beta / lip, p.prox_kind)


def ista_solve(p: IstaProblem, max_iters: int, tol: float = 1e-10):
    """Iterate ista_step until the relative update is below tol.

    Returns the final iterate and the objective trace (initial value first,
    then one entry per step). Non-convergence is visible in the trace, not
    an error.
    """
    if max_iters < 1:
        raise ValueError("ista_solve: max_iters must be >= 1")
    lip = ista_lipschitz(p)
    z = np.zeros((p.n_samples, p.k_atoms))
    trace = [ista_objective(p, z)]
    for _ in range(max_iters):
        z_next = ista_step(p, z, lipschitz=lip)
        trace.append(ista_objective(p, z_next))
        if frob(z_next - z) < tol * max(1.0, frob(z)):
            z = z_next
            break
        z = z_next
    return z, trace
