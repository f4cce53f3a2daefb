"""Regularized harmonic solutions on collapsed graphs, plus closed-form bounds.

Every solve works on a :class:`~quantssl.graph.QuantizedGraph`, i.e. with
multiplicities ``V``: the regularizer becomes ``gamma_g * V`` and, in the
soft formulation, the per-vertex cost is scaled by ``V`` too. With ``V = I``
these reduce to the plain regularized harmonic solution.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.sparse.csgraph import connected_components

from .graph import QuantizedGraph

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-8
UNLABELED = -1


class SolverError(RuntimeError):
    pass


class NoLabelsError(SolverError):
    pass


class SingularSystemError(SolverError):
    """Unlabeled vertices with no path to any label and no sink (``gamma_g = 0``)."""

    def __init__(self, component: list[int]):
        super().__init__(
            f"unlabeled component {component} is not connected to any labeled vertex; "
            "use gamma_g > 0 or connect it"
        )
        self.component = component


@dataclass(frozen=True)
class LabelAssignment:
    """Per-vertex class index (``-1`` for unlabeled) and the class count."""

    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if labels.size and (labels.min() < UNLABELED or labels.max() >= self.n_classes):
            raise ValueError("label index out of range")

    @property
    def labeled(self) -> np.ndarray:
        return self.labels != UNLABELED

    @property
    def targets(self) -> np.ndarray:
        """One-vs-rest pseudo-targets: +1 on the own class, -1 elsewhere, 0 rows if unlabeled."""
        y = np.zeros((self.labels.size, self.n_classes))
        rows = np.flatnonzero(self.labeled)
        y[rows] = -1.0
        y[rows, self.labels[rows]] = 1.0
        return y

    @classmethod
    def from_centroids(cls, centroids, n_classes: int) -> "LabelAssignment":
        """Majority class per centroid; ties go to the most recent label."""
        labels = []
        for c in centroids.centroids:
            if not c.label_tally:
                labels.append(UNLABELED)
                continue
            top = max(c.label_tally.values())
            best = [k for k, v in c.label_tally.items() if v == top]
            if len(best) > 1 and c.last_label is not None and c.last_label[1] in best:
                labels.append(c.last_label[1])
            else:
                labels.append(min(best))
        return cls(np.array(labels, dtype=np.int64), n_classes)


@dataclass(frozen=True)
class SoftConfig:
    c_l: float = 1.0
    c_u: float = 0.01
    gamma_g: float = 0.0

    def __post_init__(self):
        for name in ("c_l", "c_u", "gamma_g"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not (self.c_l >= self.c_u > 0):
            raise ValueError(f"need c_l >= c_u > 0, got c_l={self.c_l}, c_u={self.c_u}")
        if self.gamma_g < 0:
            raise ValueError("gamma_g must be >= 0")


@dataclass(frozen=True)
class SolveResult:
    scores: np.ndarray
    mode: str
    gamma_g: float
    labeled_index_set: list[int]
    residual: float = 0.0
    used_fallback: bool = False
    floating: list[int] = field(default_factory=list)
    lemma1_ok: bool = True

    def __len__(self) -> int:
        return self.scores.shape[0]


def _solve_spd(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float, bool]:
    """Cholesky solve with a least-squares fallback; returns (x, scaled residual, fell_back)."""
    fallback = False
    try:
        x = scipy.linalg.cho_solve(scipy.linalg.cho_factor(a, lower=True, check_finite=False), b)
    except np.linalg.LinAlgError:
        fallback = True
        x = np.linalg.lstsq(a, b, rcond=None)[0]
    # residual relative to the row scale of the system, so big multiplicities don't inflate it
    scale = max(1.0, float(np.abs(a).sum(axis=1).max()) if a.size else 1.0)
    residual = float(np.abs(a @ x - b).max()) / scale if a.size else 0.0
    if not fallback and residual > RESIDUAL_TOL:
        fallback = True
        x = np.linalg.lstsq(a, b, rcond=None)[0]
        residual = float(np.abs(a @ x - b).max()) / scale
    if fallback:
        log.warning("Cholesky solve failed or was inaccurate; used least squares (residual %.3g)", residual)
    return x, residual, fallback


def _floating_unlabeled(g: QuantizedGraph, labeled: np.ndarray) -> list[list[int]]:
    n_comp, comp = connected_components(g.base_weights > 0, directed=False)
    grounded = set(comp[labeled].tolist())
    out = []
    for c in range(n_comp):
        if c not in grounded:
            out.append(np.flatnonzero(comp == c).tolist())
    return out


def _check_max_principle(scores: np.ndarray) -> None:
    if scores.size and np.abs(scores).max() > 1.0 + 1e-9:
        raise SolverError(f"scores left [-1, 1] (max |score| = {np.abs(scores).max():.6g})")


def solve_hard(
    g: QuantizedGraph,
    labels: LabelAssignment,
    gamma_g: float,
    on_floating: str = "raise",
) -> SolveResult:
    """Hard-constrained harmonic solution ``(L_uu + gamma_g V_uu)^-1 W_ul y_l``.

    With ``gamma_g = 0`` an unlabeled component that touches no label makes
    the system singular. ``on_floating="raise"`` reports it; ``"zero"``
    leaves those vertices at score 0 and lists them in ``floating``.
    """
    if gamma_g < 0 or not math.isfinite(gamma_g):
        raise ValueError("gamma_g must be finite and >= 0")
    if len(labels.labels) != len(g):
        raise ValueError("label assignment does not match the graph size")
    lab = labels.labeled
    if not lab.any():
        raise NoLabelsError("no labeled vertex")
    y = labels.targets
    scores = y.copy()
    unl = np.flatnonzero(~lab)
    floating: list[int] = []
    if gamma_g == 0:
        for comp in _floating_unlabeled(g, lab):
            if on_floating == "raise":
                raise SingularSystemError(comp)
            floating.extend(comp)
        if floating:
            unl = np.setdiff1d(unl, floating)
    residual, fallback = 0.0, False
    if unl.size:
        w = g.scaled_weights
        v = g.multiplicities.astype(float)
        a = g.laplacian[np.ix_(unl, unl)] + gamma_g * np.diag(v[unl])
        b = w[np.ix_(unl, np.flatnonzero(lab))] @ y[lab]
        scores[unl], residual, fallback = _solve_spd(a, b)
    _check_max_principle(scores)
    return SolveResult(
        scores, "hard", float(gamma_g), np.flatnonzero(lab).tolist(), residual, fallback, sorted(floating)
    )


def solve_soft(g: QuantizedGraph, labels: LabelAssignment, cfg: SoftConfig) -> SolveResult:
    """Minimize ``(l - y)' C V (l - y) + l' (L + gamma_g V) l``.

    ``C`` is ``c_l`` on labeled vertices and ``c_u`` elsewhere; scaling it by
    the multiplicities keeps the collapsed problem equal to the expanded one.
    """
    if len(labels.labels) != len(g):
        raise ValueError("label assignment does not match the graph size")
    v = g.multiplicities.astype(float)
    lab = labels.labeled
    cost = np.where(lab, cfg.c_l, cfg.c_u) * v
    y = labels.targets
    a = g.laplacian + np.diag(cfg.gamma_g * v + cost)
    scores, residual, fallback = _solve_spd(a, cost[:, None] * y)
    _check_max_principle(scores)

    # norm measured on the expanded graph, where each vertex stands for v_i points
    n_l = int(v[lab].sum())
    norms = np.sqrt((v[:, None] * scores**2).sum(axis=0))
    bound = lemma1_bound(n_l, cfg.gamma_g)
    ok = bool(np.all(norms <= bound * (1 + 1e-9) + 1e-12))
    if not ok:
        log.warning("soft solution norm %.6g exceeds sqrt(n_l)/(gamma_g+1) = %.6g", norms.max(), bound)
    return SolveResult(
        scores, "soft", cfg.gamma_g, np.flatnonzero(lab).tolist(), residual, fallback, [], ok
    )


def predict_row(row: np.ndarray) -> int:
    """Class index for one score row: sign for a single column, else argmax (ties to lowest)."""
    row = np.asarray(row, dtype=float).ravel()
    if row.size == 1:
        return 0 if row[0] >= 0 else 1
    return int(np.argmax(row))


def predict(result: SolveResult, centroid_index: int) -> int:
    return predict_row(result.scores[centroid_index])


def lemma1_bound(n_l: int, gamma_g: float) -> float:
    """Norm bound ``sqrt(n_l) / (gamma_g + 1)`` on a soft regularized solution."""
    if n_l < 0:
        raise ValueError("n_l must be >= 0")
    return math.sqrt(n_l) / (gamma_g + 1.0)


def lemma2_bound(n_l: int, c_u: float, gamma_g: float, fro_gap: float) -> float:
    """Perturbation bound ``sqrt(n_l) ||K^q - K^o||_F / (c_u gamma_g^2)``."""
    if not gamma_g > 0:
        raise ValueError("the perturbation bound is undefined for gamma_g = 0")
    return math.sqrt(n_l) * fro_gap / (c_u * gamma_g**2)


@dataclass(frozen=True)
class Prop3Quantities:
    beta_bound: float
    transductive_bound: float
    negative_beta: bool


def prop3_quantities(
    n_l: int,
    gamma_g: float,
    c_u: float,
    delta: float,
    lambda_max_L: float,
    empirical_risk: float,
) -> Prop3Quantities:
    """Stability coefficient bound and transductive error, evaluated as printed.

    ``beta <= 2 [sqrt(2)/(gamma_g + 1)
                 + sqrt(2 n_l) (1 - sqrt(c_u) lambda_max + gamma_g) / (sqrt(c_u) gamma_g^2 + 1)]``
    and ``Delta_T = R_hat + beta + sqrt(2 ln(2/delta) / n_l) (n_l beta + 4)``.
    These are reported, not asserted; a negative beta bound is flagged.
    """
    if n_l <= 0:
        raise ValueError("transductive bound is undefined for n_l = 0")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    sc = math.sqrt(c_u)
    beta = 2.0 * (
        math.sqrt(2.0) / (gamma_g + 1.0)
        + math.sqrt(2.0 * n_l) * (1.0 - sc * lambda_max_L + gamma_g) / (sc * gamma_g**2 + 1.0)
    )
    delta_t = empirical_risk + beta + math.sqrt(2.0 * math.log(2.0 / delta) / n_l) * (n_l * beta + 4.0)
    return Prop3Quantities(beta, delta_t, beta < 0)
