"""Offline replay of a stream against full-graph oracles, and bound audits.

A replay feeds the stream through the live learner while, on the side,
solving the same problem on

* the full graph over every point (``offline``, solved once),
* the graph over the points seen so far (``online``),

and comparing both to the learner's quantized answer. For the comparison
the quantized graph is expanded back to one vertex per point, each point
sitting at its centroid's location. Memory is quadratic in the stream
length, so replays refuse streams longer than ``max_points``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

from .graph import (
    QuantizedGraph,
    frobenius_gap,
    laplacian,
    normalized_laplacian,
    pairwise_weights,
    shared_connected_indices,
)
from .learner import LearnerConfig, OnlineLearner
from .solver import (
    UNLABELED,
    LabelAssignment,
    lemma1_bound,
    lemma2_bound,
    predict_row,
    prop3_quantities,
    solve_hard,
    solve_soft,
)

log = logging.getLogger(__name__)

ISOLATED_CONVENTION = (
    "vertices with zero degree in either the online or the quantized graph are dropped "
    "from both before normalizing"
)
BOUND_RTOL = 1e-9


class ReplayBudgetError(ValueError):
    def __init__(self, n: int, cap: int):
        super().__init__(f"replay of {n} points exceeds the configured cap of {cap}")
        self.n, self.cap = n, cap


class PreconditionError(ValueError):
    pass


def _encode(labels: Sequence[Hashable | None] | None, config: LearnerConfig, n: int) -> np.ndarray:
    if labels is None:
        return np.full(n, UNLABELED, dtype=np.int64)
    return np.array([UNLABELED if y is None else config.class_index(y) for y in labels], dtype=np.int64)


def solve_points(points: np.ndarray, labels: np.ndarray, config: LearnerConfig) -> np.ndarray:
    """Regularized harmonic solution on the raw point graph (one vertex per point)."""
    n_classes = len(config.classes)
    if not (labels != UNLABELED).any():
        return np.zeros((len(points), n_classes))
    w = pairwise_weights(points, config.kernel)
    np.fill_diagonal(w, 0.0)
    g = QuantizedGraph(w, np.ones(len(points), dtype=np.int64))
    assignment = LabelAssignment(labels, n_classes)
    if config.mode == "hard":
        return solve_hard(g, assignment, config.gamma_g, on_floating="zero").scores
    return solve_soft(g, assignment, config.soft).scores


def stream_order(labels: Sequence[Hashable | None], seed: int | None) -> np.ndarray:
    """Labeled examples first in file order, then the rest, shuffled when ``seed`` is given."""
    labeled = np.array([i for i, y in enumerate(labels) if y is not None], dtype=np.int64)
    rest = np.array([i for i, y in enumerate(labels) if y is None], dtype=np.int64)
    if seed is not None:
        rest = np.random.default_rng(seed).permutation(rest)
    return np.concatenate([labeled, rest])


@dataclass
class ReplayTrace:
    """Per accepted step: the three solutions at the new point, gaps and norms.

    Arrays are indexed by accepted step (outliers rejected by the learner are
    listed in ``outliers`` and excluded). ``online`` and the per-step gaps
    are NaN where they were not evaluated.
    """

    config: LearnerConfig
    stream_index: np.ndarray
    truth: np.ndarray
    train_labels: np.ndarray
    offline: np.ndarray
    online: np.ndarray
    quantized: np.ndarray
    quantized_pred: np.ndarray
    gap: np.ndarray
    gap_unnormalized: np.ndarray
    n_labeled: np.ndarray
    n_centroids: np.ndarray
    radius: np.ndarray
    norm_offline: float
    norm_online: np.ndarray
    norm_quantized: np.ndarray
    lemma2_lhs: np.ndarray
    final_gap: float = math.nan
    final_gap_unnormalized: float = math.nan
    isolated_dropped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    outliers: list[int] = field(default_factory=list)
    offline_lambda_max: float = math.nan
    isolated_convention: str = ISOLATED_CONVENTION

    def __len__(self) -> int:
        return len(self.stream_index)

    @property
    def n_labeled_total(self) -> int:
        return int((self.train_labels != UNLABELED).sum())

    def _evaluable(self) -> np.ndarray:
        return (self.truth != UNLABELED) & (self.train_labels == UNLABELED)

    def _cumulative(self, correct: np.ndarray, evaluated: np.ndarray | None = None) -> np.ndarray:
        mask = self._evaluable()
        if evaluated is not None:
            mask = mask & evaluated
        counts = np.cumsum(mask)
        hits = np.cumsum(correct & mask)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)

    def cumulative_accuracy(self, family: str) -> np.ndarray:
        """Running accuracy over unlabeled steps with a known true class; abstentions count as misses.

        The online family only counts steps at which it was actually solved.
        """
        evaluated = None
        if family == "quantized":
            pred = self.quantized_pred
        elif family == "online":
            pred = np.array(
                [
                    -1 if (np.isnan(r).any() or nl == 0) else predict_row(r)
                    for r, nl in zip(self.online, self.n_labeled)
                ]
            )
            evaluated = ~np.isnan(self.online).any(axis=1)
        elif family == "offline":
            pred = np.array([predict_row(r) for r in self.offline]) if self.n_labeled_total else np.full(len(self), -1)
        else:
            raise ValueError(f"unknown family {family!r}")
        return self._cumulative(pred == self.truth, evaluated)

    def final_accuracy(self, family: str) -> float:
        acc = self.cumulative_accuracy(family)
        return float(acc[-1]) if acc.size else math.nan


def replay(
    points,
    labels: Sequence[Hashable | None],
    config: LearnerConfig,
    *,
    truth: Sequence[Hashable | None] | None = None,
    order: Sequence[int] | None = None,
    online_steps: Iterable[int] | None = None,
    gap_steps: Iterable[int] | None = None,
    max_points: int = 5000,
    spectrum: bool = True,
) -> ReplayTrace:
    """Replay a stream, computing offline, online and quantized solutions side by side.

    Parameters
    ----------
    points, labels
        The dataset; ``labels[i]`` is the training label fed to the learner or None.
    truth
        True classes used for accuracies and the error decomposition. Defaults
        to ``labels``.
    order
        Stream order as indices into ``points``; defaults to file order.
    online_steps, gap_steps
        1-based stream steps at which to solve the online graph / measure the
        Laplacian gaps. ``None`` means every step; each evaluation costs a
        dense ``t x t`` solve.
    spectrum
        Also compute the largest eigenvalue of the full-graph Laplacian
        (needed for the stability report, cubic in ``n``).
    """
    x = np.asarray(points, dtype=float)
    n = x.shape[0]
    if n > max_points:
        raise ReplayBudgetError(n, max_points)
    train = _encode(labels, config, n)
    true = _encode(truth, config, n) if truth is not None else train.copy()
    true = np.where(true == UNLABELED, train, true)
    order = np.arange(n) if order is None else np.asarray(order, dtype=np.int64)
    online_set = None if online_steps is None else set(online_steps)
    gap_set = None if gap_steps is None else set(gap_steps)
    c = len(config.classes)

    cfg = dataclasses.replace(config, track_lineage=True)
    learner = OnlineLearner(cfg)
    offline_all = solve_points(x[order], train[order], config)
    offline_lambda_max = math.nan
    if spectrum and n:
        w_full = pairwise_weights(x, config.kernel)
        offline_lambda_max = float(np.linalg.eigvalsh(laplacian(w_full))[-1])
    norm_offline = float(np.linalg.norm(offline_all, axis=0).max()) if n else 0.0

    acc: list[int] = []
    outliers: list[int] = []
    rows: dict[str, list] = {k: [] for k in (
        "offline", "online", "quantized", "pred", "gap", "gapu", "nl", "nc", "radius",
        "norm_on", "norm_q", "l2", "dropped",
    )}
    for s, idx in enumerate(order):
        step = s + 1
        y = None if train[idx] == UNLABELED else cfg.classes[train[idx]]
        rec = learner.step(x[idx], y)
        if rec.outlier:
            outliers.append(int(idx))
            continue
        acc.append(int(idx))
        nl = int((train[acc] != UNLABELED).sum())
        rows["offline"].append(offline_all[s])
        q_row = np.zeros(c) if rec.scores is None else np.array(rec.scores)
        rows["quantized"].append(q_row)
        rows["pred"].append(-1 if rec.prediction is None else rec.prediction)
        rows["nl"].append(nl)
        rows["nc"].append(rec.n_centroids)
        rows["radius"].append(math.nan if rec.radius is None else rec.radius)
        rows["norm_q"].append(_quantized_norm(learner))

        want_online = online_set is None or step in online_set
        want_gap = gap_set is None or step in gap_set
        on_row = np.full(c, np.nan)
        norm_on = l2 = gap = gapu = math.nan
        dropped = 0
        if want_online or want_gap:
            pts = x[acc]
            w_on = pairwise_weights(pts, config.kernel)
            np.fill_diagonal(w_on, 0.0)
            w_q = _expanded_weights(learner, config)
            if want_online:
                online_vec = solve_points(pts, train[acc], config)
                on_row = online_vec[-1]
                norm_on = float(np.linalg.norm(online_vec, axis=0).max())
                q_vec = _expanded_scores(learner, train[acc], c)
                l2 = float(np.linalg.norm(q_vec - online_vec, axis=0).max())
            if want_gap:
                gap, gapu, dropped = laplacian_gaps(w_on, w_q)
        rows["online"].append(on_row)
        rows["norm_on"].append(norm_on)
        rows["l2"].append(l2)
        rows["gap"].append(gap)
        rows["gapu"].append(gapu)
        rows["dropped"].append(dropped)

    final_gap = final_gapu = math.nan
    if acc:
        w_on = pairwise_weights(x[acc], config.kernel)
        np.fill_diagonal(w_on, 0.0)
        final_gap, final_gapu, _ = laplacian_gaps(w_on, _expanded_weights(learner, config))

    def arr(key, width=None):
        if width is None:
            return np.array(rows[key], dtype=float)
        return np.array(rows[key], dtype=float).reshape(-1, width)

    acc_idx = np.array(acc, dtype=np.int64)
    return ReplayTrace(
        config=config,
        stream_index=acc_idx,
        truth=true[acc_idx],
        train_labels=train[acc_idx],
        offline=arr("offline", c),
        online=arr("online", c),
        quantized=arr("quantized", c),
        quantized_pred=np.array(rows["pred"], dtype=np.int64),
        gap=arr("gap"),
        gap_unnormalized=arr("gapu"),
        n_labeled=np.array(rows["nl"], dtype=np.int64),
        n_centroids=np.array(rows["nc"], dtype=np.int64),
        radius=arr("radius"),
        norm_offline=norm_offline,
        norm_online=arr("norm_on"),
        norm_quantized=arr("norm_q"),
        lemma2_lhs=arr("l2"),
        final_gap=final_gap,
        final_gap_unnormalized=final_gapu,
        isolated_dropped=np.array(rows["dropped"], dtype=np.int64),
        outliers=outliers,
        offline_lambda_max=offline_lambda_max,
    )


def laplacian_gaps(w_online: np.ndarray, w_quantized: np.ndarray) -> tuple[float, float, int]:
    """(normalized gap, unnormalized gap, number of vertices dropped as isolated)."""
    gapu = frobenius_gap(laplacian(w_quantized), laplacian(w_online))
    keep = shared_connected_indices(w_online, w_quantized)
    dropped = w_online.shape[0] - keep.size
    if keep.size == 0:
        return 0.0, gapu, dropped
    sub = np.ix_(keep, keep)
    gap = frobenius_gap(normalized_laplacian(w_quantized[sub]), normalized_laplacian(w_online[sub]))
    return gap, gapu, dropped


def _expanded_weights(learner: OnlineLearner, config: LearnerConfig) -> np.ndarray:
    """Point-level quantized graph: every observed point placed at its centroid."""
    cs = learner.centroids
    locs = cs.locations[cs.owner_positions()]
    w = pairwise_weights(locs, config.kernel)
    np.fill_diagonal(w, 0.0)
    return w


def _expanded_scores(learner: OnlineLearner, train: np.ndarray, n_classes: int) -> np.ndarray:
    """The learner's current solution read off at every observed point."""
    owners = learner.centroids.owner_positions()
    out = np.zeros((owners.size, n_classes))
    result, vertices = learner.last_result, learner.last_vertices
    if result is None:
        return out
    lookup = {(int(c), int(k)): i for i, (c, k) in enumerate(zip(vertices.vertex_centroid, vertices.vertex_class))}
    for j, (owner, label) in enumerate(zip(owners, train)):
        out[j] = result.scores[lookup[(int(owner), int(label))]]
    return out


def _quantized_norm(learner: OnlineLearner) -> float:
    """Largest per-class norm of the quantized solution on the expanded graph."""
    result = learner.last_result
    if result is None:
        return 0.0
    v = learner.last_graph.multiplicities.astype(float)
    return float(np.sqrt((v[:, None] * result.scores**2).sum(axis=0)).max())


def decompose_error(trace: ReplayTrace, y: Sequence[int] | None = None) -> dict:
    """Split the quantized squared error into offline, online and quantization terms.

    Works on binary tasks (score column 0, truth mapped to +1 for class 0 and
    -1 otherwise) over the steps where the online solution was evaluated.
    Returns ``lhs``, ``term4``, ``term5``, ``term6`` and ``holds``.
    """
    if len(trace.config.classes) != 2:
        raise PreconditionError("the error decomposition is defined for binary tasks")
    if y is None:
        if (trace.truth == UNLABELED).any():
            raise PreconditionError("true labels missing for some steps")
        y = np.where(trace.truth == 0, 1.0, -1.0)
    y = np.asarray(y, dtype=float)
    mask = ~np.isnan(trace.online[:, 0])
    q, o, s, yy = trace.quantized[mask, 0], trace.online[mask, 0], trace.offline[mask, 0], y[mask]
    for name, v in (("quantized", q), ("online", o), ("offline", s), ("y", yy)):
        if v.size and np.abs(v).max() > 1.0 + 1e-12:
            raise PreconditionError(f"{name} values leave [-1, 1]")
    n = max(int(mask.sum()), 1)
    lhs = float(((q - yy) ** 2).sum() / n)
    term4 = float(4.5 * ((s - yy) ** 2).sum() / n)
    term5 = float(4.5 * ((o - s) ** 2).sum() / n)
    term6 = float(4.5 * ((q - o) ** 2).sum() / n)
    return {
        "lhs": lhs,
        "term4": term4,
        "term5": term5,
        "term6": term6,
        "holds": lhs <= (term4 + term5 + term6) * (1 + BOUND_RTOL) + 1e-15,
        "n": int(mask.sum()),
    }


@dataclass(frozen=True)
class BoundCheck:
    name: str
    evaluated: int
    worst_lhs: float
    worst_rhs: float
    min_slack: float
    violations: int
    max_ratio: float = math.nan
    detail: str = ""

    @property
    def holds(self) -> bool:
        return self.violations == 0


@dataclass
class AuditReport:
    checks: list[BoundCheck]
    info: dict[str, float]
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations


def _check(name: str, lhs: np.ndarray, rhs: np.ndarray, steps: np.ndarray | None = None) -> tuple[BoundCheck, list[str]]:
    lhs = np.atleast_1d(np.asarray(lhs, dtype=float))
    rhs = np.broadcast_to(np.atleast_1d(np.asarray(rhs, dtype=float)), lhs.shape)
    ok = ~np.isnan(lhs)
    lhs, rhs = lhs[ok], rhs[ok]
    steps = np.arange(ok.size)[ok] if steps is None else np.asarray(steps)[ok]
    if lhs.size == 0:
        return BoundCheck(name, 0, math.nan, math.nan, math.nan, 0), []
    slack = rhs - lhs
    bad = lhs > rhs * (1 + BOUND_RTOL) + 1e-12
    # report the tightest step relative to its bound; steps with rhs == 0 only matter if lhs > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs / rhs, np.where(lhs > 0, np.inf, 0.0))
    worst = int(np.argmax(ratio))
    messages = [
        f"{name}: step {int(st)} lhs={lv:.10g} > rhs={rv:.10g}"
        for st, lv, rv in zip(steps[bad], lhs[bad], rhs[bad])
    ]
    return BoundCheck(name, int(lhs.size), float(lhs[worst]), float(rhs[worst]), float(slack.min()), int(bad.sum()), float(ratio[worst])), messages


def audit_bounds(trace: ReplayTrace, config: LearnerConfig | None = None, delta: float = 0.05) -> AuditReport:
    """Evaluate both sides of every norm / perturbation / decomposition bound.

    Requires a soft-mode trace. The perturbation checks additionally need
    ``gamma_g > 0``. Any violated inequality is listed in ``violations``.
    """
    config = trace.config if config is None else config
    if config.mode != "soft":
        raise PreconditionError("bound audits need the soft-constrained formulation")
    g, c_u = config.gamma_g, config.c_u
    nl_total = trace.n_labeled_total
    steps = np.arange(1, len(trace) + 1)
    checks, messages = [], []

    def add(result):
        checks.append(result[0])
        messages.extend(result[1])

    add(_check("lemma1_offline", trace.norm_offline, lemma1_bound(nl_total, g)))
    nl_bound = np.array([lemma1_bound(int(k), g) for k in trace.n_labeled])
    add(_check("lemma1_online", trace.norm_online, nl_bound, steps))
    add(_check("lemma1_quantized", trace.norm_quantized, nl_bound, steps))

    if len(config.classes) == 2 and not (trace.truth == UNLABELED).any():
        dec = decompose_error(trace)
        add(_check("prop2_decomposition", dec["lhs"], dec["term4"] + dec["term5"] + dec["term6"]))

    evaluated = ~np.isnan(trace.online[:, 0])
    diff_on_off = ((trace.online - trace.offline) ** 2).max(axis=1)
    prop4_rhs = 4.0 * nl_total / (g + 1.0) ** 2
    add(_check("prop4_per_step", diff_on_off, prop4_rhs, steps))
    if evaluated.any():
        add(_check("prop4_cumulative", float(diff_on_off[evaluated].mean()), prop4_rhs))

    if g > 0:
        have = evaluated & ~np.isnan(trace.gap_unnormalized)
        l2_rhs = np.array([
            lemma2_bound(int(k), c_u, g, gu) if not np.isnan(gu) else np.nan
            for k, gu in zip(trace.n_labeled, trace.gap_unnormalized)
        ])
        add(_check("lemma2", np.where(have, trace.lemma2_lhs, np.nan), l2_rhs, steps))
        diff_q_on = ((trace.quantized - trace.online) ** 2).max(axis=1)
        p5_rhs = trace.n_labeled * trace.gap_unnormalized**2 / (c_u**2 * g**4)
        add(_check("prop5_per_step", np.where(have, diff_q_on, np.nan), p5_rhs, steps))
        if have.any():
            add(_check("prop5_cumulative", float(diff_q_on[have].mean()), float(p5_rhs[have].mean())))

    info: dict[str, float] = {}
    if nl_total > 0 and g > 0 and not math.isnan(trace.offline_lambda_max):
        lab = trace.train_labels != UNLABELED
        y = np.where(trace.truth == 0, 1.0, -1.0)
        emp = float(((trace.offline[lab, 0] - y[lab]) ** 2).mean())
        p3 = prop3_quantities(nl_total, g, c_u, delta, trace.offline_lambda_max, emp)
        info.update(
            prop3_beta_bound=p3.beta_bound,
            prop3_transductive_bound=p3.transductive_bound,
            prop3_negative_beta=float(p3.negative_beta),
            prop3_empirical_risk=emp,
            true_risk_offline=float(((trace.offline[:, 0] - y) ** 2).mean()),
        )
        if p3.negative_beta:
            log.warning("stability bound evaluated as printed is negative (%.4g)", p3.beta_bound)
    return AuditReport(checks, info, messages)


@dataclass(frozen=True)
class GapCurveRow:
    k: int
    mean_gap: float
    mean_accuracy_quantized: float
    mean_accuracy_offline: float
    mean_accuracy_online: float
    gaps: tuple[float, ...]


def gap_curve(
    points,
    labels: Sequence[Hashable | None],
    config: LearnerConfig,
    ks: Sequence[int],
    *,
    truth: Sequence[Hashable | None] | None = None,
    seeds: Sequence[int | None] = (None,),
    with_online: bool = False,
    max_points: int = 5000,
) -> list[GapCurveRow]:
    """Final-step normalized Laplacian gap and accuracies as a function of ``k``.

    Each seed shuffles the unlabeled part of the stream; labeled examples
    always come first. The online family is only solved with ``with_online``
    since it needs a dense solve per step.
    """
    out = []
    n = len(labels)
    for k in ks:
        gaps, aq, aoff, aon = [], [], [], []
        for seed in seeds:
            trace = replay(
                points,
                labels,
                dataclasses.replace(config, capacity=int(k)),
                truth=truth,
                order=stream_order(labels, seed),
                online_steps=None if with_online else (),
                gap_steps=(),
                max_points=max_points,
                spectrum=False,
            )
            gaps.append(trace.final_gap)
            aq.append(trace.final_accuracy("quantized"))
            aoff.append(trace.final_accuracy("offline"))
            aon.append(trace.final_accuracy("online") if with_online else math.nan)
        out.append(
            GapCurveRow(int(k), float(np.mean(gaps)), float(np.mean(aq)), float(np.mean(aoff)), float(np.mean(aon)), tuple(gaps))
        )
        log.info("k=%d mean gap %.6g (n=%d, %d seeds)", k, out[-1].mean_gap, n, len(seeds))
    return out


def time_curve(
    points,
    labels: Sequence[Hashable | None],
    config: LearnerConfig,
    steps: Sequence[int],
    *,
    truth: Sequence[Hashable | None] | None = None,
    seed: int | None = None,
    max_points: int = 5000,
) -> ReplayTrace:
    """Replay at fixed ``k`` measuring the gaps only at the given stream steps."""
    return replay(
        points,
        labels,
        config,
        truth=truth,
        order=stream_order(labels, seed),
        online_steps=(),
        gap_steps=steps,
        max_points=max_points,
        spectrum=False,
    )
