"""The online loop: quantize, rebuild the collapsed graph, solve, predict."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

from .graph import KernelSpec, QuantizedGraph, VertexMap, build_split, pairwise_weights
from .quantizer import CentroidSet, RejectedInput
from .solver import LabelAssignment, SoftConfig, SolveResult, predict_row, solve_hard, solve_soft

CHECKPOINT_VERSION = "quantssl-checkpoint/1"


class UnknownClassError(ValueError):
    pass


class CheckpointVersionError(ValueError):
    def __init__(self, found):
        super().__init__(f"unsupported checkpoint version {found!r}; expected {CHECKPOINT_VERSION!r}")
        self.found = found


class SeedingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LearnerConfig:
    """Run-wide settings.

    ``epsilon=None`` means the epsilon-neighborhood threshold follows
    ``0.1 * gamma_g``.
    """

    capacity: int
    classes: tuple[Hashable, ...] = ("+1", "-1")
    gamma_g: float = 0.1
    sigma: float = 1.0
    feature_scaling: int = 1
    epsilon: float | None = None
    multiplier: float = 1.5
    mode: str = "hard"
    c_l: float = 1.0
    c_u: float = 0.01
    outlier_rejection: bool = True
    track_lineage: bool = False

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(self.classes) < 2 or len(set(self.classes)) != len(self.classes):
            raise ValueError("classes must list at least two distinct labels")
        if self.mode not in ("hard", "soft"):
            raise ValueError(f"mode must be 'hard' or 'soft', got {self.mode!r}")
        if not (np.isfinite(self.gamma_g) and self.gamma_g >= 0):
            raise ValueError("gamma_g must be finite and >= 0")
        # validated eagerly so bad configs fail before any data is touched
        self.kernel
        if self.mode == "soft":
            self.soft

    @property
    def effective_epsilon(self) -> float:
        return 0.1 * self.gamma_g if self.epsilon is None else float(self.epsilon)

    @property
    def kernel(self) -> KernelSpec:
        return KernelSpec(self.sigma, self.feature_scaling, self.effective_epsilon)

    @property
    def soft(self) -> SoftConfig:
        return SoftConfig(self.c_l, self.c_u, self.gamma_g)

    def class_index(self, label) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise UnknownClassError(f"unknown class label {label!r}; declared {list(self.classes)}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d


@dataclass
class StepRecord:
    t: int
    prediction: int | None
    scores: tuple[float, ...] | None
    margin: float
    outlier: bool
    n_centroids: int
    radius: float | None
    repartition_passes: int
    residual: float
    wall_time: float = field(default=0.0, compare=False)

    @property
    def abstained(self) -> bool:
        return self.prediction is None


class OnlineLearner:
    """Online semi-supervised learner over a quantized similarity graph.

    Examples
    --------
    >>> cfg = LearnerConfig(capacity=8, classes=("a", "b"), gamma_g=0.1)
    >>> learner = OnlineLearner(cfg)
    >>> learner.seed([([0.0, 0.0], "a"), ([5.0, 5.0], "b")])
    >>> rec = learner.step([0.2, 0.1])
    >>> cfg.classes[rec.prediction]
    'a'
    """

    def __init__(self, config: LearnerConfig):
        self.config = config
        self.centroids = CentroidSet(config.capacity, config.multiplier, config.track_lineage)
        self.n_labeled = 0
        self.steps_seen = 0
        self.last_result: SolveResult | None = None
        self.last_vertices: VertexMap | None = None
        self.last_graph: QuantizedGraph | None = None

    # -- stream interface ----------------------------------------------------

    def seed(self, labeled_examples: Iterable[tuple[Sequence[float], Hashable]]) -> None:
        examples = list(labeled_examples)
        if not examples:
            return
        if self.steps_seen:
            raise SeedingError("seeding is only allowed before the stream starts")
        for x, y in examples:
            self.step(x, y)

    def is_outlier(self, x: np.ndarray) -> bool:
        """True when every kernel weight to the current centroids is below epsilon."""
        if not len(self.centroids):
            return False
        w = pairwise_weights(x[None, :], self.config.kernel, self.centroids.locations)
        return bool(np.all(w < self.config.effective_epsilon))

    def step(self, x, y: Hashable | None = None) -> StepRecord:
        start = time.perf_counter()
        cfg = self.config
        x = self.centroids.validate(x)
        label = None if y is None else cfg.class_index(y)
        t = self.steps_seen
        self.steps_seen += 1

        if label is None and cfg.outlier_rejection and self.is_outlier(x):
            return StepRecord(
                t, None, None, 0.0, True, len(self.centroids), self.centroids.radius, 0, 0.0,
                time.perf_counter() - start,
            )

        outcome = self.centroids.observe(x)
        if label is not None:
            self.centroids.record_label(outcome.assigned_centroid_index, label, t)
            self.n_labeled += 1

        prediction, scores, residual = None, None, 0.0
        self.last_result = self.last_vertices = self.last_graph = None
        if self.n_labeled:
            result, vertices = self._solve()
            v = vertices.vertex_of(outcome.assigned_centroid_index, label)
            residual = result.residual
            if v not in result.floating:
                scores = tuple(float(s) for s in result.scores[v])
                prediction = predict_row(result.scores[v])
        return StepRecord(
            t,
            prediction,
            scores,
            _margin(scores),
            False,
            len(self.centroids),
            self.centroids.radius,
            outcome.repartition_passes,
            residual,
            time.perf_counter() - start,
        )

    def _solve(self) -> tuple[SolveResult, VertexMap]:
        cfg = self.config
        graph, vertices = build_split(self.centroids, cfg.kernel)
        labels = LabelAssignment(vertices.vertex_class, len(cfg.classes))
        if cfg.mode == "hard":
            result = solve_hard(graph, labels, cfg.gamma_g, on_floating="zero")
        else:
            result = solve_soft(graph, labels, cfg.soft)
        self.last_result, self.last_vertices, self.last_graph = result, vertices, graph
        return result, vertices

    @property
    def conflicts(self) -> int:
        """Centroids holding labeled points of more than one class."""
        return sum(1 for c in self.centroids.centroids if sum(1 for v in c.label_tally.values() if v) > 1)

    # -- checkpointing -------------------------------------------------------

    def checkpoint(self) -> bytes:
        state = {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "cursor": {"steps_seen": self.steps_seen},
            "model": self.model_state(),
        }
        return json.dumps(state, sort_keys=True, separators=(",", ":")).encode("utf-8")

    def model_state(self) -> dict:
        return {"n_labeled": self.n_labeled, "centroids": self.centroids.to_dict()}

    @classmethod
    def restore(cls, blob: bytes) -> "OnlineLearner":
        state = json.loads(blob.decode("utf-8"))
        if state.get("version") != CHECKPOINT_VERSION:
            raise CheckpointVersionError(state.get("version"))
        learner = cls(LearnerConfig(**state["config"]))
        learner.steps_seen = state["cursor"]["steps_seen"]
        learner.n_labeled = state["model"]["n_labeled"]
        learner.centroids = CentroidSet.from_dict(state["model"]["centroids"])
        return learner


def _margin(scores) -> float:
    if scores is None:
        return 0.0
    s = sorted(scores, reverse=True)
    return float(s[0] - s[1]) if len(s) > 1 else abs(float(s[0]))


__all__ = [
    "LearnerConfig",
    "OnlineLearner",
    "StepRecord",
    "UnknownClassError",
    "CheckpointVersionError",
    "SeedingError",
    "RejectedInput",
]
