"""Incremental k-centers summary of a point stream.

The summary keeps at most ``k + 1`` centroids. Whenever a step starts with
``k + 1`` of them, the covering radius ``R`` is multiplied by ``m`` and the
centroids are greedily re-merged until at most ``k`` remain. Merged
centroids keep the survivor's location and add up multiplicities, so a
point is never further than ``R * m / (m - 1)`` from its representative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class RejectedInput(ValueError):
    """A point that cannot enter the summary (bad shape or non-finite)."""


class UnsupportedInMode(RuntimeError):
    pass


@dataclass
class Centroid:
    location: np.ndarray
    multiplicity: int = 1
    label_tally: dict[int, int] = field(default_factory=dict)
    insertion_index: int = 0
    # (step, class) of the most recent label absorbed; breaks majority ties
    last_label: tuple[int, int] | None = None

    @property
    def n_labeled(self) -> int:
        return sum(self.label_tally.values())

    @property
    def n_unlabeled(self) -> int:
        return self.multiplicity - self.n_labeled


@dataclass(frozen=True)
class AssignmentOutcome:
    assigned_centroid_index: int
    is_new_centroid: bool
    repartition_occurred: bool
    repartition_passes: int = 0


@dataclass(frozen=True)
class MergeEvent:
    absorbed: int
    survivor: int
    radius: float


class CentroidSet:
    """Doubling-algorithm state: centroids, multiplicities and radius.

    Parameters
    ----------
    capacity : int
        Maximum number of centroids ``k`` kept after a repartition.
    multiplier : float
        Factor ``m > 1`` applied to the radius on every repartition pass.
    track_lineage : bool
        Keep the point-to-centroid lineage needed by :meth:`audit_distortion`.
        Memory then grows with the stream, so leave it off outside diagnostics.
    """

    def __init__(self, capacity: int, multiplier: float = 1.5, track_lineage: bool = False):
        if int(capacity) != capacity or capacity < 1:
            raise ValueError(f"capacity must be a positive integer, got {capacity!r}")
        if not multiplier > 1:
            raise ValueError(f"multiplier must be > 1, got {multiplier!r}")
        self.capacity = int(capacity)
        self.multiplier = float(multiplier)
        self.centroids: list[Centroid] = []
        self.radius: float | None = None
        self.n_points = 0
        self._next_index = 0
        self._locs: np.ndarray | None = None
        self.chain_log: list[MergeEvent] | None = [] if track_lineage else None
        self._owner: list[int] = []
        self._members: dict[int, list[int]] = {}

    def __len__(self) -> int:
        return len(self.centroids)

    @property
    def dim(self) -> int | None:
        return None if self._locs is None else self._locs.shape[1]

    @property
    def locations(self) -> np.ndarray:
        if self._locs is None:
            return np.empty((0, 0))
        return self._locs

    @property
    def multiplicities(self) -> np.ndarray:
        return np.fromiter((c.multiplicity for c in self.centroids), dtype=np.int64, count=len(self.centroids))

    @property
    def track_lineage(self) -> bool:
        return self.chain_log is not None

    def validate(self, point) -> np.ndarray:
        x = np.asarray(point, dtype=float)
        if x.ndim != 1 or x.size == 0:
            raise RejectedInput(f"expected a non-empty 1-d vector, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise RejectedInput("point has non-finite coordinates")
        if self.dim is not None and x.shape[0] != self.dim:
            raise RejectedInput(f"dimension mismatch: expected {self.dim}, got {x.shape[0]}")
        return x

    def distances(self, x: np.ndarray) -> np.ndarray:
        if not self.centroids:
            return np.empty(0)
        diff = self._locs - x
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def observe(self, point) -> AssignmentOutcome:
        """Absorb one point, repartitioning first if the set is over capacity."""
        x = self.validate(point)
        passes = 0
        if len(self.centroids) == self.capacity + 1:
            passes = self.repartition()

        d = self.distances(x)
        j = int(np.argmin(d)) if d.size else -1
        threshold = 0.0 if self.radius is None else self.radius
        if j >= 0 and (d[j] < threshold or (self.radius is None and d[j] == 0.0)):
            target = self.centroids[j]
            target.multiplicity += 1
            index, is_new = j, False
        else:
            target = Centroid(location=x.copy(), insertion_index=self._next_index)
            self._next_index += 1
            self.centroids.append(target)
            self._locs = x[None, :].copy() if self._locs is None else np.vstack([self._locs, x])
            index, is_new = len(self.centroids) - 1, True

        if self.track_lineage:
            pid = self.n_points
            self._owner.append(target.insertion_index)
            self._members.setdefault(target.insertion_index, []).append(pid)
        self.n_points += 1
        return AssignmentOutcome(index, is_new, passes > 0, passes)

    def record_label(self, index: int, label: int, step: int) -> None:
        c = self.centroids[index]
        if c.n_labeled >= c.multiplicity:
            raise ValueError("centroid has no unlabeled point left to carry a label")
        c.label_tally[label] = c.label_tally.get(label, 0) + 1
        c.last_label = (step, label)

    def repartition(self) -> int:
        """Grow ``R`` and greedily re-merge until at most ``k`` centroids remain.

        Returns the number of greedy passes performed.
        """
        if len(self.centroids) != self.capacity + 1:
            raise ValueError(
                f"repartition needs exactly k + 1 = {self.capacity + 1} centroids, "
                f"have {len(self.centroids)}"
            )
        if self.radius is None:
            # first trigger: start at the smallest scale present in the set
            diff = self._locs[:, None, :] - self._locs[None, :, :]
            pair = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
            pair[np.diag_indices_from(pair)] = np.inf
            self.radius = float(pair.min())
        else:
            self.radius *= self.multiplier
        self._greedy_pass()
        passes = 1
        while len(self.centroids) > self.capacity:
            self.radius *= self.multiplier
            self._greedy_pass()
            passes += 1
        return passes

    def _greedy_pass(self) -> None:
        R = self.radius
        kept: list[int] = []
        for i in range(len(self.centroids)):
            if kept:
                diff = self._locs[kept] - self._locs[i]
                d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
                j = int(np.argmin(d))
                if d[j] < R:
                    self._merge(self.centroids[i], self.centroids[kept[j]])
                    continue
            kept.append(i)
        self.centroids = [self.centroids[i] for i in kept]
        self._locs = self._locs[kept]

    def _merge(self, absorbed: Centroid, survivor: Centroid) -> None:
        survivor.multiplicity += absorbed.multiplicity
        for label, count in absorbed.label_tally.items():
            survivor.label_tally[label] = survivor.label_tally.get(label, 0) + count
        if absorbed.last_label is not None and (
            survivor.last_label is None or absorbed.last_label[0] > survivor.last_label[0]
        ):
            survivor.last_label = absorbed.last_label
        if self.track_lineage:
            self.chain_log.append(MergeEvent(absorbed.insertion_index, survivor.insertion_index, self.radius))
            moved = self._members.pop(absorbed.insertion_index, [])
            for pid in moved:
                self._owner[pid] = survivor.insertion_index
            self._members.setdefault(survivor.insertion_index, []).extend(moved)

    def distortion_bound(self) -> float:
        """Worst-case distance from an absorbed point to its centroid, ``R m / (m - 1)``."""
        if self.radius is None:
            return 0.0
        if math.isinf(self.multiplier):
            return self.radius
        return self.radius * self.multiplier / (self.multiplier - 1.0)

    def owner_positions(self) -> np.ndarray:
        """Current centroid position (index into ``centroids``) of every observed point."""
        if not self.track_lineage:
            raise UnsupportedInMode("point lineage is only kept with track_lineage=True")
        pos = {c.insertion_index: i for i, c in enumerate(self.centroids)}
        return np.fromiter((pos[o] for o in self._owner), dtype=np.int64, count=len(self._owner))

    def audit_distortion(self, raw_points) -> float:
        """Largest distance from an observed point to the centroid now representing it."""
        owners = self.owner_positions()
        pts = np.asarray(raw_points, dtype=float)
        if pts.shape[0] != owners.shape[0]:
            raise ValueError(f"expected {owners.shape[0]} raw points, got {pts.shape[0]}")
        if owners.size == 0:
            return 0.0
        diff = pts - self._locs[owners]
        return float(np.sqrt(np.einsum("ij,ij->i", diff, diff)).max())

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        state = {
            "capacity": self.capacity,
            "multiplier": self.multiplier,
            "radius": self.radius,
            "n_points": self.n_points,
            "next_index": self._next_index,
            "centroids": [
                {
                    "location": [float(v) for v in c.location],
                    "multiplicity": c.multiplicity,
                    "label_tally": [[k, v] for k, v in sorted(c.label_tally.items())],
                    "insertion_index": c.insertion_index,
                    "last_label": None if c.last_label is None else list(c.last_label),
                }
                for c in self.centroids
            ],
        }
        if self.track_lineage:
            state["lineage"] = {
                "owner": list(self._owner),
                "chain_log": [[e.absorbed, e.survivor, e.radius] for e in self.chain_log],
            }
        return state

    @classmethod
    def from_dict(cls, state: dict) -> "CentroidSet":
        lineage = state.get("lineage")
        cs = cls(state["capacity"], state["multiplier"], track_lineage=lineage is not None)
        cs.radius = state["radius"]
        cs.n_points = state["n_points"]
        cs._next_index = state["next_index"]
        for c in state["centroids"]:
            cs.centroids.append(
                Centroid(
                    location=np.array(c["location"], dtype=float),
                    multiplicity=c["multiplicity"],
                    label_tally={int(k): int(v) for k, v in c["label_tally"]},
                    insertion_index=c["insertion_index"],
                    last_label=None if c["last_label"] is None else tuple(c["last_label"]),
                )
            )
        if cs.centroids:
            cs._locs = np.vstack([c.location for c in cs.centroids])
        if lineage is not None:
            cs._owner = list(lineage["owner"])
            cs.chain_log = [MergeEvent(a, b, r) for a, b, r in lineage["chain_log"]]
            for pid, owner in enumerate(cs._owner):
                cs._members.setdefault(owner, []).append(pid)
        return cs
