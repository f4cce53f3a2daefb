"""Similarity graphs over centroids and the Laplacians built from them."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist

from .quantizer import CentroidSet

DistanceFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class IsolatedVertexError(ValueError):
    def __init__(self, index: int):
        super().__init__(f"vertex {index} has zero degree; drop isolated vertices before normalizing")
        self.index = index


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian heat kernel ``exp(-d^2 / (2 p sigma^2))`` with an epsilon cut.

    ``feature_scaling`` is the ``p`` in the denominator: 1 gives the plain
    Gaussian, the feature count gives the per-feature normalized variant.
    Weights strictly below ``epsilon`` are set to zero.
    """

    sigma: float
    feature_scaling: int = 1
    epsilon: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be positive and finite, got {self.sigma!r}")
        if int(self.feature_scaling) != self.feature_scaling or self.feature_scaling < 1:
            raise ValueError(f"feature_scaling must be an integer >= 1, got {self.feature_scaling!r}")
        if not (np.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon!r}")

    @property
    def bandwidth(self) -> float:
        return 2.0 * self.feature_scaling * self.sigma**2

    def weights_from_sq_distances(self, sq: np.ndarray) -> np.ndarray:
        w = np.exp(-np.asarray(sq, dtype=float) / self.bandwidth)
        if self.epsilon > 0:
            w[w < self.epsilon] = 0.0
        return w


def sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances between the rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return cdist(a, b, "sqeuclidean")


def kernel_weight(a, b, spec: KernelSpec) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite input")
    diff = a - b
    return float(spec.weights_from_sq_distances(np.array([diff @ diff]))[0])


def pairwise_weights(
    a: np.ndarray,
    spec: KernelSpec,
    b: np.ndarray | None = None,
    distance: DistanceFn | None = None,
) -> np.ndarray:
    """Kernel matrix between rows of ``a`` and ``b`` (``b`` defaults to ``a``).

    ``distance`` may supply a custom metric returning a pairwise distance
    matrix; the Gaussian is then applied to its square. The diagonal is left
    as computed (it is 1 for the default metric when ``epsilon <= 1``).
    """
    b = a if b is None else b
    if distance is None:
        sq = sq_distances(a, b)
    else:
        sq = np.asarray(distance(a, b), dtype=float) ** 2
    return spec.weights_from_sq_distances(sq)


def estimate_sigma(buffer) -> float:
    """Mean of per-feature standard deviations over a warm-up buffer."""
    x = np.asarray(buffer, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two warm-up points to estimate sigma")
    sigma = float(x.std(axis=0).mean())
    if not sigma > 0:
        raise ValueError("warm-up buffer has zero spread; cannot estimate sigma")
    return sigma


@dataclass(frozen=True, eq=False)
class QuantizedGraph:
    """Collapsed similarity graph: ``W^q = V W~ V`` over multiplicity-weighted vertices."""

    base_weights: np.ndarray
    multiplicities: np.ndarray

    @cached_property
    def scaled_weights(self) -> np.ndarray:
        v = self.multiplicities.astype(float)
        return v[:, None] * self.base_weights * v[None, :]

    @cached_property
    def degrees(self) -> np.ndarray:
        return self.scaled_weights.sum(axis=1)

    @cached_property
    def laplacian(self) -> np.ndarray:
        return laplacian(self.scaled_weights)

    def __len__(self) -> int:
        return self.base_weights.shape[0]


def _zero_diagonal(w: np.ndarray) -> np.ndarray:
    w = np.array(w, dtype=float, copy=True)
    np.fill_diagonal(w, 0.0)
    return w


def build(centroids: CentroidSet, spec: KernelSpec, distance: DistanceFn | None = None) -> QuantizedGraph:
    if len(centroids) == 0:
        raise ValueError("cannot build a graph over an empty centroid set")
    w = _zero_diagonal(pairwise_weights(centroids.locations, spec, distance=distance))
    return QuantizedGraph(w, centroids.multiplicities)


@dataclass(frozen=True)
class VertexMap:
    """Which centroid and label group each vertex of a split graph stands for.

    ``vertex_class`` is -1 for the unlabeled points of a centroid, otherwise
    the class index shared by the labeled points of that group.
    """

    vertex_centroid: np.ndarray
    vertex_class: np.ndarray

    def vertex_of(self, centroid: int, label: int | None) -> int:
        cls = -1 if label is None else label
        hit = np.flatnonzero((self.vertex_centroid == centroid) & (self.vertex_class == cls))
        if hit.size != 1:
            raise KeyError(f"no vertex for centroid {centroid}, class {cls}")
        return int(hit[0])


def build_split(
    centroids: CentroidSet, spec: KernelSpec, distance: DistanceFn | None = None
) -> tuple[QuantizedGraph, VertexMap]:
    """Collapsed graph whose vertices are (centroid, label group) pairs.

    Points sharing a centroid are identical in feature space, but labeled and
    unlabeled ones carry different constraints, so they are kept apart. Each
    group becomes one vertex with the group size as multiplicity. Groups of
    the same centroid are joined by the kernel at distance zero. The result
    reproduces the solution on the fully expanded point graph exactly.
    """
    if len(centroids) == 0:
        raise ValueError("cannot build a graph over an empty centroid set")
    # only centroids holding labels need per-item work; the rest is one unlabeled group each
    total = centroids.multiplicities
    n_lab = np.zeros_like(total)
    lab_c, lab_k, lab_m = [], [], []
    for i, c in enumerate(centroids.centroids):
        if c.label_tally:
            for label, count in c.label_tally.items():
                if count > 0:
                    n_lab[i] += count
                    lab_c.append(i)
                    lab_k.append(label)
                    lab_m.append(count)
    unl = total - n_lab
    has_unl = np.flatnonzero(unl > 0)
    vc = np.concatenate([has_unl, np.array(lab_c, dtype=np.int64)])
    vk = np.concatenate([np.full(has_unl.size, -1, dtype=np.int64), np.array(lab_k, dtype=np.int64)])
    mult = np.concatenate([unl[has_unl], np.array(lab_m, dtype=np.int64)])
    # per centroid: the unlabeled group first, then classes in increasing order
    order = np.lexsort((vk, vc))
    vc, vk, mult = vc[order], vk[order], mult[order]
    full = pairwise_weights(centroids.locations, spec, distance=distance)
    w = _zero_diagonal(full[np.ix_(vc, vc)])
    return QuantizedGraph(w, mult), VertexMap(vc, vk)


def laplacian(g) -> np.ndarray:
    """``D - W`` for a weight matrix or a :class:`QuantizedGraph` (self-loops ignored)."""
    w = g.scaled_weights if isinstance(g, QuantizedGraph) else g
    w = _zero_diagonal(w)
    lap = -w
    np.fill_diagonal(lap, w.sum(axis=1))
    return lap


def normalized_laplacian(weights) -> np.ndarray:
    w = _zero_diagonal(weights)
    d = w.sum(axis=1)
    zero = np.flatnonzero(d <= 0)
    if zero.size:
        raise IsolatedVertexError(int(zero[0]))
    s = 1.0 / np.sqrt(d)
    lap = -(s[:, None] * w * s[None, :])
    np.fill_diagonal(lap, 1.0)
    return lap


def frobenius_gap(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b, "fro"))


def shared_connected_indices(*weights: np.ndarray) -> np.ndarray:
    """Indices with positive degree in every given weight matrix (self-loops ignored)."""
    keep = None
    for w in weights:
        d = _zero_diagonal(w).sum(axis=1) > 0
        keep = d if keep is None else keep & d
    return np.flatnonzero(keep)
