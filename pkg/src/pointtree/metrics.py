"""Evaluation metrics for reconstruction, generation quality, and parts.

Set-level metrics (MMD, coverage, 1-NNA) compare a generated set of clouds
against a reference set under Chamfer distance. A brute-force double loop
over all cloud pairs defines each metric; the implementations build exactly
that pairwise matrix, optionally across a thread pool (cells are
independent, so threading cannot change values).

Values are kept in natural units; reporting helpers expose the customary
x 10^4 scaling alongside.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .geometry import chamfer_distance, nearest_neighbors


@dataclass
class CloudSet:
    """A list of clouds plus the role it plays in an evaluation."""

    clouds: list
    role: str = "reference"  # or "generated"

    def __post_init__(self):
        if len(self.clouds) == 0:
            raise ValueError("empty cloud set")

    def __len__(self):
        return len(self.clouds)


def _clouds(x) -> list:
    out = list(x.clouds) if isinstance(x, CloudSet) else list(x)
    if len(out) == 0:
        raise ValueError("empty cloud set")
    return out


def cd_matrix(rows, cols, threads: int = 1) -> np.ndarray:
    """Chamfer distance between every row cloud and every column cloud."""
    row_clouds = _clouds(rows)
    col_clouds = _clouds(cols)
    out = np.empty((len(row_clouds), len(col_clouds)), dtype=np.float64)

    def fill(i):
        for j, c in enumerate(col_clouds):
            out[i, j] = chamfer_distance(row_clouds[i], c)[0]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, range(len(row_clouds))))
    else:
        for i in range(len(row_clouds)):
            fill(i)
    return out


def mmd(reference, generated, threads: int = 1) -> float:
    """Mean over reference clouds of the distance to the closest generated one."""
    matrix = cd_matrix(reference, generated, threads=threads)
    return float(np.mean(matrix.min(axis=1)))


def coverage(reference, generated, threads: int = 1) -> float:
    """Fraction of reference clouds that are the nearest reference of at
    least one generated cloud. Ties resolve to the lowest reference index."""
    matrix = cd_matrix(generated, reference, threads=threads)
    matched = np.unique(np.argmin(matrix, axis=1))
    return float(matched.size) / matrix.shape[1]


def one_nna(reference, generated, threads: int = 1) -> float:
    """Leave-one-out 1-NN two-sample classification accuracy.

    Every cloud in the union is assigned the set label of its nearest other
    cloud; 0.5 means the sets are indistinguishable. Ties resolve to the
    lowest union index (reference clouds first).
    """
    ref = _clouds(reference)
    gen = _clouds(generated)
    union = ref + gen
    if len(union) < 2:
        raise ValueError("need at least two clouds in total")
    labels = np.array([0] * len(ref) + [1] * len(gen))
    matrix = cd_matrix(union, union, threads=threads)
    np.fill_diagonal(matrix, np.inf)
    nearest = np.argmin(matrix, axis=1)
    return float(np.mean(labels[nearest] == labels))


def purity(predicted_labels, ground_truth_labels) -> float:
    """Weighted majority-label agreement between segments and true parts."""
    pred = np.asarray(predicted_labels)
    truth = np.asarray(ground_truth_labels)
    if pred.shape != truth.shape or pred.ndim != 1 or pred.size == 0:
        raise ValueError("label lists must be equal-length, 1-D, non-empty")
    agree = 0
    for segment in np.unique(pred):
        _, counts = np.unique(truth[pred == segment], return_counts=True)
        agree += counts.max()
    return float(agree) / pred.size


def transfer_labels(source_points, source_labels, query_points) -> np.ndarray:
    """Label each query point like its nearest source point.

    Bridges label sets living on different point sets, e.g. part labels on
    generated leaves carried over to a scanned cloud before a purity check.
    """
    labels = np.asarray(source_labels)
    idx, _ = nearest_neighbors(query_points, source_points)
    return labels[idx]


def reconstruction_cd(dataset, reconstruct):
    """Per-shape Chamfer distance between each cloud and its reconstruction.

    `reconstruct` maps one cloud to an (n, 3) array. Returns (per-shape
    list, mean), in natural units.
    """
    clouds = _clouds(dataset)
    per_shape = [float(chamfer_distance(c, reconstruct(c))[0]) for c in clouds]
    return per_shape, float(np.mean(per_shape))


@dataclass
class MetricRecord:
    """One reported metric with enough context to read it unambiguously."""

    name: str
    value: float
    n_reference: int
    n_generated: int
    times_1e4: bool = False  # customary scaling for distance-flavoured metrics

    def render(self) -> str:
        shown = self.value * 1e4 if self.times_1e4 else self.value
        scale = " (x 1e4)" if self.times_1e4 else ""
        return (
            f"{self.name}: {shown:.6g}{scale}  "
            f"[reference {self.n_reference}, generated {self.n_generated}]"
        )


def render_records(records) -> str:
    return "\n".join(r.render() for r in records)
