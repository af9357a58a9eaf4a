"""Point-cloud distances and set-level generative metrics."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from tetdiff.errors import ParameterError
from tetdiff.meshops import PointCloud
from tetdiff.models import MetricsConfig, MetricsReport

logger = logging.getLogger(__name__)

EXACT_EMD_MAX_POINTS = 512
AUCTION_REL_GAP = 0.01

Distance = Literal["cd", "emd"]
EmdMode = Literal["auto", "exact", "approximate"]


@dataclass(frozen=True, eq=False)
class ShapeSet:
    clouds: tuple[PointCloud, ...]
    ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.clouds:
            raise ParameterError("shape set is empty")
        sizes = {len(c) for c in self.clouds}
        if len(sizes) != 1:
            raise ParameterError(f"clouds in a shape set must have equal size, got {sorted(sizes)}")
        ids = self.ids or tuple(str(i) for i in range(len(self.clouds)))
        if len(ids) != len(self.clouds):
            raise ParameterError("one id per cloud required")
        object.__setattr__(self, "clouds", tuple(self.clouds))
        object.__setattr__(self, "ids", tuple(ids))

    def __len__(self) -> int:
        return len(self.clouds)


def _points(cloud: PointCloud | np.ndarray) -> np.ndarray:
    p = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, np.float64)
    if len(p) == 0:
        raise ParameterError("point cloud is empty")
    return p


# ---------------------------------------------------------------------------
# Cloud distances
# ---------------------------------------------------------------------------


def chamfer(a: PointCloud | np.ndarray, b: PointCloud | np.ndarray) -> float:
    """Mean squared nearest-neighbour distance, summed over both directions."""
    pa, pb = _points(a), _points(b)
    dab, _ = cKDTree(pb).query(pa)
    dba, _ = cKDTree(pa).query(pb)
    return float(np.mean(dab**2) + np.mean(dba**2))


def auction_assignment(
    cost: np.ndarray, rel_gap: float = AUCTION_REL_GAP
) -> tuple[np.ndarray, float]:
    """Min-cost perfect matching by Jacobi auction with epsilon scaling.

    Returns (assignment, certified gap): assignment[i] is the column of row i, and the
    gap bounds how far the matching's total cost can be above the optimum.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = len(cost)
    if n == 1:
        return np.zeros(1, np.int64), 0.0
    benefit = -cost
    scale = float(np.ptp(cost))
    if scale == 0:
        return np.arange(n), 0.0

    prices = np.zeros(n)
    rows = np.arange(n)
    eps = scale / 4.0
    while True:
        owner = np.full(n, -1)
        assigned = np.full(n, -1)
        while True:
            bidders = np.flatnonzero(assigned < 0)
            if len(bidders) == 0:
                break
            values = benefit[bidders] - prices
            best = np.argmax(values, axis=1)
            top = values[np.arange(len(bidders)), best]
            values[np.arange(len(bidders)), best] = -np.inf
            second = values.max(axis=1)
            bids = prices[best] + (top - second) + eps

            order = np.lexsort((-bids, best))
            first = np.r_[True, best[order][1:] != best[order][:-1]]
            winners = bidders[order][first]
            objects = best[order][first]
            previous = owner[objects]
            assigned[previous[previous >= 0]] = -1
            owner[objects] = winners
            assigned[winners] = objects
            prices[objects] = bids[order][first]

        primal = float(cost[rows, assigned].sum())
        dual = float((benefit - prices).max(axis=1).sum() + prices.sum())
        gap = primal + dual
        if gap <= rel_gap * primal or gap <= 1e-12 * scale * n:
            return assigned, max(gap, 0.0)
        eps /= 4.0


def emd(a: PointCloud | np.ndarray, b: PointCloud | np.ndarray, mode: EmdMode = "auto") -> float:
    """Mean Euclidean cost of the optimal bijection between equal-size clouds."""
    pa, pb = _points(a), _points(b)
    if len(pa) != len(pb):
        raise ParameterError(f"EMD needs equal-size clouds, got {len(pa)} and {len(pb)}")
    n = len(pa)
    if mode == "auto":
        mode = "exact" if n <= EXACT_EMD_MAX_POINTS else "approximate"
    cost = cdist(pa, pb)
    if mode == "exact":
        if n > EXACT_EMD_MAX_POINTS:
            raise ParameterError(f"exact EMD is limited to {EXACT_EMD_MAX_POINTS} points")
        r, c = linear_sum_assignment(cost)
        return float(cost[r, c].mean())
    if mode != "approximate":
        raise ParameterError(f"unknown EMD mode {mode!r}")
    assignment, gap = auction_assignment(cost)
    value = float(cost[np.arange(n), assignment].mean())
    logger.debug("Auction EMD %.6f with certified gap %.2e", value, gap / n)
    return value


def cloud_distance(dist: Distance, emd_mode: EmdMode = "auto"):
    if dist == "cd":
        return chamfer
    if dist == "emd":
        return lambda a, b: emd(a, b, emd_mode)
    raise ParameterError(f"unknown distance {dist!r}")


def pairwise(
    rows: ShapeSet,
    cols: ShapeSet,
    dist: Distance = "cd",
    emd_mode: EmdMode = "auto",
    workers: int = 1,
) -> np.ndarray:
    """Distance matrix between two sets, filled row by row in parallel."""
    fn = cloud_distance(dist, emd_mode)

    def row(i: int) -> np.ndarray:
        return np.array([fn(rows.clouds[i], c) for c in cols.clouds])

    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        return np.stack(list(pool.map(row, range(len(rows)))))


# ---------------------------------------------------------------------------
# Set metrics
# ---------------------------------------------------------------------------


def mmd_from_matrix(gen_ref: np.ndarray) -> float:
    return float(gen_ref.min(axis=0).mean())


def coverage_from_matrix(gen_ref: np.ndarray) -> float:
    matched = np.argmin(gen_ref, axis=1)
    return len(np.unique(matched)) / gen_ref.shape[1]


def nna_from_matrices(gen_gen: np.ndarray, gen_ref: np.ndarray, ref_ref: np.ndarray) -> float:
    """Leave-one-out 1-NN accuracy on the union; ties go to the lower union index."""
    full = np.block([[gen_gen, gen_ref], [gen_ref.T, ref_ref]]).astype(np.float64)
    np.fill_diagonal(full, np.inf)
    labels = np.r_[np.zeros(len(gen_gen), bool), np.ones(len(ref_ref), bool)]
    nearest = np.argmin(full, axis=1)
    return float(np.mean(labels[nearest] == labels))


def mmd(gen: ShapeSet, ref: ShapeSet, dist: Distance = "cd", workers: int = 1) -> float:
    """Mean over references of the distance to the closest generated shape."""
    return mmd_from_matrix(pairwise(gen, ref, dist, workers=workers))


def coverage(gen: ShapeSet, ref: ShapeSet, dist: Distance = "cd", workers: int = 1) -> float:
    """Fraction of references that are the nearest reference of some generated shape."""
    return coverage_from_matrix(pairwise(gen, ref, dist, workers=workers))


def one_nna(gen: ShapeSet, ref: ShapeSet, dist: Distance = "cd", workers: int = 1) -> float:
    if len(gen) + len(ref) < 2:
        raise ParameterError("1-NNA needs at least two shapes")
    return nna_from_matrices(
        pairwise(gen, gen, dist, workers=workers),
        pairwise(gen, ref, dist, workers=workers),
        pairwise(ref, ref, dist, workers=workers),
    )


def occupancy_histogram(points: np.ndarray, resolution: int = 28) -> tuple[np.ndarray, int]:
    """Pooled voxel counts over [-1, 1]^3 and the number of clipped points."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    outside = int(np.count_nonzero(np.any(np.abs(p) > 1.0, axis=1)))
    hist, _ = np.histogramdd(np.clip(p, -1.0, 1.0), bins=resolution, range=[(-1.0, 1.0)] * 3)
    return hist, outside


def jsd_from_histograms(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    p, q = p / p.sum(), q / q.sum()
    m = 0.5 * (p + q)

    def kl(a: np.ndarray) -> float:
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def jsd(gen: ShapeSet, ref: ShapeSet, resolution: int = 28) -> float:
    hg, out_g = occupancy_histogram(np.concatenate([c.points for c in gen.clouds]), resolution)
    hr, out_r = occupancy_histogram(np.concatenate([c.points for c in ref.clouds]), resolution)
    if out_g or out_r:
        logger.warning("Clipped %d points outside [-1, 1]^3 for JSD", out_g + out_r)
    return jsd_from_histograms(hg, hr)


def nearest_neighbor(
    query: PointCloud, dataset: ShapeSet, dist: Distance = "cd"
) -> tuple[int, float]:
    """Closest dataset shape; ties go to the lower index."""
    fn = cloud_distance(dist)
    d = np.array([fn(query, c) for c in dataset.clouds])
    i = int(np.argmin(d))
    return i, float(d[i])


def evaluate(
    gen: ShapeSet, ref: ShapeSet, cfg: MetricsConfig, seed: int = 0, workers: int = 1
) -> MetricsReport:
    """All set metrics, computing each distance matrix once."""
    values = {}
    for dist in ("cd", "emd"):
        gg = pairwise(gen, gen, dist, cfg.emd_mode, workers)
        gr = pairwise(gen, ref, dist, cfg.emd_mode, workers)
        rr = pairwise(ref, ref, dist, cfg.emd_mode, workers)
        values[f"mmd_{dist}"] = mmd_from_matrix(gr)
        values[f"cov_{dist}"] = coverage_from_matrix(gr)
        values[f"nna_{dist}"] = nna_from_matrices(gg, gr, rr)
    return MetricsReport(
        **values,
        jsd=jsd(gen, ref, cfg.jsd_resolution),
        generated=len(gen),
        reference=len(ref),
        points=len(gen.clouds[0]),
        seed=seed,
    )


def shape_set(clouds: Sequence[PointCloud], ids: Sequence[str] = ()) -> ShapeSet:
    return ShapeSet(tuple(clouds), tuple(ids))
