"""Closed-form weighted rigid alignment and a point-to-point ICP baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import DegenerateError, InputError
from .geometry import CorrespondenceSet, PointCloud, RigidTransform, apply_transform

ICP_MAX_ITER = 50
ICP_TOL = 1e-6
_RANK_TOL = 1e-12


@dataclass(frozen=True)
class AlignmentResult:
    transform: RigidTransform
    weighted_residual: float
    rmse: float
    iterations: int = 1


def weighted_centroid(points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return weights @ points / weights.sum()


def solve_weighted(correspondences: CorrespondenceSet) -> AlignmentResult:
    """Rigid transform minimising ``sum w_i |target_i - (R source_i + t)|^2``.

    Works from weighted centroids and the weighted cross-covariance of the
    centred point sets; the rotation comes from its SVD with the last
    singular direction flipped when needed so that ``det(R) = +1``. The
    returned transform maps ``source`` onto ``target``.
    """
    src = correspondences.source
    tgt = correspondences.target
    w = correspondences.weights
    m = len(correspondences)
    if m < 3:
        raise DegenerateError(f"underdetermined: {m} correspondences, need at least 3")
    wsum = w.sum()
    if not wsum > 0:
        raise DegenerateError("degenerate weights: all weights are zero")

    src_bar = weighted_centroid(src, w)
    tgt_bar = weighted_centroid(tgt, w)
    d_src = src - src_bar
    d_tgt = tgt - tgt_bar
    # 3x3 cross-covariance, source rows against target columns
    cov = (d_src * w[:, None]).T @ d_tgt
    u, s, vt = np.linalg.svd(cov)
    if s[0] == 0 or s[1] <= _RANK_TOL * s[0]:
        raise DegenerateError("collinear correspondences: covariance rank is below 2")
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    rot = v @ np.diag([1.0, 1.0, d]) @ u.T
    transform = RigidTransform(rot, tgt_bar - rot @ src_bar)

    resid = tgt - transform.apply(src)
    sq = np.einsum("ij,ij->i", resid, resid)
    return AlignmentResult(
        transform,
        weighted_residual=float(np.dot(w, sq)),
        rmse=float(np.sqrt(sq.mean())),
    )


def _nearest(tree: cKDTree, query: np.ndarray, probe: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Nearest neighbour indices, ties resolved to the lowest index.

    Looks at the ``probe`` closest candidates; ties wider than that are
    rare enough to be resolved by the tree's own order.
    """
    k = min(probe, tree.n)
    dist, idx = tree.query(query, k=k)
    if k == 1:
        return dist, idx
    tie = dist == dist[:, :1]
    best = np.where(tie, idx, np.iinfo(np.int64).max).min(axis=1)
    return dist[:, 0], best


def icp_point_to_point(
    source: PointCloud,
    target: PointCloud,
    max_iter: int = ICP_MAX_ITER,
    tol: float = ICP_TOL,
    init: RigidTransform | None = None,
) -> AlignmentResult:
    """Classic point-to-point ICP from ``init`` (identity by default).

    Alternates nearest-neighbour matching against ``target`` with a uniform
    weight closed-form solve, stopping when the RMSE improves by less than
    ``tol`` or after ``max_iter`` rounds. ``rmse`` is measured over the
    final assignment.
    """
    if len(source) < 3 or len(target) < 3:
        raise InputError("ICP needs at least 3 points in each cloud")
    transform = RigidTransform.identity() if init is None else init
    src = source.points
    tree = cKDTree(target.points)

    dist, _ = _nearest(tree, transform.apply(src))
    prev = float(np.sqrt(np.mean(dist**2)))
    result = None
    for it in range(1, max_iter + 1):
        _, idx = _nearest(tree, transform.apply(src))
        result = solve_weighted(CorrespondenceSet(src, target.points[idx]))
        transform = result.transform
        improvement = prev - result.rmse
        prev = result.rmse
        if improvement < tol:
            break
    return AlignmentResult(transform, result.weighted_residual, result.rmse, iterations=it)


def align_clouds(
    target_cloud: PointCloud, source_cloud: PointCloud, transform: RigidTransform
) -> PointCloud:
    """Target cloud followed by the source cloud moved into its frame."""
    if len(source_cloud) == 0:
        return target_cloud
    moved = apply_transform(source_cloud, transform)
    if len(target_cloud) == 0:
        return moved
    return PointCloud.concatenate([target_cloud, moved])
