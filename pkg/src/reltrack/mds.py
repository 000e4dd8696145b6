"""Constellation-wide refinement through classical multidimensional scaling.

Individual pair filters only ever observe distances, so their relative
position estimates drift.  With three or more nodes the full set of pairwise
distances over-determines the constellation shape: embedding the distance
matrix with classical MDS and feeding the consistent coordinates back into
every pair filter constrains that drift.

Classical MDS: square the distances entrywise, double-center with
J = I - (1/n) 1 1^T to get the Gram kernel K = -1/2 J D^2 J, take the top
three eigenpairs, and scale the eigenvectors by the square roots of their
eigenvalues.  The embedding is only defined up to a rigid transform (and
reflection), so it is registered onto a reference layout, normally the
positions the filters themselves imply, with a weighted orthogonal Procrustes
fit before anything is blended back.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .geometry import symmetric_eigendecomposition

if TYPE_CHECKING:
    from .pair_filter import PairFilter

logger = logging.getLogger(__name__)


class DegenerateGeometryError(ValueError):
    """The distance matrix does not admit a usable embedding."""


@dataclass(frozen=True)
class MdsSolution:
    """Embedded coordinates, one row per node, centroid at the origin."""

    coords: np.ndarray             # (n, 3)
    eigenvalues: np.ndarray        # top 3, descending, clamped at 0
    dim_used: int                  # 2 or 3


@dataclass(frozen=True)
class AlignmentTransform:
    """Rigid registration: aligned = points @ rotation.T + translation.

    ``rotation`` is orthogonal with determinant +1 or -1 (reflections are
    legitimate: an embedding has no intrinsic handedness).
    """

    rotation: np.ndarray
    translation: np.ndarray
    low_confidence: bool = False

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


def check_distance_matrix(D: np.ndarray) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError("distance matrix must be square")
    if np.abs(np.diag(D)).max() > 1e-9:
        raise ValueError("distance matrix must have a zero diagonal")
    if np.abs(D - D.T).max() > 1e-9 * max(1.0, np.abs(D).max()):
        raise ValueError("distance matrix must be symmetric")
    if D.min() < 0:
        raise ValueError("distances must be non-negative")
    return D


def double_center_kernel(D: np.ndarray) -> np.ndarray:
    """Gram kernel K = -1/2 J D^2 J of a distance matrix (J the centering map)."""
    D = check_distance_matrix(D)
    n = D.shape[0]
    J = np.eye(n) - np.ones((n, n)) / n
    return -0.5 * (J @ (D * D) @ J)


def classical_mds(D: np.ndarray, planar_ratio: float = 0.01,
                  force_dim: int | None = None) -> MdsSolution:
    """Embed a pairwise distance matrix into at most 3 coordinates per node.

    Noiseless Euclidean input is reproduced exactly (up to rigid transform).
    Negative eigenvalues, which appear when noise makes D non-Euclidean, are
    clamped to zero.  When the third eigenvalue is tiny relative to the first
    (ratio below ``planar_ratio``) the configuration is treated as planar and
    the third coordinate forced to zero; ``force_dim`` overrides the rank
    test in either direction.
    """
    D = check_distance_matrix(D)
    n = D.shape[0]
    if n < 3:
        raise DegenerateGeometryError(f"MDS needs at least 3 nodes, got {n}")
    K = double_center_kernel(D)
    values, vectors = symmetric_eigendecomposition(K)
    top = np.clip(values[:3], 0.0, None)
    if top[0] <= 0.0:
        raise DegenerateGeometryError("kernel has no positive eigenvalue")

    if force_dim is not None:
        if force_dim not in (2, 3):
            raise ValueError("force_dim must be 2 or 3")
        dim = force_dim
    else:
        dim = 2 if top[2] / top[0] < planar_ratio else 3

    coords = np.zeros((n, 3))
    coords[:, :dim] = vectors[:, :dim] * np.sqrt(top[:dim])
    return MdsSolution(coords=coords, eigenvalues=top, dim_used=dim)


def align_to_reference(points: np.ndarray, reference: np.ndarray,
                       weights: np.ndarray | None = None
                       ) -> tuple[AlignmentTransform, np.ndarray]:
    """Weighted orthogonal Procrustes registration of points onto reference.

    Minimizes sum_i w_i |R p_i + t - r_i|^2 over orthogonal R (reflections
    allowed) and translation t.  The residual is invariant to any rigid
    transform applied to ``points`` beforehand.  A collinear or coincident
    reference cannot pin down the rotation; the best-effort fit is returned
    flagged low-confidence.
    """
    points = np.asarray(points, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if points.shape != reference.shape or points.ndim != 2 or points.shape[1] != 3:
        raise ValueError("points and reference must both be (n, 3)")
    n = points.shape[0]
    if weights is None:
        weights = np.ones(n)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n,) or weights.min() < 0 or weights.sum() <= 0:
        raise ValueError("weights must be non-negative with positive sum")

    w = weights / weights.sum()
    c_p = w @ points
    c_r = w @ reference
    pc = points - c_p
    rc = reference - c_r
    cross = (pc * w[:, None]).T @ rc          # 3x3 cross-covariance

    u, s, vt = np.linalg.svd(cross)
    rotation = vt.T @ u.T
    # rank < 2 leaves at least one axis unconstrained
    scale = s[0] if s[0] > 0 else 1.0
    low_confidence = bool(s[1] / scale < 1e-9)

    translation = c_r - rotation @ c_p
    transform = AlignmentTransform(rotation=rotation, translation=translation,
                                   low_confidence=low_confidence)
    return transform, transform.apply(points)


def refine_positions(pair_states: dict[tuple[int, int], np.ndarray],
                     node_positions: dict[int, np.ndarray],
                     blend: float) -> dict[tuple[int, int], np.ndarray]:
    """Blend every pair's relative position toward the refined layout.

    ``blend`` = 0 leaves states untouched; 1 overwrites them with the
    coordinate differences, after which every triple (i, j, k) closes exactly:
    x_ij + x_jk + x_ki = 0.
    """
    if not 0.0 <= blend <= 1.0:
        raise ValueError("blend must be within [0, 1]")
    out = {}
    for (i, j), x_ij in pair_states.items():
        target = node_positions[j] - node_positions[i]
        out[(i, j)] = (1.0 - blend) * np.asarray(x_ij, dtype=float) + blend * target
    return out


def refine_pair_states(filters: dict[tuple[int, int], "PairFilter"],
                       node_positions: dict[int, np.ndarray],
                       blend: float, position_inflation: float = 0.0) -> None:
    """Apply the refined layout to live pair filters, in place.

    Only the relative position is touched (velocity and orientation are not
    informed by the embedding); the position block of each covariance is
    re-inflated by ``position_inflation`` * I to account for the correction
    being an estimate itself.
    """
    blended = refine_positions({p: f.state.x for p, f in filters.items()},
                               node_positions, blend)
    for pair, f in filters.items():
        f.state.x = blended[pair]
        if position_inflation > 0.0:
            f.state.P[:3, :3] += position_inflation * np.eye(3)


def distance_matrix_from_pairs(ids: list[int],
                               pair_distances: dict[tuple[int, int], float]
                               ) -> np.ndarray:
    """Assemble the symmetric matrix for `ids` from per-pair distances."""
    n = len(ids)
    index = {node: k for k, node in enumerate(ids)}
    D = np.zeros((n, n))
    for (i, j), d in pair_distances.items():
        if i not in index or j not in index:
            continue
        D[index[i], index[j]] = d
        D[index[j], index[i]] = d
    return D


__all__ = [
    "MdsSolution", "AlignmentTransform", "DegenerateGeometryError",
    "check_distance_matrix", "double_center_kernel", "classical_mds",
    "align_to_reference", "refine_positions", "refine_pair_states",
    "distance_matrix_from_pairs",
]
