"""Shared geometric primitives: 3-vectors, unit quaternions, small symmetric matrices.

Conventions used throughout the package:

- Vectors are numpy arrays of shape (3,), meters (or m/s, m/s^2 by context).
- Quaternions are numpy arrays of shape (4,) stored scalar-first [w, x, y, z],
  Hamilton convention.  A quaternion q maps body-frame vectors into the world
  frame via ``quat_rotate(q, v_body) -> v_world``.
- Matrices are plain numpy arrays.  Covariance matrices are expected to be
  symmetric positive semi-definite; ``symmetric_eigendecomposition`` rejects
  inputs whose asymmetry exceeds 1e-9 (relative to the matrix magnitude).

Everything here is pure and reentrant.
"""

from __future__ import annotations

import numpy as np

QUAT_NORM_TOL = 1e-9


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Rescale to unit norm.  Raises on (near-)zero input rather than guessing."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("cannot normalize near-zero quaternion")
    return q / n


def quat_compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b: applying b first, then a (for frame maps)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_inverse(q: np.ndarray) -> np.ndarray:
    """Inverse of a unit quaternion (its conjugate)."""
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector v by q (body -> world for an orientation quaternion).

    Norm-preserving for unit q.  Uses the expanded sandwich product, which is
    cheaper than building the rotation matrix for a single vector.
    """
    w, x, y, z = q
    vx, vy, vz = v
    # t = 2 * (q_vec x v)
    tx = 2.0 * (y * vz - z * vy)
    ty = 2.0 * (z * vx - x * vz)
    tz = 2.0 * (x * vy - y * vx)
    return np.array([
        vx + w * tx + (y * tz - z * ty),
        vy + w * ty + (z * tx - x * tz),
        vz + w * tz + (x * ty - y * tx),
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix R such that R @ v == quat_rotate(q, v)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise ValueError("rotation axis must be non-zero")
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis / n))


def quat_from_rotvec(rotvec: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle, rad) to quaternion."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec)
    if angle < 1e-12:
        # second-order small-angle expansion keeps unit norm to ~1e-24
        return quat_normalize(np.concatenate(([1.0 - angle * angle / 8.0], 0.5 * rotvec)))
    return np.concatenate(([np.cos(0.5 * angle)], np.sin(0.5 * angle) * rotvec / angle))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Logarithm map: quaternion to rotation vector with angle in [0, pi]."""
    w, x, y, z = q
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    s = np.sqrt(x * x + y * y + z * z)
    if s < 1e-12:
        return 2.0 * np.array([x, y, z])
    angle = 2.0 * np.arctan2(s, w)
    return angle * np.array([x, y, z]) / s


def quat_angle(q: np.ndarray) -> float:
    """Rotation angle of q in radians, in [0, pi]."""
    return float(np.linalg.norm(quat_to_rotvec(q)))


def quat_slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation from a (t=0) to b (t=1) along the short arc."""
    dot = float(np.dot(a, b))
    if dot < 0.0:
        b = -b
        dot = -dot
    if dot > 1.0 - 1e-10:
        return quat_normalize(a + t * (b - a))
    theta = np.arccos(min(dot, 1.0))
    sin_theta = np.sin(theta)
    return (np.sin((1.0 - t) * theta) * a + np.sin(t * theta) * b) / sin_theta


def quat_mean(quats: np.ndarray) -> np.ndarray:
    """Average of nearby unit quaternions (sign-aligned arithmetic mean).

    Adequate for clusters spanning well under a hemisphere, e.g. repeated
    estimates of one physical orientation.
    """
    quats = np.asarray(quats, dtype=float)
    if quats.ndim != 2 or quats.shape[1] != 4 or quats.shape[0] == 0:
        raise ValueError("expected a non-empty (n, 4) array of quaternions")
    ref = quats[0]
    signs = np.where(quats @ ref < 0.0, -1.0, 1.0)
    return quat_normalize((quats * signs[:, None]).mean(axis=0))


def symmetric_eigendecomposition(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and orthonormal eigenvectors of a symmetric matrix.

    Returns ``(values, vectors)`` with ``vectors[:, i]`` the eigenvector for
    ``values[i]``.  Input must be square and symmetric; asymmetry beyond
    1e-9 * max(1, |m|_inf) is rejected.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max()))
    if float(np.abs(m - m.T).max()) > 1e-9 * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    values, vectors = np.linalg.eigh(0.5 * (m + m.T))
    order = np.argsort(values)[::-1]
    return values[order], vectors[:, order]


def is_psd(m: np.ndarray, tol: float = 1e-9) -> bool:
    """True if the symmetric matrix m has no eigenvalue below -tol."""
    values = np.linalg.eigvalsh(0.5 * (m + np.asarray(m).T))
    return bool(values.min() >= -tol)
