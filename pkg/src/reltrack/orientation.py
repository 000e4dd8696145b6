"""Per-node local state estimation.

Each tracking node carries a 9-DoF sensor (accelerometer, gyroscope,
magnetometer) and estimates two quantities that the rest of the pipeline
consumes: its absolute orientation (body -> world quaternion) and its
gravity-compensated world-frame linear acceleration.

Two producers of :class:`LocalEstimate` exist:

- :class:`OrientationFilter` is a complementary attitude filter for raw IMU
  streams (gyro prediction, accelerometer/magnetometer correction with fixed
  gains).  It stands in for a full production-grade orientation filter, whose
  internals are out of scope here; downstream stages only rely on the constant
  output covariances.
- :func:`simulate_local_estimate` draws estimates directly from ground truth
  plus Gaussian noise, which is what the simulator-driven evaluation uses.

World frame: z up, gravity reaction (0, 0, +9.81) read by a resting, level
accelerometer.  North is +x for the default magnetic field.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    quat_compose,
    quat_from_rotvec,
    quat_identity,
    quat_normalize,
    quat_rotate,
    quat_slerp,
)

# Earth field in the world frame, gauss: horizontal north component plus
# downward dip.  Only the direction matters for heading correction.
DEFAULT_MAG_WORLD = np.array([0.22, 0.0, -0.42])


@dataclass(frozen=True)
class GravityModel:
    """Gravity reaction vector in the world frame (what a resting accel reads)."""

    vec: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 9.81]))

    def __post_init__(self):
        v = np.asarray(self.vec, dtype=float)
        object.__setattr__(self, "vec", v)
        norm = np.linalg.norm(v)
        if not 9.7 <= norm <= 9.9:
            raise ValueError(f"gravity magnitude {norm:.3f} outside [9.7, 9.9] m/s^2")


@dataclass(frozen=True)
class ImuSample:
    """One raw 9-DoF reading, body frame."""

    timestamp: float       # seconds
    accel: np.ndarray      # m/s^2
    gyro: np.ndarray       # rad/s
    mag: np.ndarray        # gauss


@dataclass(frozen=True)
class LocalEstimate:
    """A node's orientation/acceleration output at one instant.

    ``q_hat`` is body -> world; ``a_hat`` is world-frame with gravity removed.
    The covariances are diagonal and constant per run: ``q_cov`` over a
    rotation-vector perturbation (rad^2), ``a_cov`` over a_hat ((m/s^2)^2).
    """

    timestamp: float
    q_hat: np.ndarray
    a_hat: np.ndarray
    q_cov: np.ndarray
    a_cov: np.ndarray


# Defaults for the constant output covariances; determined empirically on
# comparable hardware, overridable per scenario.
DEFAULT_Q_COV = np.eye(3) * np.radians(1.0) ** 2
DEFAULT_A_COV = np.eye(3) * 0.05 ** 2


def gravity_compensate(q_hat: np.ndarray, raw_accel: np.ndarray,
                       gravity: GravityModel = GravityModel()) -> np.ndarray:
    """World-frame linear acceleration with gravity removed.

    ``raw_accel`` is the body-frame specific force; rotating it into the world
    frame and subtracting the gravity reaction leaves the kinematic
    acceleration.  Identically zero for any static pose.
    """
    return quat_rotate(q_hat, np.asarray(raw_accel, dtype=float)) - gravity.vec


def orientation_from_accel_mag(accel: np.ndarray, mag: np.ndarray,
                               mag_world: np.ndarray = DEFAULT_MAG_WORLD) -> np.ndarray:
    """Absolute orientation from one static accel+mag pair (TRIAD-style).

    Builds the body-frame axes of the world frame from the measured gravity
    direction and the horizontal component of the measured field, then
    converts the resulting rotation matrix to a quaternion.
    """
    up_b = np.asarray(accel, dtype=float)
    n_up = np.linalg.norm(up_b)
    if n_up < 1e-9:
        raise ValueError("accelerometer reading has zero norm")
    up_b = up_b / n_up

    mag_b = np.asarray(mag, dtype=float)
    # horizontal (world-plane) component of the field, in body coordinates
    east_b = np.cross(up_b, mag_b)
    n_east = np.linalg.norm(east_b)
    if n_east < 1e-9:
        raise ValueError("magnetic field parallel to gravity; heading undefined")
    east_b = east_b / n_east
    field_h_b = np.cross(east_b, up_b)

    # the same triad in the world frame, anchored on the known field direction
    mh = np.asarray(mag_world, dtype=float).copy()
    mh[2] = 0.0
    n_mh = np.linalg.norm(mh)
    if n_mh < 1e-9:
        raise ValueError("mag_world must have a horizontal component")
    w1 = mh / n_mh
    w3 = np.array([0.0, 0.0, 1.0])
    w2 = np.cross(w3, w1)

    # R maps each body triad axis onto its world counterpart
    b = np.column_stack([field_h_b, east_b, up_b])
    w = np.column_stack([w1, w2, w3])
    return _matrix_to_quat(w @ b.T)


def _matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to scalar-first quaternion (Shepperd's method)."""
    t = np.trace(r)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s])
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s,
                      (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s,
                      0.25 * s, (r[1, 2] + r[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
                      (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


class OrientationFilter:
    """Complementary attitude filter: gyro prediction, accel/mag correction.

    The first sample initializes the attitude from accel+mag directly; after
    that, each update integrates the gyro over dt and pulls the result toward
    the accel/mag-derived attitude with gain ``correction_gain`` (1/s).  The
    correction is skipped while the accelerometer norm is far from gravity
    (the device is accelerating, so the reading does not point up).

    Deterministic for a given input stream.  Non-monotonic timestamps are
    rejected with ValueError.
    """

    def __init__(self, correction_gain: float = 1.5,
                 gravity: GravityModel = GravityModel(),
                 mag_world: np.ndarray = DEFAULT_MAG_WORLD,
                 q_cov: np.ndarray = DEFAULT_Q_COV,
                 a_cov: np.ndarray = DEFAULT_A_COV,
                 accel_gate: float = 1.0):
        self.correction_gain = correction_gain
        self.gravity = gravity
        self.mag_world = np.asarray(mag_world, dtype=float)
        self.q_cov = np.asarray(q_cov, dtype=float)
        self.a_cov = np.asarray(a_cov, dtype=float)
        self.accel_gate = accel_gate
        self.q = quat_identity()
        self.last_t: float | None = None

    def update(self, sample: ImuSample) -> LocalEstimate:
        if self.last_t is not None and sample.timestamp <= self.last_t:
            raise ValueError(
                f"non-monotonic timestamp {sample.timestamp} after {self.last_t}")

        if self.last_t is None:
            self.q = orientation_from_accel_mag(sample.accel, sample.mag, self.mag_world)
        else:
            dt = sample.timestamp - self.last_t
            self.q = quat_normalize(
                quat_compose(self.q, quat_from_rotvec(np.asarray(sample.gyro) * dt)))
            accel_norm = np.linalg.norm(sample.accel)
            if abs(accel_norm - np.linalg.norm(self.gravity.vec)) < self.accel_gate:
                target = orientation_from_accel_mag(sample.accel, sample.mag,
                                                    self.mag_world)
                blend = min(1.0, self.correction_gain * dt)
                self.q = quat_slerp(self.q, target, blend)
        self.last_t = sample.timestamp

        a_hat = gravity_compensate(self.q, sample.accel, self.gravity)
        return LocalEstimate(sample.timestamp, self.q.copy(), a_hat,
                             self.q_cov, self.a_cov)


def _check_diag_cov(cov: np.ndarray, name: str) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3")
    if np.abs(cov - np.diag(np.diag(cov))).max() > 1e-12:
        raise ValueError(f"{name} must be diagonal")
    if np.diag(cov).min() < 0:
        raise ValueError(f"{name} must be positive semi-definite")
    return cov


def simulate_local_estimate(true_q: np.ndarray, true_a_world: np.ndarray,
                            q_cov: np.ndarray, a_cov: np.ndarray,
                            rng: np.random.Generator,
                            timestamp: float = 0.0) -> LocalEstimate:
    """Generate a noisy LocalEstimate from ground truth.

    Orientation noise is a rotation vector drawn from N(0, q_cov), composed
    onto the true quaternion (a well-defined Gaussian on the tangent space);
    acceleration noise is additive N(0, a_cov).  Deterministic under a fixed
    rng state; zero covariances pass the truth through exactly.
    """
    q_cov = _check_diag_cov(q_cov, "q_cov")
    a_cov = _check_diag_cov(a_cov, "a_cov")
    rot_noise = np.sqrt(np.diag(q_cov)) * rng.standard_normal(3)
    a_noise = np.sqrt(np.diag(a_cov)) * rng.standard_normal(3)
    q_hat = quat_normalize(quat_compose(quat_from_rotvec(rot_noise),
                                        np.asarray(true_q, dtype=float)))
    a_hat = np.asarray(true_a_world, dtype=float) + a_noise
    return LocalEstimate(timestamp, q_hat, a_hat, q_cov, a_cov)


__all__ = [
    "GravityModel", "ImuSample", "LocalEstimate", "OrientationFilter",
    "DEFAULT_MAG_WORLD", "DEFAULT_Q_COV", "DEFAULT_A_COV",
    "gravity_compensate", "orientation_from_accel_mag",
    "simulate_local_estimate",
]
