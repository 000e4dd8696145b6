"""Extended Kalman filter over the relative state of one node pair.

The state is the difference of node j's and node i's kinematics:
relative position x_ij = x_j - x_i, relative velocity v_ij = v_j - v_i
(world frame), and relative orientation q_ij = q_i^-1 * q_j.

Prediction dead-reckons on both nodes' gravity-compensated world-frame
accelerations:

    x <- x + dt * v + dt^2/2 * (a_j - a_i)
    v <- v + dt * (a_j - a_i)
    q <- q_i^-1 * q_j          (direct substitution; carries no covariance)

so the covariance P is 6x6 over (x, v) only.  Process noise enters through
the control inputs: with per-node acceleration covariances A_i, A_j and
S = A_i + A_j, the input Jacobian of the constant-acceleration model gives

    Q = [[dt^4/4 * S, dt^3/2 * S],
         [dt^3/2 * S, dt^2   * S]]

Correction consumes calibrated range measurements as indirect observations of
position and velocity through h(state) = (|x_ij|, |v_ij|).  Raw ranges are
gated against a running average with a speed-dependent threshold, and the
speed pseudo-measurement is the low-pass-filtered range derivative.  Near the
origin either measurement row is undefined and is dropped for that update.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .geometry import quat_compose, quat_inverse, quat_normalize

logger = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-6
MAX_DT = 0.1


@dataclass
class PairState:
    x: np.ndarray                  # relative position, m
    v: np.ndarray                  # relative velocity, m/s
    q: np.ndarray                  # relative orientation, unit quaternion
    P: np.ndarray                  # 6x6 covariance over (x, v)
    t: float                       # seconds

    def copy(self) -> "PairState":
        return PairState(self.x.copy(), self.v.copy(), self.q.copy(),
                         self.P.copy(), self.t)


@dataclass(frozen=True)
class ControlInput:
    a_i: np.ndarray
    a_j: np.ndarray
    q_i: np.ndarray
    q_j: np.ndarray
    dt: float

    def __post_init__(self):
        if not 0.0 < self.dt <= MAX_DT:
            raise ValueError(f"dt={self.dt} outside (0, {MAX_DT}]")


@dataclass(frozen=True)
class RangeObservation:
    d: float                       # calibrated distance, m
    v: float                       # filtered |range derivative|, m/s
    var_d: float                   # range variance, m^2
    var_v: float                   # speed variance, (m/s)^2

    def __post_init__(self):
        if self.d < 0:
            raise ValueError("distance must be non-negative")
        if self.var_d <= 0 or self.var_v <= 0:
            raise ValueError("observation variances must be positive")


def initial_state(x0: np.ndarray, q0: np.ndarray, t: float) -> PairState:
    """Fresh filter state: given position, zero velocity, identity covariance."""
    return PairState(x=np.asarray(x0, dtype=float).copy(),
                     v=np.zeros(3),
                     q=quat_normalize(q0),
                     P=np.eye(6),
                     t=t)


def predict(state: PairState, u: ControlInput,
            sigma_u: np.ndarray) -> PairState:
    """Dead-reckoning prediction over u.dt.

    ``sigma_u`` is the 6x6 control-noise covariance, block-diagonal over
    (a_i, a_j); only the two 3x3 diagonal blocks are read.
    """
    dt = u.dt
    da = np.asarray(u.a_j, dtype=float) - np.asarray(u.a_i, dtype=float)
    x = state.x + dt * state.v + 0.5 * dt * dt * da
    v = state.v + dt * da
    q = quat_normalize(quat_compose(quat_inverse(u.q_i), u.q_j))

    # P' = F P F^T + Q with F = [[I, dt I], [0, I]], computed blockwise
    P = state.P
    pxx, pxv = P[:3, :3], P[:3, 3:]
    pvx, pvv = P[3:, :3], P[3:, 3:]
    new_xx = pxx + dt * (pxv + pvx) + dt * dt * pvv
    new_xv = pxv + dt * pvv
    new_vv = pvv

    s = np.asarray(sigma_u, dtype=float)
    if s.shape != (6, 6):
        raise ValueError("sigma_u must be 6x6 (block-diagonal over a_i, a_j)")
    accel_cov = s[:3, :3] + s[3:, 3:]
    new_P = np.empty((6, 6))
    new_P[:3, :3] = new_xx + (dt ** 4 / 4.0) * accel_cov
    new_P[:3, 3:] = new_xv + (dt ** 3 / 2.0) * accel_cov
    new_P[3:, :3] = new_P[:3, 3:].T
    new_P[3:, 3:] = new_vv + (dt ** 2) * accel_cov

    return PairState(x=x, v=v, q=q, P=new_P, t=state.t + dt)


def sigma_u_from_covs(a_cov_i: np.ndarray, a_cov_j: np.ndarray) -> np.ndarray:
    out = np.zeros((6, 6))
    out[:3, :3] = a_cov_i
    out[3:, 3:] = a_cov_j
    return out


def measurement_model(state: PairState) -> np.ndarray:
    return np.array([np.linalg.norm(state.x), np.linalg.norm(state.v)])


def measurement_jacobian(state: PairState) -> np.ndarray:
    """2x6 Jacobian of (|x|, |v|): unit vectors in the matching blocks."""
    nx = np.linalg.norm(state.x)
    nv = np.linalg.norm(state.v)
    if nx <= DEGENERATE_NORM or nv <= DEGENERATE_NORM:
        raise ValueError("state norm too small; Jacobian undefined")
    H = np.zeros((2, 6))
    H[0, :3] = state.x / nx
    H[1, 3:] = state.v / nv
    return H


def correct(state: PairState, obs: RangeObservation) -> PairState:
    """Standard EKF update against (d, v); degenerate rows are dropped.

    Uses the Joseph-form covariance update and re-symmetrizes, so P stays
    symmetric PSD through long predict/correct sequences.  A singular
    innovation covariance skips the update (logged) rather than corrupting
    the state.
    """
    rows = []
    z = []
    r_diag = []
    nx = np.linalg.norm(state.x)
    nv = np.linalg.norm(state.v)
    if nx > DEGENERATE_NORM:
        h_row = np.zeros(6)
        h_row[:3] = state.x / nx
        rows.append((h_row, nx))
        z.append(obs.d)
        r_diag.append(obs.var_d)
    if nv > DEGENERATE_NORM:
        h_row = np.zeros(6)
        h_row[3:] = state.v / nv
        rows.append((h_row, nv))
        z.append(obs.v)
        r_diag.append(obs.var_v)
    if not rows:
        return state.copy()

    H = np.array([r[0] for r in rows])
    h_val = np.array([r[1] for r in rows])
    R = np.diag(r_diag)
    P = state.P

    S = H @ P @ H.T + R
    try:
        K = np.linalg.solve(S.T, H @ P).T
    except np.linalg.LinAlgError:
        logger.warning("singular innovation covariance at t=%.3f; update skipped",
                       state.t)
        return state.copy()

    innovation = np.array(z) - h_val
    delta = K @ innovation
    x = state.x + delta[:3]
    v = state.v + delta[3:]

    ikh = np.eye(6) - K @ H
    P_new = ikh @ P @ ikh.T + K @ R @ K.T
    P_new = 0.5 * (P_new + P_new.T)
    return PairState(x=x, v=v, q=state.q.copy(), P=P_new, t=state.t)


class OutlierGate:
    """Range gating and speed derivation for one pair's measurement stream.

    An incoming calibrated range is compared to the running average of the
    recent window; the acceptable deviation scales with how far the pair can
    plausibly have moved (last relative speed times the window span) plus
    three sigma of range noise.  Accepted samples update the window and feed
    a first-order low-pass filter on the range derivative, whose magnitude
    becomes the speed pseudo-measurement.

    Gating only activates once the window holds 3 samples.
    """

    def __init__(self, sigma_d: float, threshold_scale: float = 3.0,
                 window: int = 5, lpf_cutoff_hz: float = 2.0,
                 speed_var_scale: float = 4.0):
        if sigma_d <= 0:
            raise ValueError("sigma_d must be positive")
        self.sigma_d = sigma_d
        self.threshold_scale = threshold_scale
        self.samples: deque[tuple[float, float]] = deque(maxlen=window)
        self.lpf_tau = 1.0 / (2.0 * np.pi * lpf_cutoff_hz)
        self.speed_var_scale = speed_var_scale
        self._filtered_rate = 0.0
        self.rejected = 0

    def gate_and_derive(self, d_cal: float, t: float,
                        last_speed: float) -> RangeObservation | None:
        """Returns the observation for an accepted sample, None if rejected."""
        if len(self.samples) >= 3:
            times = [s[0] for s in self.samples]
            mean_d = float(np.mean([s[1] for s in self.samples]))
            window_span = max(t - times[0], 1e-6)
            threshold = self.threshold_scale * (
                abs(last_speed) * window_span + 3.0 * self.sigma_d)
            if abs(d_cal - mean_d) > threshold:
                self.rejected += 1
                return None

        var_v = self.speed_var_scale * self.sigma_d ** 2
        if self.samples:
            prev_t, prev_d = self.samples[-1]
            dt = t - prev_t
            if dt > 0:
                rate = (d_cal - prev_d) / dt
                alpha = dt / (self.lpf_tau + dt)
                self._filtered_rate += alpha * (rate - self._filtered_rate)
                # the raw derivative variance scales with the sample rate
                var_v = self.speed_var_scale * self.sigma_d ** 2 / dt
        self.samples.append((t, d_cal))
        return RangeObservation(d=d_cal, v=abs(self._filtered_rate),
                                var_d=self.sigma_d ** 2,
                                var_v=max(var_v, 1e-12))


class PairFilter:
    """State, covariance and gate for one node pair, with bookkeeping."""

    def __init__(self, pair: tuple[int, int], state: PairState,
                 gate: OutlierGate):
        self.pair = pair
        self.state = state
        self.gate = gate
        self.corrections = 0

    def predict(self, u: ControlInput, sigma_u: np.ndarray) -> None:
        self.state = predict(self.state, u, sigma_u)

    def observe_range(self, d_cal: float, t: float) -> bool:
        """Gate a calibrated range and, if accepted, run the EKF update."""
        obs = self.gate.gate_and_derive(d_cal, t,
                                        float(np.linalg.norm(self.state.v)))
        if obs is None:
            return False
        self.state = correct(self.state, obs)
        self.corrections += 1
        return True

    def distance(self) -> float:
        return float(np.linalg.norm(self.state.x))


__all__ = [
    "PairState", "ControlInput", "RangeObservation", "OutlierGate",
    "PairFilter", "initial_state", "predict", "correct",
    "measurement_model", "measurement_jacobian", "sigma_u_from_covs",
    "DEGENERATE_NORM", "MAX_DT",
]
