"""Sensor calibration: IMU offsets at rest and robust affine UWB range calibration.

UWB hardware introduces antenna delay and power-dependent scale errors; raw
ranges follow ``d_raw = a * d_true + b + noise`` over the working envelope
(line of sight, under ~8 m).  :func:`ransac_affine_fit` recovers (a, b) from
raw/ground-truth pairs despite outliers, and the resulting
:class:`UwbCalibration` de-biases subsequent measurements via its inverse map.

IMU offsets are estimated from a rest window; a calibration attempted on a
moving device is rejected outright.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .geometry import quat_identity, quat_rotate
from .orientation import GravityModel, ImuSample

#: residual floor so exact synthetic data still yields a positive sigma
SIGMA_FLOOR = 1e-9


class CalibrationError(RuntimeError):
    """Raised when a calibration cannot be trusted (motion, low consensus...)."""


@dataclass(frozen=True)
class ImuBias:
    accel_offset: np.ndarray   # m/s^2, body frame
    gyro_offset: np.ndarray    # rad/s

    @property
    def gyro_suspicious(self) -> bool:
        # offsets this large indicate a bad rest window, not sensor bias
        return bool(np.linalg.norm(self.gyro_offset) >= 0.1)


@dataclass(frozen=True)
class UwbCalibration:
    """Affine map from true to raw range, plus the residual spread."""

    a: float
    b: float
    sigma_d: float

    def __post_init__(self):
        if not 0.8 <= self.a <= 1.2:
            raise ValueError(f"scale a={self.a:.4f} outside plausible range [0.8, 1.2]")
        if self.sigma_d <= 0:
            raise ValueError("sigma_d must be positive")

    def correct(self, d_raw: float) -> float:
        """Inverse map: de-biased distance from a raw measurement."""
        return (d_raw - self.b) / self.a

    def apply(self, d_true: float) -> float:
        """Forward map without noise (the deterministic part of the model)."""
        return self.a * d_true + self.b

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(
            {"a": float(self.a), "b": float(self.b), "sigma_d": float(self.sigma_d)},
            sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "UwbCalibration":
        data = yaml.safe_load(Path(path).read_text())
        return cls(a=float(data["a"]), b=float(data["b"]), sigma_d=float(data["sigma_d"]))


IDENTITY_CALIBRATION = UwbCalibration(a=1.0, b=0.0, sigma_d=SIGMA_FLOOR)


def estimate_imu_bias(samples: Sequence[ImuSample],
                      gravity: GravityModel = GravityModel(),
                      rest_orientation: np.ndarray | None = None,
                      motion_gyro_std: float = 0.05) -> ImuBias:
    """IMU offsets from a static window of samples.

    The gyro offset is the window mean; the accel offset is the mean reading
    minus the body-frame gravity reaction for the (known) rest orientation,
    level by default.  A gyro standard deviation above ``motion_gyro_std``
    means the device moved and the window is rejected.
    """
    if len(samples) < 100:
        raise ValueError(f"need at least 100 rest samples, got {len(samples)}")
    gyro = np.array([s.gyro for s in samples], dtype=float)
    accel = np.array([s.accel for s in samples], dtype=float)

    gyro_spread = float(np.sqrt(gyro.var(axis=0).sum()))
    if gyro_spread > motion_gyro_std:
        raise CalibrationError(
            f"motion detected during rest window (gyro std {gyro_spread:.4f} rad/s)")

    if rest_orientation is None:
        rest_orientation = quat_identity()
    # body-frame gravity reaction: rotate the world vector down into the body
    gravity_body = quat_rotate(
        np.array([rest_orientation[0], -rest_orientation[1],
                  -rest_orientation[2], -rest_orientation[3]]), gravity.vec)
    return ImuBias(accel_offset=accel.mean(axis=0) - gravity_body,
                   gyro_offset=gyro.mean(axis=0))


def _fit_two_points(d_true: np.ndarray, d_raw: np.ndarray) -> tuple[float, float] | None:
    if abs(d_true[1] - d_true[0]) < 1e-9:
        return None
    a = (d_raw[1] - d_raw[0]) / (d_true[1] - d_true[0])
    b = d_raw[0] - a * d_true[0]
    return a, b


def ransac_affine_fit(pairs: Sequence[tuple[float, float]],
                      iterations: int = 200,
                      threshold_scale: float = 3.0,
                      min_inlier_fraction: float = 0.5,
                      rng: np.random.Generator | None = None) -> UwbCalibration:
    """Robust fit of ``d_raw = a * d_true + b`` from (d_true, d_raw) pairs.

    Classic RANSAC with a 2-point minimal sample: each candidate line gets an
    inlier threshold of ``threshold_scale`` times a MAD-based residual scale,
    the best consensus set is refit by least squares, and the inlier residual
    standard deviation becomes sigma_d.  Fails loudly when the best consensus
    covers less than ``min_inlier_fraction`` of the data; a silent wrong
    answer would poison every downstream range.
    """
    data = np.asarray(pairs, dtype=float)
    if data.ndim != 2 or data.shape[1] != 2 or data.shape[0] < 20:
        raise ValueError("need at least 20 (d_true, d_raw) pairs")
    d_true, d_raw = data[:, 0], data[:, 1]
    if d_true.max() - d_true.min() < 2.0:
        raise ValueError("calibration pairs must span at least 2 m of range diversity")
    if rng is None:
        rng = np.random.default_rng(0)

    n = len(data)
    best_inliers: np.ndarray | None = None
    best_count = 0
    for _ in range(iterations):
        idx = rng.choice(n, size=2, replace=False)
        fit = _fit_two_points(d_true[idx], d_raw[idx])
        if fit is None:
            continue
        a, b = fit
        residuals = np.abs(d_raw - (a * d_true + b))
        scale = 1.4826 * np.median(residuals)
        threshold = threshold_scale * scale + 1e-12
        inliers = residuals <= threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers

    if best_inliers is None or best_count < min_inlier_fraction * n:
        raise CalibrationError(
            f"calibration failed: best consensus {best_count}/{n} below "
            f"{min_inlier_fraction:.0%}")

    a, b = np.polyfit(d_true[best_inliers], d_raw[best_inliers], deg=1)
    residuals = d_raw[best_inliers] - (a * d_true[best_inliers] + b)
    sigma = max(float(residuals.std()), SIGMA_FLOOR)
    return UwbCalibration(a=float(a), b=float(b), sigma_d=sigma)


__all__ = [
    "CalibrationError", "ImuBias", "UwbCalibration", "IDENTITY_CALIBRATION",
    "estimate_imu_bias", "ransac_affine_fit", "SIGMA_FLOOR",
]
