"""Discrete-event world model: trajectories, sensors, radio channel, protocol.

Generates everything the tracking pipeline consumes, from declarative
scenario configs: ground-truth motion, noisy per-node orientation and
acceleration estimates, ranging-protocol traffic with line-of-sight-dependent
measurement noise, and cohort join/leave events.

The radio channel stamps receptions so that a resolved two-way range follows
the affine measurement model ``a * d + b + noise``.  Since a single-sided
exchange averages the errors of its two legs, each reception gets noise with
sqrt(2) times the configured per-range sigma, which makes the resolved range
come out with exactly that sigma.  Non-line-of-sight legs (a segment crossing
an obstacle, or a pair marked persistently occluded) use the inflated NLOS
sigma plus a positive bias.

Everything is driven by one seed; two runs with equal configs are
event-for-event identical.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from heapq import heappop, heappush
from pathlib import Path

import numpy as np
import yaml
from scipy.interpolate import CubicSpline

from .calibration import UwbCalibration
from .geometry import quat_from_axis_angle, quat_identity, quat_inverse, quat_rotate
from .orientation import (
    DEFAULT_MAG_WORLD,
    GravityModel,
    ImuSample,
    simulate_local_estimate,
)
from .pipeline import (
    ConstellationPipeline,
    JoinEvent,
    LeaveEvent,
    LocalEstimateEvent,
    PipelineParams,
    RangeEvent,
    TruthEvent,
    compute_metrics,
)
from .ranging import (
    SPEED_OF_LIGHT,
    Activate,
    Deactivate,
    MessageReceived,
    NodeProtocol,
    ProtocolConfig,
    TimerFired,
)

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Scenario validation failure; message lists offending field paths."""


# --- trajectories ------------------------------------------------------------

class WaypointTrajectory:
    """C2-continuous motion through waypoints via cubic splines.

    ``loop=True`` closes the path periodically (the last waypoint must equal
    the first); otherwise natural boundary conditions apply and queries are
    clamped to the time span.  Orientation is either yaw-follows-velocity
    ("heading", remote-controlled vehicles) or identity ("fixed").

    ``ramp_time`` > 0 starts the motion from rest: path time advances as
    w(t) = t - tau * (1 - exp(-t/tau)), whose rate rises smoothly from 0 to 1.
    Real vehicles accelerate from standstill, and trackers are initialized
    during that quiet lead-in.
    """

    def __init__(self, times: np.ndarray, points: np.ndarray, loop: bool = True,
                 orientation: str = "heading", ramp_time: float = 0.0):
        times = np.asarray(times, dtype=float)
        points = np.asarray(points, dtype=float)
        if times.ndim != 1 or points.shape != (len(times), 3):
            raise ValueError("need matching times (n,) and points (n, 3)")
        if len(times) < 4:
            raise ValueError("need at least 4 waypoints")
        if orientation not in ("heading", "fixed"):
            raise ValueError(f"unknown orientation mode {orientation!r}")
        if ramp_time < 0:
            raise ValueError("ramp_time must be >= 0")
        self.loop = loop
        self.t0, self.t1 = float(times[0]), float(times[-1])
        self.period = self.t1 - self.t0
        bc = "periodic" if loop else "natural"
        if loop and not np.allclose(points[0], points[-1]):
            raise ValueError("looped trajectory must end where it starts")
        self._spline = CubicSpline(times, points, bc_type=bc)
        self._ds = self._spline.derivative(1)
        self._dds = self._spline.derivative(2)
        self.orientation_mode = orientation
        self.ramp_time = ramp_time

    # -- time warp -------------------------------------------------------------

    def _warp(self, t: float) -> tuple[float, float, float]:
        """Path time w(t) plus its first two derivatives."""
        if self.ramp_time <= 0.0:
            return t, 1.0, 0.0
        tau = self.ramp_time
        if t <= 0.0:
            return 0.0, 0.0, 1.0 / tau
        e = np.exp(-t / tau)
        return t - tau * (1.0 - e), 1.0 - e, e / tau

    def ramp_factor(self, t: float) -> float:
        """Fraction of nominal speed reached at t (0 at start, 1 asymptotically)."""
        return self._warp(t)[1]

    def _wrap(self, w: float) -> float:
        if self.loop:
            return self.t0 + (w - self.t0) % self.period
        return min(max(w, self.t0), self.t1)

    def position(self, t: float) -> np.ndarray:
        w, _, _ = self._warp(t)
        return self._spline(self._wrap(w))

    def velocity(self, t: float) -> np.ndarray:
        w, dw, _ = self._warp(t)
        return self._ds(self._wrap(w)) * dw

    def acceleration(self, t: float) -> np.ndarray:
        w, dw, ddw = self._warp(t)
        w = self._wrap(w)
        return self._dds(w) * dw * dw + self._ds(w) * ddw

    def _yaw(self, t: float) -> float:
        # tangent direction of the path itself, well-defined even at rest
        w, _, _ = self._warp(t)
        tangent = self._ds(self._wrap(w))
        return float(np.arctan2(tangent[1], tangent[0]))

    def orientation(self, t: float) -> np.ndarray:
        if self.orientation_mode == "fixed":
            return quat_identity()
        return quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), self._yaw(t))

    def angular_velocity(self, t: float) -> np.ndarray:
        if self.orientation_mode == "fixed":
            return np.zeros(3)
        h = 1e-4
        dyaw = (self._yaw(t + h) - self._yaw(t - h))
        dyaw = (dyaw + np.pi) % (2 * np.pi) - np.pi
        return np.array([0.0, 0.0, dyaw / (2 * h)])


class ArticulatedTrajectory:
    """A point riding a base trajectory: constant body-frame offset plus an
    optional sinusoidal swing, for limb-mounted trackers."""

    def __init__(self, base: WaypointTrajectory, offset: np.ndarray,
                 swing_axis: np.ndarray | None = None,
                 swing_amplitude: float = 0.0, swing_freq_hz: float = 1.0,
                 swing_phase: float = 0.0):
        self.base = base
        self.offset = np.asarray(offset, dtype=float)
        self.swing_axis = (np.zeros(3) if swing_axis is None
                           else np.asarray(swing_axis, dtype=float))
        self.swing_amplitude = swing_amplitude
        self.omega = 2.0 * np.pi * swing_freq_hz
        self.phase = swing_phase
        self.orientation_mode = base.orientation_mode

    def _local(self, t: float) -> np.ndarray:
        # limbs swing up only as the base comes up to speed
        amp = self.swing_amplitude * self.base.ramp_factor(t)
        return self.offset + amp * np.sin(self.omega * t + self.phase) * self.swing_axis

    def position(self, t: float) -> np.ndarray:
        # offsets rotate with the base heading so limbs stay attached
        return self.base.position(t) + quat_rotate(self.base.orientation(t),
                                                   self._local(t))

    def velocity(self, t: float, h: float = 1e-4) -> np.ndarray:
        return (self.position(t + h) - self.position(t - h)) / (2 * h)

    def acceleration(self, t: float, h: float = 1e-3) -> np.ndarray:
        return (self.position(t + h) - 2 * self.position(t)
                + self.position(t - h)) / (h * h)

    def orientation(self, t: float) -> np.ndarray:
        return self.base.orientation(t)

    def angular_velocity(self, t: float) -> np.ndarray:
        return self.base.angular_velocity(t)


def file_trajectory(path: str | Path, loop: bool = False,
                    orientation: str = "fixed") -> WaypointTrajectory:
    """Trajectory from a CSV of t,x,y,z rows (header optional)."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        try:
            rows.append([float(p) for p in parts[:4]])
        except ValueError:
            if lineno == 1:
                continue  # header
            raise ConfigError(f"{path}:{lineno}: expected t,x,y,z floats")
    data = np.asarray(rows)
    if data.ndim != 2 or data.shape[1] < 4 or data.shape[0] < 4:
        raise ConfigError(f"{path}: need at least 4 t,x,y,z rows")
    return WaypointTrajectory(data[:, 0], data[:, 1:4], loop=loop,
                              orientation=orientation)


# --- obstacles ---------------------------------------------------------------

@dataclass(frozen=True)
class PolygonObstacle:
    """Vertical prism given by its 2D footprint; blocks any segment whose
    ground projection crosses or enters the polygon."""

    vertices: np.ndarray  # (k, 2)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ValueError("polygon needs at least 3 (x, y) vertices")
        object.__setattr__(self, "vertices", v)

    def _contains(self, p: np.ndarray) -> bool:
        # ray casting
        x, y = p[0], p[1]
        inside = False
        v = self.vertices
        for k in range(len(v)):
            x1, y1 = v[k]
            x2, y2 = v[(k + 1) % len(v)]
            if (y1 > y) != (y2 > y):
                x_int = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
                if x < x_int:
                    inside = not inside
        return inside

    def blocks(self, p: np.ndarray, q: np.ndarray) -> bool:
        a, b = np.asarray(p[:2], dtype=float), np.asarray(q[:2], dtype=float)
        if self._contains(a) or self._contains(b):
            return True
        v = self.vertices
        for k in range(len(v)):
            if _segments_intersect(a, b, v[k], v[(k + 1) % len(v)]):
                return True
        return False


@dataclass(frozen=True)
class SphereObstacle:
    """Convex 3D blocker."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    def blocks(self, p: np.ndarray, q: np.ndarray) -> bool:
        p = np.asarray(p, dtype=float)
        d = np.asarray(q, dtype=float) - p
        len_sq = float(d @ d)
        if len_sq == 0.0:
            return bool(np.linalg.norm(p - self.center) <= self.radius)
        s = float(np.clip((self.center - p) @ d / len_sq, 0.0, 1.0))
        closest = p + s * d
        return bool(np.linalg.norm(closest - self.center) <= self.radius)


def _segments_intersect(a, b, c, d) -> bool:
    def orient(p, q, r):
        val = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
        if abs(val) < 1e-12:
            return 0
        return 1 if val > 0 else 2

    def on_segment(p, q, r):
        return (min(p[0], r[0]) - 1e-12 <= q[0] <= max(p[0], r[0]) + 1e-12
                and min(p[1], r[1]) - 1e-12 <= q[1] <= max(p[1], r[1]) + 1e-12)

    o1, o2 = orient(a, b, c), orient(a, b, d)
    o3, o4 = orient(c, d, a), orient(c, d, b)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_segment(a, c, b):
        return True
    if o2 == 0 and on_segment(a, d, b):
        return True
    if o3 == 0 and on_segment(c, a, d):
        return True
    if o4 == 0 and on_segment(c, b, d):
        return True
    return False


def segment_is_nlos(p: np.ndarray, q: np.ndarray, obstacles) -> bool:
    return any(o.blocks(p, q) for o in obstacles)


# --- sensor sampling ---------------------------------------------------------

@dataclass(frozen=True)
class SensorNoise:
    accel_std: float = 0.02        # m/s^2, raw IMU
    gyro_std: float = 0.002        # rad/s
    mag_std: float = 0.005         # gauss
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))


def sample_imu(trajectory, t: float, noise: SensorNoise,
               rng: np.random.Generator | None = None,
               gravity: GravityModel = GravityModel(),
               mag_world: np.ndarray = DEFAULT_MAG_WORLD) -> ImuSample:
    """One raw 9-DoF reading from ground truth at time t.

    The accelerometer reads the body-frame specific force (kinematic
    acceleration plus the gravity reaction), the gyro the body angular rate,
    the magnetometer the body-frame earth field.  Pass rng=None for a
    noiseless sample.
    """
    q = trajectory.orientation(t)
    q_inv = quat_inverse(q)
    accel = quat_rotate(q_inv, trajectory.acceleration(t) + gravity.vec)
    gyro = trajectory.angular_velocity(t).astype(float).copy()
    mag = quat_rotate(q_inv, mag_world)
    accel = accel + noise.accel_bias
    gyro = gyro + noise.gyro_bias
    if rng is not None:
        accel = accel + noise.accel_std * rng.standard_normal(3)
        gyro = gyro + noise.gyro_std * rng.standard_normal(3)
        mag = mag + noise.mag_std * rng.standard_normal(3)
    return ImuSample(timestamp=t, accel=accel, gyro=gyro, mag=mag)


MODEL_MAX_RANGE = 8.0  # affine range model validity limit, meters


def simulate_range(pos_i: np.ndarray, pos_j: np.ndarray, obstacles,
                   calibration: UwbCalibration, rng: np.random.Generator,
                   sigma_los: float, sigma_nlos: float,
                   nlos_bias: float = 0.15, forced_nlos: bool = False
                   ) -> tuple[float, bool]:
    """One resolved raw range between two positions: a*d + b + noise.

    Returns (raw_distance, out_of_model).  The NLOS branch (obstacle in the
    way, or forced for persistently occluded pairs) adds a positive bias and
    uses the inflated sigma.  Beyond 8 m the measurement is still produced
    but flagged out-of-model.
    """
    d = float(np.linalg.norm(np.asarray(pos_j) - np.asarray(pos_i)))
    nlos = forced_nlos or segment_is_nlos(pos_i, pos_j, obstacles)
    sigma = sigma_nlos if nlos else sigma_los
    bias = nlos_bias if nlos else 0.0
    raw = calibration.apply(d) + bias + sigma * rng.standard_normal()
    return raw, d >= MODEL_MAX_RANGE


# --- scenario configuration ---------------------------------------------------

@dataclass(frozen=True)
class NodeSpec:
    node_id: int
    trajectory: dict
    activate: float = 0.0
    deactivate: float | None = None


@dataclass(frozen=True)
class ChannelParams:
    sigma_los: float = 0.116
    sigma_nlos: float = 0.275
    nlos_bias: float = 0.15
    cal_a: float = 1.0
    cal_b: float = 0.0
    drop_prob: float = 0.0
    clock_offset_range: float = 1.0   # per-node offset ~ U(-r, r), seconds


@dataclass(frozen=True)
class SensorParams:
    imu_rate: float = 100.0
    q_cov_deg: float = 1.0            # orientation noise std per axis, degrees
    a_cov_std: float = 0.05           # accel estimate noise std per axis, m/s^2


@dataclass
class ScenarioConfig:
    name: str
    duration: float
    seed: int
    nodes: tuple[NodeSpec, ...]
    protocol: ProtocolConfig
    channel: ChannelParams
    sensors: SensorParams
    pipeline: PipelineParams
    trajectories: dict = field(repr=False, compare=False, default_factory=dict)
    obstacles: tuple = ()
    nlos_pairs: frozenset = frozenset()
    bootstrap_alignment: str = "truth"    # "truth" or "free"
    truth_rate: float = 100.0

    @property
    def node_ids(self) -> list[int]:
        return [n.node_id for n in self.nodes]


def _validate(cond: bool, errors: list[str], path: str, message: str) -> None:
    if not cond:
        errors.append(f"{path}: {message}")


def _build_trajectory(spec: dict, path: str, errors: list[str]):
    kind = spec.get("kind")
    try:
        if kind == "waypoints":
            times = np.asarray(spec["times"], dtype=float)
            points = np.asarray(spec["points"], dtype=float)
            return WaypointTrajectory(times, points,
                                      loop=bool(spec.get("loop", True)),
                                      orientation=spec.get("orientation", "heading"),
                                      ramp_time=float(spec.get("ramp_time", 0.0)))
        if kind == "articulated":
            base = _build_trajectory(spec["base"], path + ".base", errors)
            if base is None:
                return None
            return ArticulatedTrajectory(
                base, np.asarray(spec["offset"], dtype=float),
                swing_axis=np.asarray(spec.get("swing_axis", [0, 0, 0]), dtype=float),
                swing_amplitude=float(spec.get("swing_amplitude", 0.0)),
                swing_freq_hz=float(spec.get("swing_freq_hz", 1.0)),
                swing_phase=float(spec.get("swing_phase", 0.0)))
        if kind == "file":
            return file_trajectory(spec["path"], loop=bool(spec.get("loop", False)),
                                   orientation=spec.get("orientation", "fixed"))
        errors.append(f"{path}.kind: unknown trajectory kind {kind!r}")
    except (KeyError, ValueError, ConfigError) as exc:
        errors.append(f"{path}: {exc}")
    return None


def load_scenario(path: str | Path) -> ScenarioConfig:
    """Parse and validate a YAML scenario; raises ConfigError listing every
    offending field path."""
    raw = yaml.safe_load(Path(path).read_text())
    return scenario_from_dict(raw, source=str(path))


def scenario_from_dict(raw: dict, source: str = "<dict>") -> ScenarioConfig:
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")

    name = raw.get("name", "unnamed")
    duration = float(raw.get("duration", 0.0))
    _validate(duration > 0, errors, "duration", "must be positive")
    seed = int(raw.get("seed", 0))

    nodes = []
    ids_seen = set()
    for k, nd in enumerate(raw.get("nodes", [])):
        path = f"nodes[{k}]"
        nid = nd.get("id")
        _validate(isinstance(nid, int) and nid >= 0, errors, path + ".id",
                  "must be a non-negative integer")
        if nid in ids_seen:
            errors.append(f"{path}.id: duplicate id {nid}")
        ids_seen.add(nid)
        traj = _build_trajectory(nd.get("trajectory", {}), path + ".trajectory",
                                 errors)
        activate = float(nd.get("activate", 0.0))
        deactivate = nd.get("deactivate")
        deactivate = None if deactivate is None else float(deactivate)
        if traj is not None and isinstance(nid, int):
            nodes.append((NodeSpec(nid, nd.get("trajectory", {}), activate,
                                   deactivate), traj))
    _validate(len(nodes) >= 2, errors, "nodes", "need at least 2 valid nodes")

    proto_raw = raw.get("protocol", {})
    try:
        protocol = ProtocolConfig(
            t_msg=float(proto_raw.get("t_msg", ProtocolConfig.t_msg)),
            watchdog_timeout=float(proto_raw.get("watchdog_timeout", 0.7)),
            expiry_rounds=float(proto_raw.get("expiry_rounds", 3.0)),
            round_overhead=float(proto_raw.get("round_overhead", 0.0)))
    except ValueError as exc:
        errors.append(f"protocol: {exc}")
        protocol = ProtocolConfig()

    ch_raw = raw.get("channel", {})
    channel = ChannelParams(
        sigma_los=float(ch_raw.get("sigma_los", 0.116)),
        sigma_nlos=float(ch_raw.get("sigma_nlos", 0.275)),
        nlos_bias=float(ch_raw.get("nlos_bias", 0.15)),
        cal_a=float(ch_raw.get("cal_a", 1.0)),
        cal_b=float(ch_raw.get("cal_b", 0.0)),
        drop_prob=float(ch_raw.get("drop_prob", 0.0)),
        clock_offset_range=float(ch_raw.get("clock_offset_range", 1.0)))
    _validate(channel.sigma_los > 0, errors, "channel.sigma_los", "must be > 0")
    _validate(channel.sigma_nlos >= channel.sigma_los, errors,
              "channel.sigma_nlos", "must be >= sigma_los")
    _validate(0.8 <= channel.cal_a <= 1.2, errors, "channel.cal_a",
              "must lie in [0.8, 1.2]")
    _validate(0.0 <= channel.drop_prob < 1.0, errors, "channel.drop_prob",
              "must lie in [0, 1)")

    se_raw = raw.get("sensors", {})
    sensors = SensorParams(
        imu_rate=float(se_raw.get("imu_rate", 100.0)),
        q_cov_deg=float(se_raw.get("q_cov_deg", 1.0)),
        a_cov_std=float(se_raw.get("a_cov_std", 0.05)))
    _validate(sensors.imu_rate > 0, errors, "sensors.imu_rate", "must be > 0")
    _validate(sensors.a_cov_std >= 0, errors, "sensors.a_cov_std", "must be >= 0")

    nlos_pairs = set()
    for k, p in enumerate(raw.get("nlos_pairs", [])):
        if (not isinstance(p, (list, tuple)) or len(p) != 2
                or p[0] == p[1] or not all(q in ids_seen for q in p)):
            errors.append(f"nlos_pairs[{k}]: must name two distinct node ids")
            continue
        nlos_pairs.add((min(p), max(p)))

    pl_raw = raw.get("pipeline", {})
    pipeline = PipelineParams(
        blend=float(pl_raw.get("blend", 0.5)),
        init_rounds=int(pl_raw.get("init_rounds", 10)),
        horizon=float(pl_raw.get("horizon", 0.1)),
        gate_scale=float(pl_raw.get("gate_scale", 3.0)),
        gate_window=int(pl_raw.get("gate_window", 5)),
        lpf_cutoff_hz=float(pl_raw.get("lpf_cutoff_hz", 2.0)),
        refine_inflation=float(pl_raw.get("refine_inflation", 1e-4)),
        mds_enabled=bool(pl_raw.get("mds_enabled", True)),
        sigma_d_los=float(pl_raw.get("sigma_d_los", channel.sigma_los)),
        sigma_d_nlos=float(pl_raw.get("sigma_d_nlos", channel.sigma_nlos)),
        nlos_pairs=frozenset(nlos_pairs),
        planar_ratio=float(pl_raw.get("planar_ratio", 0.01)))
    _validate(0.0 <= pipeline.blend <= 1.0, errors, "pipeline.blend",
              "must lie in [0, 1]")
    _validate(pipeline.init_rounds >= 1, errors, "pipeline.init_rounds",
              "must be >= 1")
    _validate(pipeline.horizon >= 0, errors, "pipeline.horizon", "must be >= 0")

    obstacles = []
    for k, ob in enumerate(raw.get("obstacles", [])):
        path = f"obstacles[{k}]"
        try:
            kind = ob.get("kind", "polygon")
            if kind == "polygon":
                obstacles.append(PolygonObstacle(np.asarray(ob["vertices"],
                                                            dtype=float)))
            elif kind == "sphere":
                obstacles.append(SphereObstacle(np.asarray(ob["center"],
                                                           dtype=float),
                                                float(ob["radius"])))
            else:
                errors.append(f"{path}.kind: unknown obstacle kind {kind!r}")
        except (KeyError, ValueError) as exc:
            errors.append(f"{path}: {exc}")

    bootstrap = raw.get("bootstrap_alignment", "truth")
    _validate(bootstrap in ("truth", "free"), errors, "bootstrap_alignment",
              "must be 'truth' or 'free'")

    if errors:
        raise ConfigError(f"{source}: invalid scenario:\n  " + "\n  ".join(errors))

    return ScenarioConfig(
        name=str(name), duration=duration, seed=seed,
        nodes=tuple(spec for spec, _ in nodes),
        protocol=protocol, channel=channel, sensors=sensors,
        pipeline=pipeline,
        trajectories={spec.node_id: traj for spec, traj in nodes},
        obstacles=tuple(obstacles),
        nlos_pairs=frozenset(nlos_pairs),
        bootstrap_alignment=str(bootstrap),
        truth_rate=float(raw.get("truth_rate", 100.0)))


# --- protocol simulation -----------------------------------------------------

@dataclass
class RoundRecord:
    t: float                       # completion time
    cohort: tuple[int, ...]
    started_at: float


@dataclass
class ProtocolTrace:
    """What the radio layer produced: range events plus timing bookkeeping."""

    range_events: list[RangeEvent] = field(default_factory=list)
    join_events: list[JoinEvent] = field(default_factory=list)
    leave_events: list[LeaveEvent] = field(default_factory=list)
    rounds: list[RoundRecord] = field(default_factory=list)
    requests: list[tuple[float, int, int]] = field(default_factory=list)
    dropped_messages: int = 0
    out_of_model_ranges: int = 0


class _CohortMonitor:
    """Applies the routing-table rules globally to derive join/leave events
    and round completions for the evaluation layer."""

    def __init__(self, protocol: ProtocolConfig):
        self.protocol = protocol
        self.active: dict[int, float] = {}
        self.current_round: set[tuple[int, int]] = set()
        self.round_start = 0.0

    def round_period(self) -> float:
        n = max(len(self.active), 1)
        return n * self.protocol.t_msg + self.protocol.round_overhead

    def heard(self, node: int, t: float, trace: ProtocolTrace) -> None:
        if node not in self.active:
            trace.join_events.append(JoinEvent(t=t, node=node))
        self.active[node] = t
        self.expire(t, trace)

    def expire(self, t: float, trace: ProtocolTrace) -> None:
        max_age = self.protocol.expiry_rounds * self.round_period()
        for node in [n for n, last in self.active.items() if t - last > max_age]:
            del self.active[node]
            trace.leave_events.append(LeaveEvent(t=t, node=node))
            self.current_round = {p for p in self.current_round if node not in p}

    def range_seen(self, pair: tuple[int, int], t: float,
                   trace: ProtocolTrace) -> None:
        if not self.current_round:
            self.round_start = t
        self.current_round.add(pair)
        members = sorted(self.active)
        needed = {(i, j) for i, j in itertools.combinations(members, 2)}
        if needed and self.current_round >= needed:
            trace.rounds.append(RoundRecord(t=t, cohort=tuple(members),
                                            started_at=self.round_start))
            self.current_round = set()


def simulate_protocol(config: ScenarioConfig) -> ProtocolTrace:
    """Run the ranging protocol over the scenario's radio channel.

    Event-driven: node timers and message deliveries interleave on one heap.
    Reception timestamps carry the ranging noise (see module docstring), so
    the estimates the nodes resolve follow the affine range model.
    """
    trajectories = config.trajectories
    cal = UwbCalibration(a=config.channel.cal_a, b=config.channel.cal_b,
                         sigma_d=config.channel.sigma_los)
    seed_root = np.random.SeedSequence(config.seed)
    offsets_rng, channel_rng = [np.random.default_rng(s)
                                for s in seed_root.spawn(2)]

    ids = sorted(config.node_ids)
    offset_range = config.channel.clock_offset_range
    offsets = {nid: float(offsets_rng.uniform(-offset_range, offset_range))
               for nid in ids}
    nodes = {nid: NodeProtocol(nid, config.protocol, clock_offset=offsets[nid])
             for nid in ids}
    specs = {n.node_id: n for n in config.nodes}

    trace = ProtocolTrace()
    monitor = _CohortMonitor(config.protocol)

    counter = itertools.count()
    heap: list = []

    def schedule(t: float, kind: str, payload) -> None:
        heappush(heap, (t, next(counter), kind, payload))

    for nid in ids:
        schedule(specs[nid].activate, "activate", nid)
        if specs[nid].deactivate is not None:
            schedule(specs[nid].deactivate, "deactivate", nid)

    def is_listening(nid: int, t: float) -> bool:
        spec = specs[nid]
        return spec.activate <= t and (spec.deactivate is None
                                       or t < spec.deactivate)

    def dispatch(nid: int, event, now: float) -> None:
        result = nodes[nid].step(event, now)
        for timer in result.timers:
            schedule(now + timer.delay, "timer", (nid, timer.tag, timer.token))
        for msg in result.messages:
            if msg.kind.value == "request":
                trace.requests.append((now, nid, msg.sequence))
            transmit(nid, msg, now)
        for est in result.estimates:
            trace.range_events.append(RangeEvent(t=est.timestamp, estimate=est))
            monitor.range_seen(est.pair, est.timestamp, trace)

    def transmit(sender: int, msg, now: float) -> None:
        monitor.heard(sender, now, trace)
        pos_s = trajectories[sender].position(now)
        for other in ids:
            if other == sender or not is_listening(other, now):
                continue
            if config.channel.drop_prob > 0 and (
                    channel_rng.random() < config.channel.drop_prob):
                trace.dropped_messages += 1
                continue
            pos_r = trajectories[other].position(now)
            d_true = float(np.linalg.norm(pos_r - pos_s))
            nlos = ((min(sender, other), max(sender, other))
                    in config.nlos_pairs
                    or segment_is_nlos(pos_s, pos_r, config.obstacles))
            sigma = (config.channel.sigma_nlos if nlos
                     else config.channel.sigma_los)
            bias = config.channel.nlos_bias if nlos else 0.0
            # per-leg sigma sqrt(2) larger so the two-leg average has sigma
            d_meas = (cal.apply(d_true) + bias
                      + sigma * np.sqrt(2.0) * channel_rng.standard_normal())
            if d_true >= MODEL_MAX_RANGE:
                trace.out_of_model_ranges += 1
            arrival = now + d_true / SPEED_OF_LIGHT
            rx_local = arrival + (d_meas - d_true) / SPEED_OF_LIGHT + offsets[other]
            schedule(arrival, "deliver", (other, msg, rx_local))

    while heap:
        now, _, kind, payload = heappop(heap)
        if now > config.duration:
            break
        if kind == "activate":
            dispatch(payload, Activate(), now)
        elif kind == "deactivate":
            dispatch(payload, Deactivate(), now)
        elif kind == "timer":
            nid, tag, token = payload
            if is_listening(nid, now):
                dispatch(nid, TimerFired(tag=tag, token=token), now)
        elif kind == "deliver":
            nid, msg, rx_local = payload
            if is_listening(nid, now):
                dispatch(nid, MessageReceived(message=msg, rx_timestamp=rx_local),
                         now)
        monitor.expire(now, trace)

    return trace


# --- full scenario run ---------------------------------------------------------

def generate_sensor_events(config: ScenarioConfig) -> tuple[list, list]:
    """Per-node orientation/acceleration estimates plus ground-truth samples."""
    trajectories = config.trajectories
    seed_root = np.random.SeedSequence((config.seed, 1))
    ids = sorted(config.node_ids)
    rngs = {nid: np.random.default_rng(s)
            for nid, s in zip(ids, seed_root.spawn(len(ids)))}
    specs = {n.node_id: n for n in config.nodes}

    q_cov = np.eye(3) * np.radians(config.sensors.q_cov_deg) ** 2
    a_cov = np.eye(3) * config.sensors.a_cov_std ** 2

    estimates = []
    dt = 1.0 / config.sensors.imu_rate
    n_steps = int(np.floor(config.duration / dt))
    for step in range(n_steps + 1):
        t = step * dt
        for nid in ids:
            spec = specs[nid]
            if t < spec.activate or (spec.deactivate is not None
                                     and t >= spec.deactivate):
                continue
            traj = trajectories[nid]
            est = simulate_local_estimate(traj.orientation(t),
                                          traj.acceleration(t),
                                          q_cov, a_cov, rngs[nid], timestamp=t)
            estimates.append(LocalEstimateEvent(t=t, node=nid, estimate=est))

    truth = []
    dt_truth = 1.0 / config.truth_rate
    n_truth = int(np.floor(config.duration / dt_truth))
    for step in range(n_truth + 1):
        t = step * dt_truth
        positions = {nid: trajectories[nid].position(t) for nid in ids
                     if specs[nid].activate <= t
                     and (specs[nid].deactivate is None
                          or t < specs[nid].deactivate)}
        if positions:
            truth.append(TruthEvent(t=t, positions=positions))
    return estimates, truth


_KIND_ORDER = {JoinEvent: 0, LocalEstimateEvent: 1, RangeEvent: 2,
               LeaveEvent: 3, TruthEvent: 4}


def merge_events(*streams) -> list:
    """Single time-ordered bus; ties break by kind then emission order."""
    tagged = []
    for stream in streams:
        for k, ev in enumerate(stream):
            tagged.append((ev.t, _KIND_ORDER[type(ev)], k, ev))
    tagged.sort(key=lambda item: item[:3])
    return [item[3] for item in tagged]


@dataclass
class SimulationResult:
    config: ScenarioConfig
    events: list
    truth: list
    trace: ProtocolTrace
    snapshots: list
    metrics: "object"


def simulate_world(config: ScenarioConfig) -> tuple[list, list, ProtocolTrace]:
    """Protocol plus sensors, merged onto one bus: (events, truth, trace)."""
    trace = simulate_protocol(config)
    estimates, truth = generate_sensor_events(config)
    events = merge_events(trace.join_events, estimates, trace.range_events,
                          trace.leave_events, truth)
    return events, truth, trace


def build_pipeline(config: ScenarioConfig,
                   disable_mds: bool = False) -> ConstellationPipeline:
    params = config.pipeline
    if disable_mds:
        params = replace(params, mds_enabled=False)
    cal = UwbCalibration(a=config.channel.cal_a, b=config.channel.cal_b,
                         sigma_d=config.channel.sigma_los)
    reference = None
    if config.bootstrap_alignment == "truth":
        trajectories = config.trajectories

        def reference(t: float, ids: list[int]) -> dict[int, np.ndarray]:
            return {nid: trajectories[nid].position(t) for nid in ids}

    return ConstellationPipeline(params, cal, bootstrap_reference=reference)


def run_pipeline(config: ScenarioConfig, events: list, truth: list,
                 disable_mds: bool = False):
    """Track one variant over a prebuilt event bus; returns (snapshots, metrics,
    pipeline).  Lets both variants share one world simulation."""
    pipeline = build_pipeline(config, disable_mds)
    snapshots = pipeline.run(events)
    variant = "ekf" if disable_mds else "ekf+mds"
    metrics = compute_metrics(snapshots, truth, variant=variant)
    return snapshots, metrics, pipeline


def run_scenario(config: ScenarioConfig,
                 disable_mds: bool = False) -> SimulationResult:
    """World simulation plus tracking pipeline, end to end.

    ``disable_mds`` turns off the per-round refinement only; initialization
    still embeds the first measured distances (there is no other way to get
    an initial relative position from ranges).
    """
    events, truth, trace = simulate_world(config)
    snapshots, metrics, pipeline = run_pipeline(config, events, truth, disable_mds)
    pipeline.stats["dropped_messages"] = trace.dropped_messages
    return SimulationResult(config=config, events=events, truth=truth,
                            trace=trace, snapshots=snapshots, metrics=metrics)


__all__ = [
    "ConfigError", "WaypointTrajectory", "ArticulatedTrajectory",
    "file_trajectory", "PolygonObstacle", "SphereObstacle", "segment_is_nlos",
    "SensorNoise", "sample_imu", "simulate_range", "MODEL_MAX_RANGE",
    "NodeSpec", "ChannelParams", "SensorParams", "ScenarioConfig",
    "load_scenario", "scenario_from_dict",
    "ProtocolTrace", "RoundRecord", "simulate_protocol",
    "generate_sensor_events", "merge_events", "SimulationResult",
    "simulate_world", "build_pipeline", "run_pipeline", "run_scenario",
]
