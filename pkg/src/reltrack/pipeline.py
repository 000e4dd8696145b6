"""Constellation pipeline: event bus, filter lifecycle, refinement, metrics.

The pipeline consumes a single time-ordered stream of events (per-node
orientation/acceleration estimates, resolved pairwise ranges, cohort joins
and leaves) behind a fixed delay horizon, maintains one pair filter per
unordered pair of initialized nodes, and publishes a relative layout snapshot
once per completed ranging round.

Lifecycle: a joining node is held pending while its first ``init_rounds``
range measurements per pair accumulate; those are averaged into a distance
matrix, embedded with classical MDS, registered onto the existing
constellation (or onto the configured bootstrap reference when the pipeline
is starting empty), and only then do its pair filters spawn, with zero
initial velocity and identity covariance.  A leaving node's filters are
destroyed immediately.

After every completed round the current distance estimates are re-embedded
and the refined coordinates blended back into each filter's relative
position, which is what keeps the individual filters spatially consistent.

The published layout anchors the smallest active node ID at the origin; the
world heading is whatever the orientation estimates established, so pairwise
quantities can be compared directly against ground-truth differences.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from bisect import bisect_left
from dataclasses import dataclass, field

import numpy as np

from .calibration import UwbCalibration
from .geometry import quat_compose, quat_identity, quat_inverse, quat_mean
from .mds import (
    DegenerateGeometryError,
    align_to_reference,
    classical_mds,
    distance_matrix_from_pairs,
    refine_pair_states,
)
from .orientation import LocalEstimate
from .pair_filter import (
    MAX_DT,
    ControlInput,
    OutlierGate,
    PairFilter,
    initial_state,
    sigma_u_from_covs,
)
from .ranging import RangeEstimate

logger = logging.getLogger(__name__)


# --- bus events --------------------------------------------------------------

@dataclass(frozen=True)
class LocalEstimateEvent:
    t: float
    node: int
    estimate: LocalEstimate


@dataclass(frozen=True)
class RangeEvent:
    t: float
    estimate: RangeEstimate


@dataclass(frozen=True)
class JoinEvent:
    t: float
    node: int


@dataclass(frozen=True)
class LeaveEvent:
    t: float
    node: int


@dataclass(frozen=True)
class TruthEvent:
    t: float
    positions: dict[int, np.ndarray]


class TimelineBuffer:
    """Bounded-lateness reordering buffer.

    Events are released in event-time order once the watermark (the feeder's
    notion of now) has passed their timestamp by ``horizon`` seconds.  An
    event arriving after its release point would have to be applied out of
    order, so it is dropped and counted instead.
    """

    def __init__(self, horizon: float):
        if horizon < 0:
            raise ValueError("horizon must be non-negative")
        self.horizon = horizon
        self.watermark = -np.inf
        self.late_events = 0
        self._seq = itertools.count()
        self._heap: list[tuple[float, int, object]] = []

    def push(self, event) -> bool:
        """Queue an event; False if it missed the horizon and was dropped."""
        if event.t + self.horizon < self.watermark:
            self.late_events += 1
            return False
        heapq.heappush(self._heap, (event.t, next(self._seq), event))
        return True

    def advance(self, now: float) -> list:
        """Move the watermark forward and release everything due."""
        if now > self.watermark:
            self.watermark = now
        released = []
        while self._heap and self._heap[0][0] + self.horizon <= self.watermark:
            released.append(heapq.heappop(self._heap)[2])
        return released

    def flush(self) -> list:
        released = [heapq.heappop(self._heap)[2] for _ in range(len(self._heap))]
        self.watermark = np.inf
        return released


# --- pipeline ----------------------------------------------------------------

@dataclass(frozen=True)
class PipelineParams:
    blend: float = 0.5              # refinement blend factor
    init_rounds: int = 10           # measurements per pair before a filter spawns
    horizon: float = 0.1            # delay horizon, seconds
    gate_scale: float = 3.0
    gate_window: int = 5
    lpf_cutoff_hz: float = 2.0
    refine_inflation: float = 1e-4  # added to P position diagonal per refinement
    mds_enabled: bool = True
    sigma_d_los: float = 0.116
    sigma_d_nlos: float = 0.275
    nlos_pairs: frozenset[tuple[int, int]] = frozenset()
    planar_ratio: float = 0.01

    def pair_sigma(self, pair: tuple[int, int]) -> float:
        return self.sigma_d_nlos if pair in self.nlos_pairs else self.sigma_d_los


@dataclass(frozen=True)
class LayoutSnapshot:
    t: float
    positions: dict[int, np.ndarray]            # anchor at origin
    pairs: dict[tuple[int, int], np.ndarray]    # relative position estimates

    def pair_distance(self, pair: tuple[int, int]) -> float:
        return float(np.linalg.norm(self.pairs[pair]))


@dataclass
class _PendingNode:
    joined_at: float
    range_samples: dict[tuple[int, int], list[float]] = field(default_factory=dict)
    quat_samples: dict[tuple[int, int], list[np.ndarray]] = field(default_factory=dict)


class ConstellationPipeline:
    """Event-driven relative tracking over one cohort of nodes."""

    def __init__(self, params: PipelineParams, calibration: UwbCalibration,
                 bootstrap_reference=None):
        """``bootstrap_reference`` pins the otherwise unobservable rigid-body
        gauge of the very first embedding: a dict of node positions, or a
        callable (t, ids) -> dict evaluated at bootstrap time.  None keeps the
        embedding's own principal-axes frame.  Nodes joining later are always
        aligned to the constellation that already exists."""
        self.params = params
        self.calibration = calibration
        self.bootstrap_reference = bootstrap_reference
        self.nodes: list[int] = []                 # initialized, sorted
        self.pending: dict[int, _PendingNode] = {}
        self.filters: dict[tuple[int, int], PairFilter] = {}
        self.latest: dict[int, LocalEstimate] = {}
        self.snapshots: list[LayoutSnapshot] = []
        self._round_pairs: set[tuple[int, int]] = set()
        self.stats = {"coasted_predicts": 0, "skipped_refinements": 0,
                      "rounds": 0, "rejected_ranges": 0, "out_of_model_ranges": 0}

    # -- event entry ----------------------------------------------------------

    def process(self, event) -> None:
        if isinstance(event, LocalEstimateEvent):
            self._on_estimate(event)
        elif isinstance(event, RangeEvent):
            self._on_range(event)
        elif isinstance(event, JoinEvent):
            self.on_node_join(event.node, event.t)
        elif isinstance(event, LeaveEvent):
            self.on_node_leave(event.node)
        elif isinstance(event, TruthEvent):
            pass  # ground truth is for evaluation, not for the tracker
        else:
            raise TypeError(f"unknown pipeline event {event!r}")

    def run(self, events, horizon: float | None = None) -> list[LayoutSnapshot]:
        """Feed an iterable of events through the delay horizon, in arrival order."""
        buffer = TimelineBuffer(self.params.horizon if horizon is None else horizon)
        for event in events:
            buffer.push(event)
            for released in buffer.advance(event.t):
                self.process(released)
        for released in buffer.flush():
            self.process(released)
        self.stats["late_events"] = buffer.late_events
        return self.snapshots

    # -- lifecycle ------------------------------------------------------------

    def on_node_join(self, node: int, t: float) -> None:
        if node in self.pending or node in self.nodes:
            return  # duplicate join is a no-op
        self.pending[node] = _PendingNode(joined_at=t)

    def on_node_leave(self, node: int) -> None:
        self.pending.pop(node, None)
        if node in self.nodes:
            self.nodes.remove(node)
        self.filters = {p: f for p, f in self.filters.items() if node not in p}
        self.latest.pop(node, None)
        self._round_pairs = {p for p in self._round_pairs if node not in p}
        for pend in self.pending.values():
            pend.range_samples = {p: s for p, s in pend.range_samples.items()
                                  if node not in p}
            pend.quat_samples = {p: s for p, s in pend.quat_samples.items()
                                 if node not in p}

    # -- estimates ------------------------------------------------------------

    def _on_estimate(self, event: LocalEstimateEvent) -> None:
        self.latest[event.node] = event.estimate
        for pair, f in self.filters.items():
            if event.node not in pair:
                continue
            self._advance_filter(f, event.t)

    def _advance_filter(self, f: PairFilter, t: float) -> None:
        """Predict the filter forward to t using the latest per-node inputs."""
        i, j = f.pair
        est_i, est_j = self.latest.get(i), self.latest.get(j)
        if est_i is None or est_j is None:
            self.stats["coasted_predicts"] += 1
            return
        remaining = t - f.state.t
        if remaining <= 0:
            return
        sigma_u = sigma_u_from_covs(est_i.a_cov, est_j.a_cov)
        while remaining > 1e-12:
            dt = min(remaining, MAX_DT)
            f.predict(ControlInput(a_i=est_i.a_hat, a_j=est_j.a_hat,
                                   q_i=est_i.q_hat, q_j=est_j.q_hat, dt=dt),
                      sigma_u)
            remaining -= dt

    # -- ranges ---------------------------------------------------------------

    def _on_range(self, event: RangeEvent) -> None:
        est = event.estimate
        pair = est.pair
        d_cal = self.calibration.correct(est.distance_raw)
        if d_cal < 0:
            d_cal = 0.0

        if pair[0] in self.pending or pair[1] in self.pending:
            self._accumulate_init(pair, d_cal, event.t)
            return
        f = self.filters.get(pair)
        if f is None:
            return  # range between unknown nodes; join event not seen yet
        self._advance_filter(f, event.t)
        if not f.observe_range(d_cal, event.t):
            self.stats["rejected_ranges"] += 1
        # cadence tracks the protocol round, not gate outcomes
        self._round_pairs.add(pair)
        if self._round_pairs >= set(self.filters):
            self._complete_round(event.t)

    def _complete_round(self, t: float) -> None:
        self._round_pairs.clear()
        self.stats["rounds"] += 1
        if self.params.mds_enabled and len(self.nodes) >= 3:
            self._refine(t)
        self._publish(t)

    # -- refinement -----------------------------------------------------------

    def _ekf_layout(self) -> dict[int, np.ndarray]:
        """Positions implied by the filters, anchored on the smallest node."""
        anchor = self.nodes[0]
        layout = {anchor: np.zeros(3)}
        for node in self.nodes[1:]:
            layout[node] = self.filters[(anchor, node)].state.x.copy()
        return layout

    def _refine(self, t: float) -> None:
        ids = list(self.nodes)
        distances = {p: f.distance() for p, f in self.filters.items()}
        D = distance_matrix_from_pairs(ids, distances)
        try:
            solution = classical_mds(D, planar_ratio=self.params.planar_ratio)
        except DegenerateGeometryError as exc:
            self.stats["skipped_refinements"] += 1
            logger.warning("refinement skipped at t=%.3f: %s", t, exc)
            return
        reference = self._ekf_layout()
        ref = np.array([reference[n] for n in ids])
        _, aligned = align_to_reference(solution.coords, ref)
        positions = {n: aligned[k] for k, n in enumerate(ids)}
        refine_pair_states(self.filters, positions, self.params.blend,
                           self.params.refine_inflation)

    def _publish(self, t: float) -> None:
        if not self.nodes:
            return
        layout = self._ekf_layout()
        pairs = {p: f.state.x.copy() for p, f in self.filters.items()}
        self.snapshots.append(LayoutSnapshot(t=t, positions=layout, pairs=pairs))

    # -- initialization -------------------------------------------------------

    def _accumulate_init(self, pair: tuple[int, int], d_cal: float,
                         t: float) -> None:
        for node in pair:
            pend = self.pending.get(node)
            if pend is None:
                continue
            pend.range_samples.setdefault(pair, []).append(d_cal)
            est_i, est_j = self.latest.get(pair[0]), self.latest.get(pair[1])
            if est_i is not None and est_j is not None:
                q_ij = quat_compose(quat_inverse(est_i.q_hat), est_j.q_hat)
                pend.quat_samples.setdefault(pair, []).append(q_ij)
        self._try_initialize(t)

    def _pair_mean(self, samples: dict[tuple[int, int], list[float]],
                   pair: tuple[int, int]) -> float:
        return float(np.mean(samples[pair][:self.params.init_rounds]))

    def _try_initialize(self, t: float) -> None:
        k = self.params.init_rounds
        if not self.nodes:
            self._try_bootstrap(t, k)
            return
        # nodes joining an existing constellation initialize one at a time
        for node in sorted(self.pending):
            pend = self.pending[node]
            needed = [(min(node, w), max(node, w)) for w in self.nodes]
            if all(len(pend.range_samples.get(p, [])) >= k for p in needed):
                self._initialize_joiner(node, pend, t)

    def _try_bootstrap(self, t: float, k: int) -> None:
        ids = sorted(self.pending)
        if len(ids) < 3:
            return
        needed = [(i, j) for i, j in itertools.combinations(ids, 2)]
        counts = {p: len(self.pending[p[0]].range_samples.get(p, [])) for p in needed}
        if not all(c >= k for c in counts.values()):
            return
        means = {p: self._pair_mean(self.pending[p[0]].range_samples, p)
                 for p in needed}
        D = distance_matrix_from_pairs(ids, means)
        try:
            solution = classical_mds(D, planar_ratio=self.params.planar_ratio)
        except DegenerateGeometryError as exc:
            logger.warning("bootstrap embedding failed: %s", exc)
            return
        coords = solution.coords
        if self.bootstrap_reference is not None:
            ref_map = (self.bootstrap_reference(t, ids)
                       if callable(self.bootstrap_reference)
                       else self.bootstrap_reference)
            ref = np.array([ref_map[n] for n in ids])
            _, coords = align_to_reference(coords, ref)
        positions = {n: coords[idx] for idx, n in enumerate(ids)}
        for pair in needed:
            self._spawn_filter(pair, positions[pair[1]] - positions[pair[0]],
                               self.pending[pair[0]].quat_samples.get(pair), t)
        self.nodes = ids
        self.pending.clear()
        logger.info("bootstrap: %d nodes initialized at t=%.3f", len(ids), t)

    def _initialize_joiner(self, node: int, pend: _PendingNode, t: float) -> None:
        ids = sorted(self.nodes + [node])
        existing = self._ekf_layout()
        distances = {p: f.distance() for p, f in self.filters.items()}
        for w in self.nodes:
            pair = (min(node, w), max(node, w))
            distances[pair] = self._pair_mean(pend.range_samples, pair)
        D = distance_matrix_from_pairs(ids, distances)
        try:
            solution = classical_mds(D, planar_ratio=self.params.planar_ratio)
        except DegenerateGeometryError as exc:
            logger.warning("join embedding failed for node %d: %s", node, exc)
            return
        ref = np.array([existing.get(n, np.zeros(3)) for n in ids])
        weights = np.array([0.0 if n == node else 1.0 for n in ids])
        _, aligned = align_to_reference(solution.coords, ref, weights)
        positions = {n: aligned[idx] for idx, n in enumerate(ids)}
        for w in self.nodes:
            pair = (min(node, w), max(node, w))
            self._spawn_filter(pair, positions[pair[1]] - positions[pair[0]],
                               pend.quat_samples.get(pair), t)
        self.nodes = ids
        del self.pending[node]
        logger.info("node %d initialized at t=%.3f", node, t)

    def _spawn_filter(self, pair: tuple[int, int], x0: np.ndarray,
                      quats: list[np.ndarray] | None, t: float) -> None:
        k = self.params.init_rounds
        q0 = quat_mean(np.array(quats[:k])) if quats else quat_identity()
        gate = OutlierGate(sigma_d=self.params.pair_sigma(pair),
                           threshold_scale=self.params.gate_scale,
                           window=self.params.gate_window,
                           lpf_cutoff_hz=self.params.lpf_cutoff_hz)
        self.filters[pair] = PairFilter(pair, initial_state(x0, q0, t), gate)


# --- metrics -----------------------------------------------------------------

@dataclass
class MetricsReport:
    variant: str
    rmse: float
    per_pair_rmse: dict[tuple[int, int], float]
    n_snapshots: int
    duration: float
    mean_frequency: float
    windowed_rmse: list[tuple[float, float]]
    misaligned_truth: int

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "rmse_m": self.rmse,
            "per_pair_rmse_m": {f"{i}-{j}": v
                                for (i, j), v in sorted(self.per_pair_rmse.items())},
            "snapshots": self.n_snapshots,
            "duration_s": self.duration,
            "mean_frequency_hz": self.mean_frequency,
            "windowed_rmse": [[t, v] for t, v in self.windowed_rmse],
            "misaligned_truth_samples": self.misaligned_truth,
        }


def compute_metrics(snapshots: list[LayoutSnapshot],
                    truth: list[TruthEvent],
                    variant: str = "ekf+mds",
                    window: float = 10.0) -> MetricsReport:
    """Relative-position RMSE of published layouts against ground truth.

    The per-pair error at a snapshot is |x_ij_est - (p_j - p_i)| with truth
    looked up at the nearest sample; lookups farther than one truth period
    are counted as misaligned.  Also reports RMSE over consecutive time
    windows, which is what exposes drift trends.
    """
    if not truth:
        raise ValueError("no ground truth provided")
    truth_ts = [ev.t for ev in truth]
    period = (truth_ts[-1] - truth_ts[0]) / max(len(truth_ts) - 1, 1)

    sq_errors: list[tuple[float, float]] = []
    per_pair: dict[tuple[int, int], list[float]] = {}
    misaligned = 0
    for snap in snapshots:
        idx = bisect_left(truth_ts, snap.t)
        candidates = [c for c in (idx - 1, idx) if 0 <= c < len(truth_ts)]
        best = min(candidates, key=lambda c: abs(truth_ts[c] - snap.t))
        if abs(truth_ts[best] - snap.t) > period + 1e-9:
            misaligned += 1
        positions = truth[best].positions
        for (i, j), x_est in snap.pairs.items():
            if i not in positions or j not in positions:
                continue
            err_sq = float(np.sum((x_est - (positions[j] - positions[i])) ** 2))
            sq_errors.append((snap.t, err_sq))
            per_pair.setdefault((i, j), []).append(err_sq)

    if not sq_errors:
        return MetricsReport(variant, 0.0, {}, len(snapshots), 0.0, 0.0, [], misaligned)

    rmse = float(np.sqrt(np.mean([e for _, e in sq_errors])))
    per_pair_rmse = {p: float(np.sqrt(np.mean(v))) for p, v in per_pair.items()}

    t0, t1 = snapshots[0].t, snapshots[-1].t
    duration = t1 - t0
    windowed = []
    start = t0
    while start < t1:
        bucket = [e for t, e in sq_errors if start <= t < start + window]
        if bucket:
            windowed.append((start + window / 2, float(np.sqrt(np.mean(bucket)))))
        start += window
    freq = len(snapshots) / duration if duration > 0 else 0.0
    return MetricsReport(variant, rmse, per_pair_rmse, len(snapshots),
                         duration, freq, windowed, misaligned)


__all__ = [
    "LocalEstimateEvent", "RangeEvent", "JoinEvent", "LeaveEvent", "TruthEvent",
    "TimelineBuffer", "PipelineParams", "LayoutSnapshot",
    "ConstellationPipeline", "MetricsReport", "compute_metrics",
]
