"""Broadcast single-sided two-way ranging protocol.

Every node runs the same deterministic state machine.  Nodes boot as
initiators, periodically broadcasting ranging requests; hearing any message
signed with a smaller ID demotes a node to responder.  Responders answer each
accepted request in time slots ordered by their position in the shared
routing table, so one request plus n-1 replies forms a complete ranging round
of n * t_msg seconds (plus an optional per-round overhead).

Each message carries, besides its own transmit timestamp, echo entries
(node, rx_timestamp, tx_timestamp) reporting when the sender last heard every
other participant.  A node that finds its own last transmission echoed in an
incoming message of the same round closes a two-way exchange and resolves the
time of flight

    tof = ((t_i_received - t_i_sent) - (t_j_sent - t_j_received)) / 2

where i is the resolving node and j the message sender.  Constant per-device
clock offsets cancel because each clock is only ever differenced against
itself.  Restricting resolution to same-round echoes yields every unordered
pair exactly once per round: the initiator closes its n-1 exchanges, and each
earlier responder closes one exchange per later responder it overhears
(passive listening; responders never address each other directly).

A watchdog timer resets a node to initiator when nothing has been received
for a timeout, which is what recovers the cohort from an initiator dropout.
Nodes unheard for a few rounds are expired from the routing table, shrinking
the round and raising the ranging frequency again.

The state machine is single-threaded and advanced only through
:meth:`NodeProtocol.step`; it never touches a wall clock.  Timers are
requested as (delay, tag, token) triples and must be fed back as
:class:`TimerFired` events by the surrounding event loop; stale tokens are
ignored, which is how rescheduling works.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

SPEED_OF_LIGHT = 299_792_458.0  # m/s


def resolve_tof(t_i_sent: float, t_j_received: float, t_j_sent: float,
                t_i_received: float, noise_floor: float = 1e-9) -> float:
    """Time of flight from the four timestamps of one two-way exchange.

    Device i transmitted at ``t_i_sent`` and received the reply at
    ``t_i_received`` (both on i's clock); device j received at
    ``t_j_received`` and replied at ``t_j_sent`` (both on j's clock).
    Constant clock offsets cancel.  A result more negative than
    ``noise_floor`` cannot come from timestamp noise and is rejected.
    """
    tof = 0.5 * ((t_i_received - t_i_sent) - (t_j_sent - t_j_received))
    if tof < -noise_floor:
        raise ValueError(f"negative time of flight {tof:.3e} s: inconsistent timestamps")
    return tof


def ideal_frequency(n: int, t_msg: float) -> float:
    """Rate at which a full set of pairwise distances is obtained, Hz.

    One round is one request plus n-1 replies, each occupying t_msg.
    """
    if n < 2:
        raise ValueError("ranging needs at least 2 nodes")
    if t_msg <= 0:
        raise ValueError("t_msg must be positive")
    return 1.0 / (t_msg * n)


class MessageKind(Enum):
    REQUEST = "request"
    REPLY = "reply"


class Role(Enum):
    INITIATOR = "initiator"
    RESPONDER = "responder"


class EchoEntry(NamedTuple):
    """When the sender last heard `node`: reception time on the sender's
    clock, transmission time on `node`'s clock (copied from that message)."""

    node: int
    rx_timestamp: float
    tx_timestamp: float


@dataclass(frozen=True)
class RangingMessage:
    sender: int
    kind: MessageKind
    tx_timestamp: float            # sender's clock
    embedded: tuple[EchoEntry, ...]
    sequence: int                  # round number of the originating request


@dataclass(frozen=True)
class RangeEstimate:
    """One resolved pairwise range.  ``pair`` is ordered (small, large)."""

    pair: tuple[int, int]
    tof: float
    distance_raw: float            # SPEED_OF_LIGHT * tof, uncorrected
    timestamp: float               # event time on the shared simulation clock

    def __post_init__(self):
        if self.pair[0] >= self.pair[1]:
            raise ValueError("pair must be ordered (small, large)")


# --- events into the state machine -----------------------------------------

@dataclass(frozen=True)
class Activate:
    pass


@dataclass(frozen=True)
class Deactivate:
    pass


@dataclass(frozen=True)
class TimerFired:
    tag: str
    token: int


@dataclass(frozen=True)
class MessageReceived:
    message: RangingMessage
    rx_timestamp: float            # receiver's clock


@dataclass(frozen=True)
class TimerRequest:
    delay: float                   # seconds from now
    tag: str
    token: int


@dataclass
class StepResult:
    messages: list[RangingMessage] = field(default_factory=list)
    estimates: list[RangeEstimate] = field(default_factory=list)
    timers: list[TimerRequest] = field(default_factory=list)


@dataclass(frozen=True)
class ProtocolConfig:
    t_msg: float = 1.0 / (81.83 * 3)   # single-message airtime, seconds
    watchdog_timeout: float = 0.7      # silence before a device resets
    expiry_rounds: float = 3.0         # missed rounds before a peer is dropped
    round_overhead: float = 0.0        # extra idle time per round

    def __post_init__(self):
        if self.t_msg <= 0 or self.watchdog_timeout <= 0 or self.expiry_rounds <= 0:
            raise ValueError("protocol timing parameters must be positive")


class RoutingTable:
    """Sorted set of active participant IDs with last-heard bookkeeping."""

    def __init__(self, own_id: int):
        self.own_id = own_id
        self.active: list[int] = [own_id]
        self.last_heard: dict[int, float] = {}

    def observe(self, node: int, now: float) -> bool:
        """Record traffic from `node`; True if it was newly added."""
        added = node not in self.active
        if added:
            bisect.insort(self.active, node)
        self.last_heard[node] = now
        return added

    def expire(self, now: float, max_age: float) -> list[int]:
        """Drop peers not heard within max_age.  Own ID never expires."""
        stale = [n for n in self.active
                 if n != self.own_id and now - self.last_heard.get(n, -1e18) > max_age]
        for n in stale:
            self.active.remove(n)
            self.last_heard.pop(n, None)
        return stale

    def reset(self) -> None:
        self.active = [self.own_id]
        self.last_heard.clear()

    def position(self, node: int) -> int:
        return self.active.index(node)

    @property
    def initiator_id(self) -> int:
        return self.active[0]

    @property
    def size(self) -> int:
        return len(self.active)


class _Heard(NamedTuple):
    rx_timestamp: float            # our clock
    tx_timestamp: float            # sender's clock
    sequence: int


class NodeProtocol:
    """Per-node ranging state machine.

    All protocol arithmetic uses the node's own clock (``now`` plus a constant
    offset); the caller's ``now`` only anchors timer delays and the emitted
    estimates' event times, so behaviour is invariant under per-device clock
    offsets.
    """

    def __init__(self, node_id: int, config: ProtocolConfig = ProtocolConfig(),
                 clock_offset: float = 0.0):
        self.id = node_id
        self.config = config
        self.clock_offset = clock_offset
        self.active = False
        self.role = Role.INITIATOR
        self.routing = RoutingTable(node_id)
        self._heard: dict[int, _Heard] = {}
        self._last_tx_time: float | None = None
        self._last_tx_seq: int | None = None
        self._seq = 0
        self._tokens = {"request": 0, "reply": 0, "watchdog": 0}
        self._pending_reply_seq: int | None = None
        self.invalid_tof_count = 0
        self.watchdog_resets = 0

    # -- helpers -------------------------------------------------------------

    def local(self, now: float) -> float:
        return now + self.clock_offset

    @property
    def round_period(self) -> float:
        return self.routing.size * self.config.t_msg + self.config.round_overhead

    def _new_timer(self, tag: str, delay: float) -> TimerRequest:
        self._tokens[tag] += 1
        return TimerRequest(delay=delay, tag=tag, token=self._tokens[tag])

    def _echoes(self) -> tuple[EchoEntry, ...]:
        return tuple(EchoEntry(node, h.rx_timestamp, h.tx_timestamp)
                     for node, h in sorted(self._heard.items()))

    def _broadcast(self, kind: MessageKind, seq: int, now: float) -> RangingMessage:
        msg = RangingMessage(sender=self.id, kind=kind,
                             tx_timestamp=self.local(now),
                             embedded=self._echoes(), sequence=seq)
        self._last_tx_time = msg.tx_timestamp
        self._last_tx_seq = seq
        return msg

    def _resolve_ranges(self, msg: RangingMessage, rx_local: float,
                        now: float) -> list[RangeEstimate]:
        """Close two-way exchanges: our last transmission, echoed back within
        the same round, plus the incoming message's own timestamps."""
        if self._last_tx_time is None or self._last_tx_seq != msg.sequence:
            return []
        estimates = []
        for entry in msg.embedded:
            if entry.node != self.id or entry.tx_timestamp != self._last_tx_time:
                continue
            try:
                tof = resolve_tof(self._last_tx_time, entry.rx_timestamp,
                                  msg.tx_timestamp, rx_local)
            except ValueError:
                self.invalid_tof_count += 1
                continue
            pair = (min(self.id, msg.sender), max(self.id, msg.sender))
            estimates.append(RangeEstimate(pair=pair, tof=tof,
                                           distance_raw=SPEED_OF_LIGHT * tof,
                                           timestamp=now))
        return estimates

    # -- event handling --------------------------------------------------------

    def step(self, event, now: float) -> StepResult:
        out = StepResult()
        if isinstance(event, Activate):
            self.active = True
            self.role = Role.INITIATOR
            self.routing.reset()
            self._heard.clear()
            out.messages.append(self._broadcast(MessageKind.REQUEST, self._seq, now))
            self._seq += 1
            out.timers.append(self._new_timer("request", self.round_period))
            out.timers.append(self._new_timer("watchdog", self.config.watchdog_timeout))
            return out

        if isinstance(event, Deactivate):
            self.active = False
            self._pending_reply_seq = None
            return out

        if not self.active:
            return out

        if isinstance(event, MessageReceived):
            self._on_message(event.message, event.rx_timestamp, now, out)
        elif isinstance(event, TimerFired):
            self._on_timer(event, now, out)
        else:
            raise TypeError(f"unknown protocol event {event!r}")
        return out

    def _on_message(self, msg: RangingMessage, rx_local: float, now: float,
                    out: StepResult) -> None:
        self.routing.observe(msg.sender, now)
        self.routing.expire(now, self.config.expiry_rounds * self.round_period)
        out.timers.append(self._new_timer("watchdog", self.config.watchdog_timeout))

        if msg.sender < self.id and self.role is Role.INITIATOR:
            self.role = Role.RESPONDER
            self._tokens["request"] += 1  # cancel any scheduled request

        out.estimates.extend(self._resolve_ranges(msg, rx_local, now))
        self._heard[msg.sender] = _Heard(rx_local, msg.tx_timestamp, msg.sequence)

        if self.role is Role.RESPONDER and self.routing.initiator_id == self.id:
            # everyone smaller has expired; the table says initiating is on us
            self.role = Role.INITIATOR
            self._pending_reply_seq = None
            out.messages.append(self._broadcast(MessageKind.REQUEST, self._seq, now))
            self._seq += 1
            out.timers.append(self._new_timer("request", self.round_period))
        elif (self.role is Role.RESPONDER and msg.kind is MessageKind.REQUEST
                and msg.sender == self.routing.initiator_id):
            slot = self.routing.position(self.id)
            self._pending_reply_seq = msg.sequence
            out.timers.append(self._new_timer("reply", slot * self.config.t_msg))

    def _on_timer(self, event: TimerFired, now: float, out: StepResult) -> None:
        if event.token != self._tokens.get(event.tag):
            return  # superseded
        if event.tag == "request":
            if self.role is not Role.INITIATOR:
                return
            self.routing.expire(now, self.config.expiry_rounds * self.round_period)
            out.messages.append(self._broadcast(MessageKind.REQUEST, self._seq, now))
            self._seq += 1
            out.timers.append(self._new_timer("request", self.round_period))
        elif event.tag == "reply":
            if self._pending_reply_seq is None:
                return
            out.messages.append(self._broadcast(MessageKind.REPLY,
                                                self._pending_reply_seq, now))
            self._pending_reply_seq = None
        elif event.tag == "watchdog":
            # total silence: assume the initiator is gone and restart discovery
            self.watchdog_resets += 1
            self.role = Role.INITIATOR
            self.routing.reset()
            self._heard.clear()
            self._pending_reply_seq = None
            out.messages.append(self._broadcast(MessageKind.REQUEST, self._seq, now))
            self._seq += 1
            out.timers.append(self._new_timer("request", self.round_period))
            out.timers.append(self._new_timer("watchdog", self.config.watchdog_timeout))


__all__ = [
    "SPEED_OF_LIGHT", "resolve_tof", "ideal_frequency",
    "MessageKind", "Role", "EchoEntry", "RangingMessage", "RangeEstimate",
    "Activate", "Deactivate", "TimerFired", "MessageReceived", "TimerRequest",
    "StepResult", "ProtocolConfig", "RoutingTable", "NodeProtocol",
]
