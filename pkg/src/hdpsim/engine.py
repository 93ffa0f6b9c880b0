"""Deterministic discrete-event engine and the virtual radio medium.

One engine instance per simulation, single-threaded by contract. Events are
totally ordered by (time, insertion sequence); the same seed and the same
scheduled inputs produce a byte-identical trace.

The medium delivers a frame to every registered device that is inside
min(sender range, receiver range) Euclidean distance and listening on the
frame's frequency index, both evaluated at transmit time. Each candidate
delivery is independently dropped with the configured loss probability using
the engine's seeded generator, then delivered after a fixed 1 us propagation
delay (plus optional uniform jitter).
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import json
import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .core import DeviceAddress, DeviceConfig, DeviceRegistry, SimTime

logger = logging.getLogger(__name__)

FREQ_COUNT = 32


class SchedulingInPast(ValueError):
    """Attempt to schedule an event before the current sim time."""


class UnknownDevice(KeyError):
    """Operation referenced an address with no registered device."""


class FrameKind(enum.Enum):
    INQUIRY = "inquiry"
    INQUIRY_RESPONSE = "inquiry_response"
    PAGE = "page"
    LINK_DATA = "link_data"


@dataclass(frozen=True)
class RadioFrame:
    """One over-the-air transmission.

    `to` narrows delivery to a single addressee (page and link traffic);
    broadcast frames leave it None. The payload is the encoded PDU bytes.
    """

    from_addr: DeviceAddress
    freq_index: int
    kind: FrameKind
    payload: bytes = b""
    to: Optional[DeviceAddress] = None

    def __post_init__(self):
        if not 0 <= self.freq_index < FREQ_COUNT:
            raise ValueError(f"freq_index out of [0,{FREQ_COUNT - 1}]: {self.freq_index}")


@dataclass(frozen=True)
class MediumModel:
    """Radio medium parameters. Defaults give lossless, jitter-free delivery."""

    loss_probability: float = 0.0
    rng_seed: int = 0
    propagation_us: int = 1
    jitter_us: int = 0

    def __post_init__(self):
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError("loss_probability must be in [0,1]")
        if self.propagation_us < 1 or self.jitter_us < 0:
            raise ValueError("propagation_us must be >= 1 and jitter_us >= 0")


class Device:
    """Runtime wrapper of a registered device: static config + mutable position."""

    def __init__(self, config: DeviceConfig):
        self.config = config
        self.position = config.position

    @property
    def address(self) -> DeviceAddress:
        return self.config.address

    def local_time(self, now: SimTime) -> int:
        return now + self.config.clock_offset_us

    def __repr__(self) -> str:
        return f"Device({self.config.address})"


@dataclass(frozen=True)
class TraceEvent:
    t_us: SimTime
    seq: int
    ev: str
    dev: str
    detail: dict

    def to_json(self) -> str:
        return json.dumps(
            {"t_us": self.t_us, "seq": self.seq, "ev": self.ev, "dev": self.dev, "detail": self.detail},
            sort_keys=True,
            separators=(",", ":"),
        )


class Trace:
    """Append-only, time-monotonic record of a run."""

    def __init__(self):
        self.events: list[TraceEvent] = []

    def append(self, t_us: SimTime, ev: str, dev: str, detail: dict) -> TraceEvent:
        if self.events and t_us < self.events[-1].t_us:
            raise ValueError(f"trace time went backwards: {t_us} < {self.events[-1].t_us}")
        event = TraceEvent(t_us, len(self.events), ev, dev, detail)
        self.events.append(event)
        return event

    def to_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode("utf-8")).hexdigest()

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)


# Heap entries are [at, seq, callback]; a cancelled entry has callback None.
_CANCELLED = None


class Engine:
    """Event queue, sim clock, trace, seeded RNG, and the radio medium."""

    def __init__(self, medium: MediumModel | None = None, seed: int | None = None):
        self.medium = medium or MediumModel()
        self.seed = seed if seed is not None else self.medium.rng_seed
        self.rng = random.Random(self.seed)
        self.now: SimTime = 0
        self.trace = Trace()
        self.devices = DeviceRegistry()
        self._heap: list[list] = []
        self._next_seq = 0
        self._entries: dict[int, list] = {}
        # kind -> [fn(receiver_device, frame, now)]
        self._frame_handlers: dict[FrameKind, list[Callable]] = {k: [] for k in FrameKind}
        # fn(device, t) -> iterable of frequency indices the device listens on
        self._listen_providers: list[Callable[[Device, SimTime], Iterable[int]]] = []

    # -- devices ------------------------------------------------------------

    def add_device(self, config: DeviceConfig) -> Device:
        device = Device(config)
        self.devices.register(config.address, device)
        return device

    def device(self, address: DeviceAddress) -> Device:
        found = self.devices.lookup(address)
        if found is None:
            raise UnknownDevice(str(address))
        return found

    def move_device(self, address: DeviceAddress, position: tuple[float, float]) -> None:
        device = self.device(address)
        device.position = (float(position[0]), float(position[1]))
        self.emit("move", device, x=device.position[0], y=device.position[1])

    # -- scheduling ---------------------------------------------------------

    def schedule(self, at: SimTime, fn: Callable[[], None]) -> int:
        if at < self.now:
            raise SchedulingInPast(f"cannot schedule at {at}, now is {self.now}")
        event_id = self._next_seq
        self._next_seq += 1
        entry = [at, event_id, fn]
        self._entries[event_id] = entry
        heapq.heappush(self._heap, entry)
        return event_id

    def schedule_in(self, delay_us: int, fn: Callable[[], None]) -> int:
        return self.schedule(self.now + delay_us, fn)

    def cancel(self, event_id: int) -> None:
        entry = self._entries.pop(event_id, None)
        if entry is not None:
            entry[2] = _CANCELLED

    def run_until(self, t: SimTime) -> list[TraceEvent]:
        """Process every event with time <= t in total order; now becomes t.

        Returns the slice of trace events appended during this call.
        """
        if t < self.now:
            raise SchedulingInPast(f"cannot run to {t}, now is {self.now}")
        mark = len(self.trace.events)
        while self._heap and self._heap[0][0] <= t:
            at, event_id, fn = heapq.heappop(self._heap)
            self._entries.pop(event_id, None)
            if fn is _CANCELLED:
                continue
            self.now = at
            fn()
        self.now = t
        return self.trace.events[mark:]

    def run(self) -> list[TraceEvent]:
        """Process events until the queue is empty (time of last event)."""
        mark = len(self.trace.events)
        while self._heap:
            at, event_id, fn = heapq.heappop(self._heap)
            self._entries.pop(event_id, None)
            if fn is _CANCELLED:
                continue
            self.now = at
            fn()
        return self.trace.events[mark:]

    @property
    def pending_events(self) -> int:
        return sum(1 for e in self._heap if e[2] is not _CANCELLED)

    # -- trace --------------------------------------------------------------

    def emit(self, ev: str, dev: Device | DeviceAddress | None, **detail) -> TraceEvent:
        addr = ""
        if isinstance(dev, Device):
            addr = str(dev.address)
        elif isinstance(dev, DeviceAddress):
            addr = str(dev)
        return self.trace.append(self.now, ev, addr, detail)

    # -- medium -------------------------------------------------------------

    def add_frame_handler(self, kind: FrameKind, fn: Callable) -> None:
        self._frame_handlers[kind].append(fn)

    def add_listen_provider(self, fn: Callable[[Device, SimTime], Iterable[int]]) -> None:
        self._listen_providers.append(fn)

    def listening_on(self, device: Device, freq_index: int, t: SimTime) -> bool:
        for provider in self._listen_providers:
            if freq_index in provider(device, t):
                return True
        return False

    def in_range(self, a: Device, b: Device) -> bool:
        dx = a.position[0] - b.position[0]
        dy = a.position[1] - b.position[1]
        limit = min(a.config.radio_range_m, b.config.radio_range_m)
        return dx * dx + dy * dy <= limit * limit

    def broadcast(self, frame: RadioFrame, sender: Device) -> list[tuple[Device, SimTime]]:
        """Offer a frame to the medium; returns the scheduled deliveries.

        Range and frequency eligibility are evaluated now (transmit time);
        the loss draw happens per candidate in device registration order.
        """
        if self.devices.lookup(sender.address) is None:
            raise UnknownDevice(str(sender.address))
        deliveries: list[tuple[Device, SimTime]] = []
        for receiver in self.devices:
            if receiver is sender:
                continue
            if frame.to is not None and receiver.address != frame.to:
                continue
            if not self.in_range(sender, receiver):
                continue
            if not self.listening_on(receiver, frame.freq_index, self.now):
                continue
            if self.medium.loss_probability > 0.0 and self.rng.random() < self.medium.loss_probability:
                continue
            delay = self.medium.propagation_us
            if self.medium.jitter_us > 0:
                delay = max(1, delay + self.rng.randint(-self.medium.jitter_us, self.medium.jitter_us))
            deliver_at = self.now + delay
            self.schedule(deliver_at, self._deliver(frame, receiver))
            deliveries.append((receiver, deliver_at))
        return deliveries

    def _deliver(self, frame: RadioFrame, receiver: Device) -> Callable[[], None]:
        def run():
            for handler in self._frame_handlers[frame.kind]:
                handler(receiver, frame, self.now)

        return run
