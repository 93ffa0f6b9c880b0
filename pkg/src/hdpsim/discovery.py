"""Device discovery: standby scanning, discoverability modes, inquiry sweeps.

An idle device listens on one of 32 frequencies at a time, changing frequency
every scan window (1.28 s), so a full listening sweep takes 40.96 s. An
inquiring device transmits on all 32 frequencies within each 10 ms cycle and
collects responses until its deadline. Whether a scanned device answers is
governed by its discoverability mode; whether it accepts connections is a
separate connectability setting.

The inquiry transmit sweep is simulated per cycle rather than per frame: for
each cycle the manager computes which transmit slots fall inside some
listener's current scan window and broadcasts only those. Slots nobody could
hear produce no deliveries and no random draws either way, so the shortcut is
observably identical to transmitting all 32 frames.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .core import DeviceAddress, DeviceName, decode_name, encode_name
from .engine import FREQ_COUNT, Device, Engine, FrameKind, RadioFrame, SimTime
from .params import SimParams


class DiscoverabilityMode(enum.Enum):
    DISCOVERABLE = "discoverable"
    LIMITED = "limited"
    NON_DISCOVERABLE = "non_discoverable"


class ConnectabilityMode(enum.Enum):
    CONNECTABLE = "connectable"
    NON_CONNECTABLE = "non_connectable"


class InquiryInProgress(Exception):
    """The device already has an active inquiry."""


def scan_frequency(window_index: int) -> int:
    """Listening frequency for the given scan window ordinal."""
    return window_index % FREQ_COUNT


@dataclass(frozen=True)
class ScanSchedule:
    """Deterministic standby listening pattern of one device."""

    window_us: int

    def window_index(self, local_time_us: SimTime) -> int:
        return local_time_us // self.window_us

    def frequency_at(self, local_time_us: SimTime) -> int:
        return scan_frequency(self.window_index(local_time_us))

    def full_sweep_us(self) -> int:
        return self.window_us * FREQ_COUNT


@dataclass(frozen=True)
class DiscoveryResult:
    address: DeviceAddress
    name: DeviceName
    discovered_at: SimTime


@dataclass
class _ModeState:
    discoverability: DiscoverabilityMode = DiscoverabilityMode.DISCOVERABLE
    limited_until_us: SimTime = 0
    connectability: ConnectabilityMode = ConnectabilityMode.CONNECTABLE


@dataclass
class Inquiry:
    """Handle for one inquiry run; results are final once ``done`` is True."""

    device: Device
    started_at: SimTime
    duration_us: int
    results: list[DiscoveryResult] = field(default_factory=list)
    done: bool = False
    _seen: set[DeviceAddress] = field(default_factory=set)

    @property
    def deadline_us(self) -> SimTime:
        return self.started_at + self.duration_us


def sweep_slots(
    params: SimParams,
    schedule: ScanSchedule,
    listener_offset_us: int,
    cycle_start: SimTime,
    not_after: SimTime,
) -> list[tuple[SimTime, int]]:
    """Transmit slots within one sweep cycle that the listener's scan hits.

    Returns (slot start in sim time, frequency) pairs, at most two: a scan
    window boundary can cross the cycle, splitting it between two
    frequencies. Slots starting at or after ``not_after`` are excluded.
    """
    cycle_end = min(cycle_start + params.inquiry_cycle_us, not_after)
    hits: list[tuple[SimTime, int]] = []
    seg_start = cycle_start
    while seg_start < cycle_end:
        local = seg_start + listener_offset_us
        window = schedule.window_index(local)
        freq = scan_frequency(window)
        # Sim time at which the listener hops to its next scan frequency.
        boundary = (window + 1) * schedule.window_us - listener_offset_us
        seg_end = min(boundary, cycle_end)
        slot = cycle_start + freq * params.inquiry_slot_us
        if seg_start <= slot < seg_end:
            hits.append((slot, freq))
        seg_start = seg_end
    return hits


class DiscoveryManager:
    """Per-engine discovery state: modes, scans, inquiries, known addresses."""

    def __init__(self, engine: Engine, params: SimParams):
        self.engine = engine
        self.params = params
        self.schedule = ScanSchedule(params.scan_window_us)
        self._modes: dict[DeviceAddress, _ModeState] = {}
        self._known: dict[DeviceAddress, set[DeviceAddress]] = {}
        self._active: dict[DeviceAddress, Inquiry] = {}
        engine.add_frame_handler(FrameKind.INQUIRY, self._on_inquiry)
        engine.add_frame_handler(FrameKind.INQUIRY_RESPONSE, self._on_response)
        engine.add_listen_provider(self._listening)

    # -- mode configuration

    def _state(self, address: DeviceAddress) -> _ModeState:
        if address not in self._modes:
            self._modes[address] = _ModeState()
        return self._modes[address]

    def set_discoverability(
        self,
        device: Device,
        mode: DiscoverabilityMode,
        window_us: int | None = None,
    ) -> None:
        state = self._state(device.address)
        if mode is DiscoverabilityMode.LIMITED:
            if window_us is None or window_us <= 0:
                raise ValueError("limited discoverability needs window_us > 0")
            state.limited_until_us = self.engine.now + window_us
        state.discoverability = mode

    def set_connectability(self, device: Device, mode: ConnectabilityMode) -> None:
        self._state(device.address).connectability = mode

    def discoverability(self, device: Device) -> DiscoverabilityMode:
        return self._state(device.address).discoverability

    def is_connectable(self, address: DeviceAddress) -> bool:
        return self._state(address).connectability is ConnectabilityMode.CONNECTABLE

    # -- discovered-address bookkeeping (page precondition)

    def note_known(self, owner: DeviceAddress, peer: DeviceAddress) -> None:
        self._known.setdefault(owner, set()).add(peer)

    def knows(self, owner: DeviceAddress, peer: DeviceAddress) -> bool:
        return peer in self._known.get(owner, set())

    # -- listening

    def _listening(self, device: Device, t: SimTime):
        inquiry = self._active.get(device.address)
        if inquiry is not None and not inquiry.done:
            # While inquiring, listen where we are currently transmitting.
            elapsed = t - inquiry.started_at
            in_cycle = elapsed % self.params.inquiry_cycle_us
            yield min(in_cycle // self.params.inquiry_slot_us, FREQ_COUNT - 1)
        else:
            yield self.schedule.frequency_at(device.local_time(t))

    # -- inquiry

    def start_inquiry(self, device: Device, duration_us: int) -> Inquiry:
        if duration_us <= 0:
            raise ValueError("duration_us must be positive")
        existing = self._active.get(device.address)
        if existing is not None and not existing.done:
            raise InquiryInProgress(str(device.address))
        now = self.engine.now
        inquiry = Inquiry(device=device, started_at=now, duration_us=duration_us)
        self._active[device.address] = inquiry
        self.engine.emit("inquiry_start", device.address, duration_us=duration_us)
        self.engine.schedule(now, lambda: self._cycle(inquiry))
        self.engine.schedule(inquiry.deadline_us, lambda: self._finish(inquiry))
        return inquiry

    def _cycle(self, inquiry: Inquiry) -> None:
        now = self.engine.now
        if inquiry.done or now >= inquiry.deadline_us:
            return
        slots: dict[SimTime, int] = {}
        for receiver in self.engine.devices:
            if receiver.address == inquiry.device.address:
                continue
            offset = receiver.config.clock_offset_us
            for slot, freq in sweep_slots(
                self.params, self.schedule, offset, now, inquiry.deadline_us
            ):
                slots.setdefault(slot, freq)
        for slot in sorted(slots):
            freq = slots[slot]
            frame = RadioFrame(
                from_addr=inquiry.device.address,
                freq_index=freq,
                kind=FrameKind.INQUIRY,
                payload=b"",
            )
            if slot == now:
                self.engine.broadcast(frame, inquiry.device)
            else:
                self.engine.schedule(
                    slot, lambda f=frame: self.engine.broadcast(f, inquiry.device)
                )
        self.engine.schedule(
            now + self.params.inquiry_cycle_us, lambda: self._cycle(inquiry)
        )

    def _finish(self, inquiry: Inquiry) -> None:
        if inquiry.done:
            return
        inquiry.done = True
        inquiry.results.sort(key=lambda r: (r.discovered_at, r.address))
        if self._active.get(inquiry.device.address) is inquiry:
            del self._active[inquiry.device.address]
        self.engine.emit(
            "inquiry_done",
            inquiry.device.address,
            found=len(inquiry.results),
        )

    # -- frame handlers

    def _on_inquiry(self, receiver: Device, frame: RadioFrame, now: SimTime) -> None:
        state = self._state(receiver.address)
        mode = state.discoverability
        if mode is DiscoverabilityMode.NON_DISCOVERABLE:
            return
        if mode is DiscoverabilityMode.LIMITED and now >= state.limited_until_us:
            return
        payload = receiver.address.to_bytes() + encode_name(receiver.config.name)
        response = RadioFrame(
            from_addr=receiver.address,
            freq_index=frame.freq_index,
            kind=FrameKind.INQUIRY_RESPONSE,
            payload=payload,
            to=frame.from_addr,
        )
        self.engine.broadcast(response, receiver)

    def _on_response(self, receiver: Device, frame: RadioFrame, now: SimTime) -> None:
        inquiry = self._active.get(receiver.address)
        if inquiry is None or inquiry.done:
            return
        address = DeviceAddress.from_bytes(frame.payload[:6])
        name, _ = decode_name(frame.payload[6:])
        if address in inquiry._seen:
            return
        inquiry._seen.add(address)
        inquiry.results.append(
            DiscoveryResult(address=address, name=name, discovered_at=now)
        )
        self.note_known(receiver.address, address)
        self.engine.emit(
            "inquiry_resp",
            receiver.address,
            peer=str(address),
            name=name.text,
        )
