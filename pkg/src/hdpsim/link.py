"""Connections: paging, piconet topology, hop schedules, link supervision.

A device that pages a previously discovered target becomes the master of the
resulting link and of the piconet containing it. A piconet holds at most
seven slaves; a device masters at most one piconet but may simultaneously be
a slave in others, and links can swap roles after the fact. The master
drives a keepalive exchange; three consecutive misses on either side mark
the link lost, after which the same master may page again to restore the
same link object with its negotiated parameters intact.

Paging reuses the inquiry sweep arithmetic: the pager transmits at the
moments the target's standby scan is on the matching frequency, then the
two sides finish a four-message handshake (page, accept, parameters,
acknowledgement) on the frequency that worked.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

from .core import DeviceAddress, SimTime
from .discovery import DiscoveryManager, sweep_slots
from .engine import Device, Engine, FrameKind, RadioFrame
from .params import SimParams
from .security import (
    AuthOutcome,
    LinkKey,
    Pin,
    authenticate,
    derive_init_key,
)

MAX_SLAVES = 7

PROTO_LINK = 1
PROTO_MCAP = 2
PROTO_HDP = 3

_MSG_PAGE_ACCEPT = 1
_MSG_PAGE_PARAMS = 2
_MSG_PARAMS_ACK = 3
_MSG_KEEPALIVE = 4
_MSG_KEEPALIVE_ACK = 5

_PARAMS_STRUCT = struct.Struct(">QBBIH")
_MASK64 = (1 << 64) - 1


class LinkError(Exception):
    """Base for connection-layer failures."""


class NotDiscovered(LinkError):
    """Page target's address was never discovered by the initiator."""


class NotConnectable(LinkError):
    """Target is configured to refuse connections."""


class Unreachable(LinkError):
    """Target cannot be reached over the radio."""


class PiconetFull(LinkError):
    """The initiator's piconet already has seven slaves."""


class AlreadyMasterElsewhere(LinkError):
    """Role change would give a device a second piconet to master.

    Kept for API completeness: paging never raises it, because a paged
    device joins as a slave, and a role switch merges the link into the new
    master's own piconet.
    """


class WouldViolateTopology(LinkError):
    """Role switch refused: the prospective master's piconet is full."""


def _mix64(*values: int) -> int:
    h = 0x243F6A8885A308D3
    for v in values:
        h = (h + (v & _MASK64) + 0x9E3779B97F4A7C15) & _MASK64
        h ^= h >> 30
        h = (h * 0xBF58476D1CE4E5B9) & _MASK64
        h ^= h >> 27
        h = (h * 0x94D049BB133111EB) & _MASK64
        h ^= h >> 31
    return h


@dataclass(frozen=True)
class ConnectionParams:
    """Master-chosen link schedule and segmentation settings."""

    hop_seed: int
    freq_low: int
    freq_high: int
    hop_interval_us: int
    page_size_bytes: int

    def __post_init__(self):
        if not 0 <= self.hop_seed <= _MASK64:
            raise ValueError("hop_seed out of range")
        if not 0 <= self.freq_low <= self.freq_high <= 31:
            raise ValueError("frequency range must satisfy 0 <= low <= high <= 31")
        if self.hop_interval_us <= 0:
            raise ValueError("hop_interval_us must be positive")
        if self.page_size_bytes <= 0:
            raise ValueError("page_size_bytes must be positive")

    def encode(self) -> bytes:
        return _PARAMS_STRUCT.pack(
            self.hop_seed,
            self.freq_low,
            self.freq_high,
            self.hop_interval_us,
            self.page_size_bytes,
        )

    @classmethod
    def decode(cls, raw: bytes) -> "ConnectionParams":
        seed, low, high, interval, page = _PARAMS_STRUCT.unpack(raw[: _PARAMS_STRUCT.size])
        return cls(seed, low, high, interval, page)


def negotiate_params(
    master: DeviceAddress,
    slave: DeviceAddress,
    seed: int,
    params: SimParams,
) -> ConnectionParams:
    """Parameters the master assigns to one link.

    Pure in its inputs: the same master, slave, and simulation seed always
    produce the same parameters, while different pairs get different hop
    sequences.
    """
    hop_seed = _mix64(master.value, slave.value, seed, 0x484F50)
    return ConnectionParams(
        hop_seed=hop_seed,
        freq_low=params.freq_low,
        freq_high=params.freq_high,
        hop_interval_us=params.hop_interval_us,
        page_size_bytes=params.page_size_bytes,
    )


def hop_frequency(params: ConnectionParams, t: SimTime) -> int:
    """Frequency both endpoints of a link use during the slot containing t."""
    span = params.freq_high - params.freq_low + 1
    slot = t // params.hop_interval_us
    return params.freq_low + _mix64(params.hop_seed, slot) % span


class LinkState(enum.Enum):
    CONNECTED = "connected"
    LOST = "lost"


@dataclass
class Link:
    """One master-slave connection; a single object shared by both ends."""

    master: Device
    slave: Device
    params: ConnectionParams
    state: LinkState = LinkState.CONNECTED
    authenticated: bool = False
    link_key: Optional[LinkKey] = None
    # Keepalive bookkeeping, master side then slave side.
    ka_pending: bool = False
    ka_misses: int = 0
    slave_heard: bool = False
    slave_misses: int = 0
    _timers: list[int] = field(default_factory=list)
    _observers: list[Callable[["Link"], None]] = field(default_factory=list)

    @property
    def pair(self) -> tuple[DeviceAddress, DeviceAddress]:
        return pair_key(self.master.address, self.slave.address)

    def peer_of(self, address: DeviceAddress) -> Device:
        if address == self.master.address:
            return self.slave
        if address == self.slave.address:
            return self.master
        raise LinkError(f"{address} is not an endpoint of this link")

    def on_state_change(self, fn: Callable[["Link"], None]) -> None:
        self._observers.append(fn)


def pair_key(a: DeviceAddress, b: DeviceAddress) -> tuple[DeviceAddress, DeviceAddress]:
    return (a, b) if a <= b else (b, a)


@dataclass
class Piconet:
    """A master and its slaves, capped at seven."""

    master: Device
    rate_cap_bps: int
    links: dict[DeviceAddress, Link] = field(default_factory=dict)

    @property
    def slaves(self) -> list[DeviceAddress]:
        return list(self.links)

    def __len__(self) -> int:
        return len(self.links)


class _AttemptState(enum.Enum):
    SWEEP = "sweep"
    PARAMS = "params"
    DONE = "done"
    FAILED = "failed"


@dataclass
class PageAttempt:
    """Handle for one page operation; resolves as the engine runs."""

    initiator: Device
    target: DeviceAddress
    deadline_us: SimTime
    state: _AttemptState = _AttemptState.SWEEP
    link: Optional[Link] = None
    error: Optional[LinkError] = None
    params: Optional[ConnectionParams] = None
    listen_freq: int = -1
    listen_from: SimTime = -1
    _callbacks: list[Callable[["PageAttempt"], None]] = field(default_factory=list)

    @property
    def done(self) -> bool:
        return self.state in (_AttemptState.DONE, _AttemptState.FAILED)

    def on_complete(self, fn: Callable[["PageAttempt"], None]) -> None:
        if self.done:
            fn(self)
        else:
            self._callbacks.append(fn)


class LinkManager:
    """Connection state for every device on one engine."""

    def __init__(self, engine: Engine, discovery: DiscoveryManager, params: SimParams):
        self.engine = engine
        self.discovery = discovery
        self.params = params
        self.links: dict[tuple[DeviceAddress, DeviceAddress], Link] = {}
        self.piconets: dict[DeviceAddress, Piconet] = {}
        self._links_of: dict[DeviceAddress, list[Link]] = {}
        self._attempts: dict[tuple[DeviceAddress, DeviceAddress], PageAttempt] = {}
        self._pins: dict[DeviceAddress, Pin] = {}
        self._rate_caps: dict[DeviceAddress, int] = {}
        self._protocols: dict[int, Callable] = {}
        engine.add_frame_handler(FrameKind.PAGE, self._on_page)
        engine.add_frame_handler(FrameKind.LINK_DATA, self._on_link_data)
        engine.add_listen_provider(self._listening)

    # -- configuration ------------------------------------------------------

    def set_pin(self, address: DeviceAddress, pin: Pin) -> None:
        self._pins[address] = pin

    def set_rate_cap(self, address: DeviceAddress, bps: int) -> None:
        if bps <= 0:
            raise ValueError("rate cap must be positive")
        self._rate_caps[address] = bps
        piconet = self.piconets.get(address)
        if piconet is not None:
            piconet.rate_cap_bps = bps

    def register_protocol(self, proto: int, fn: Callable) -> None:
        """fn(link, receiver_device, from_addr, body, now) for one proto id."""
        self._protocols[proto] = fn

    # -- lookups ------------------------------------------------------------

    def link_between(self, a: DeviceAddress, b: DeviceAddress) -> Optional[Link]:
        return self.links.get(pair_key(a, b))

    def links_of(self, address: DeviceAddress) -> list[Link]:
        return list(self._links_of.get(address, ()))

    # -- listening ----------------------------------------------------------

    def _listening(self, device: Device, t: SimTime):
        for link in self._links_of.get(device.address, ()):
            if link.state is LinkState.CONNECTED:
                yield hop_frequency(link.params, t)
        for attempt in self._attempts.values():
            if (
                attempt.initiator is device
                and not attempt.done
                and attempt.listen_from >= 0
                and attempt.listen_from <= t < attempt.listen_from + self.params.inquiry_cycle_us
            ):
                yield attempt.listen_freq

    # -- paging -------------------------------------------------------------

    def page(self, initiator: Device, target: DeviceAddress) -> PageAttempt:
        """Connect to a discovered device; initiator becomes the master.

        Raises immediately when the attempt cannot succeed: the target is
        unknown or undiscovered, refuses connections, is out of radio
        range, or the initiator's piconet is full. Paging an endpoint of an
        existing live link returns a completed attempt for that link.
        """
        target_dev = self.engine.device(target)
        if target == initiator.address:
            raise LinkError("cannot page self")
        now = self.engine.now
        key = pair_key(initiator.address, target)
        existing = self.links.get(key)
        if existing is not None and existing.state is LinkState.CONNECTED:
            attempt = PageAttempt(initiator, target, now, state=_AttemptState.DONE)
            attempt.link = existing
            return attempt
        if not self.discovery.knows(initiator.address, target):
            raise NotDiscovered(f"{initiator.address} has not discovered {target}")
        if not self.discovery.is_connectable(target):
            raise NotConnectable(str(target))
        if not self.engine.in_range(initiator, target_dev):
            raise Unreachable(f"{target} out of radio range")
        piconet = self.piconets.get(initiator.address)
        if (
            piconet is not None
            and target not in piconet.links
            and len(piconet) >= MAX_SLAVES
        ):
            raise PiconetFull(f"{initiator.address} already has {MAX_SLAVES} slaves")
        pending = self._attempts.get(key)
        if pending is not None and not pending.done:
            return pending
        attempt = PageAttempt(
            initiator, target, deadline_us=now + self.params.page_timeout_us
        )
        self._attempts[key] = attempt
        self.engine.emit("page", initiator.address, target=str(target))
        self._attempt_tick(attempt)
        return attempt

    def _attempt_tick(self, attempt: PageAttempt) -> None:
        if attempt.done:
            return
        now = self.engine.now
        if now >= attempt.deadline_us:
            self._fail_attempt(attempt, Unreachable(f"page to {attempt.target} timed out"))
            return
        target_dev = self.engine.device(attempt.target)
        hits = sweep_slots(
            self.params,
            self.discovery.schedule,
            target_dev.config.clock_offset_us,
            now,
            attempt.deadline_us,
        )
        for slot, freq in hits:
            if slot == now:
                self._attempt_tx(attempt, freq)
            else:
                self.engine.schedule(slot, lambda a=attempt, f=freq: self._attempt_tx(a, f))
        self.engine.schedule_in(
            self.params.inquiry_cycle_us, lambda: self._attempt_tick(attempt)
        )

    def _attempt_tx(self, attempt: PageAttempt, freq: int) -> None:
        if attempt.done or self.engine.now >= attempt.deadline_us:
            return
        if attempt.state is _AttemptState.SWEEP:
            frame = RadioFrame(
                from_addr=attempt.initiator.address,
                freq_index=freq,
                kind=FrameKind.PAGE,
                payload=b"",
                to=attempt.target,
            )
        else:
            assert attempt.params is not None
            frame = RadioFrame(
                from_addr=attempt.initiator.address,
                freq_index=freq,
                kind=FrameKind.LINK_DATA,
                payload=bytes([PROTO_LINK, _MSG_PAGE_PARAMS]) + attempt.params.encode(),
                to=attempt.target,
            )
        attempt.listen_freq = freq
        attempt.listen_from = self.engine.now
        self.engine.broadcast(frame, attempt.initiator)

    def _fail_attempt(self, attempt: PageAttempt, error: LinkError) -> None:
        attempt.state = _AttemptState.FAILED
        attempt.error = error
        self._attempts.pop(pair_key(attempt.initiator.address, attempt.target), None)
        self.engine.emit(
            "page_failed",
            attempt.initiator.address,
            target=str(attempt.target),
            reason=type(error).__name__,
        )
        for fn in attempt._callbacks:
            fn(attempt)

    def _complete_attempt(self, attempt: PageAttempt, link: Link) -> None:
        attempt.state = _AttemptState.DONE
        attempt.link = link
        self._attempts.pop(pair_key(attempt.initiator.address, attempt.target), None)
        for fn in attempt._callbacks:
            fn(attempt)

    # -- handshake frames ---------------------------------------------------

    def _on_page(self, receiver: Device, frame: RadioFrame, now: SimTime) -> None:
        if not self.discovery.is_connectable(receiver.address):
            return
        reply = RadioFrame(
            from_addr=receiver.address,
            freq_index=frame.freq_index,
            kind=FrameKind.LINK_DATA,
            payload=bytes([PROTO_LINK, _MSG_PAGE_ACCEPT]),
            to=frame.from_addr,
        )
        self.engine.broadcast(reply, receiver)

    def _on_page_accept(self, receiver: Device, frame: RadioFrame, now: SimTime) -> None:
        attempt = self._attempts.get(pair_key(receiver.address, frame.from_addr))
        if attempt is None or attempt.done or attempt.initiator is not receiver:
            return
        if attempt.state is not _AttemptState.SWEEP:
            return
        existing = self.links.get(pair_key(receiver.address, attempt.target))
        if existing is not None:
            attempt.params = existing.params
        else:
            attempt.params = negotiate_params(
                receiver.address, attempt.target, self.engine.seed, self.params
            )
        attempt.state = _AttemptState.PARAMS
        self._attempt_tx(attempt, frame.freq_index)

    def _on_page_params(self, receiver: Device, frame: RadioFrame, now: SimTime) -> None:
        params = ConnectionParams.decode(frame.payload[2:])
        master = self.engine.device(frame.from_addr)
        if self._establish(master, receiver, params) is None:
            return
        reply = RadioFrame(
            from_addr=receiver.address,
            freq_index=frame.freq_index,
            kind=FrameKind.LINK_DATA,
            payload=bytes([PROTO_LINK, _MSG_PARAMS_ACK]),
            to=frame.from_addr,
        )
        self.engine.broadcast(reply, receiver)

    def _on_params_ack(self, receiver: Device, frame: RadioFrame, now: SimTime) -> None:
        key = pair_key(receiver.address, frame.from_addr)
        attempt = self._attempts.get(key)
        link = self.links.get(key)
        if attempt is None or attempt.done or link is None:
            return
        self._complete_attempt(attempt, link)

    # -- establishment and supervision --------------------------------------

    def _establish(
        self, master: Device, slave: Device, params: ConnectionParams
    ) -> Optional[Link]:
        key = pair_key(master.address, slave.address)
        link = self.links.get(key)
        if link is not None:
            if link.state is LinkState.CONNECTED:
                return link
            link.state = LinkState.CONNECTED
            link.ka_pending = False
            link.ka_misses = 0
            link.slave_heard = False
            link.slave_misses = 0
            self.engine.emit(
                "link_restored", link.master.address, peer=str(link.slave.address)
            )
        else:
            piconet = self.piconets.get(master.address)
            if piconet is not None and len(piconet) >= MAX_SLAVES:
                # Capacity was taken while the handshake was in flight; give
                # up silently and let the pager time out.
                return None
            link = Link(master=master, slave=slave, params=params)
            self.links[key] = link
            self._links_of.setdefault(master.address, []).append(link)
            self._links_of.setdefault(slave.address, []).append(link)
            if piconet is None:
                piconet = Piconet(
                    master=master,
                    rate_cap_bps=self._rate_caps.get(
                        master.address, self.params.version_rate_cap_bps
                    ),
                )
                self.piconets[master.address] = piconet
            piconet.links[slave.address] = link
            self.discovery.note_known(master.address, slave.address)
            self.discovery.note_known(slave.address, master.address)
            self.engine.emit("connected", master.address, peer=str(slave.address))
        self._start_supervision(link)
        if not link.authenticated:
            self.pair_link(link)
        self._notify(link)
        return link

    def _start_supervision(self, link: Link) -> None:
        for timer in link._timers:
            self.engine.cancel(timer)
        link._timers = [
            self.engine.schedule_in(
                self.params.keepalive_interval_us, lambda: self._ka_tick(link)
            ),
            self.engine.schedule_in(
                self.params.keepalive_interval_us, lambda: self._monitor_tick(link)
            ),
        ]

    def _ka_tick(self, link: Link) -> None:
        if link.state is not LinkState.CONNECTED:
            return
        if link.ka_pending:
            link.ka_misses += 1
            if link.ka_misses >= self.params.keepalive_miss_threshold:
                self._lose(link, "keepalive_timeout")
                return
        self._send_control(link, link.master, _MSG_KEEPALIVE)
        link.ka_pending = True
        link._timers.append(
            self.engine.schedule_in(
                self.params.keepalive_interval_us, lambda: self._ka_tick(link)
            )
        )

    def _monitor_tick(self, link: Link) -> None:
        if link.state is not LinkState.CONNECTED:
            return
        if link.slave_heard:
            link.slave_misses = 0
        else:
            link.slave_misses += 1
            if link.slave_misses >= self.params.keepalive_miss_threshold:
                self._lose(link, "keepalive_silence")
                return
        link.slave_heard = False
        link._timers.append(
            self.engine.schedule_in(
                self.params.keepalive_interval_us, lambda: self._monitor_tick(link)
            )
        )

    def _send_control(self, link: Link, sender: Device, msg: int) -> None:
        peer = link.peer_of(sender.address)
        frame = RadioFrame(
            from_addr=sender.address,
            freq_index=hop_frequency(link.params, self.engine.now),
            kind=FrameKind.LINK_DATA,
            payload=bytes([PROTO_LINK, msg]),
            to=peer.address,
        )
        self.engine.broadcast(frame, sender)

    def _lose(self, link: Link, reason: str) -> None:
        if link.state is LinkState.LOST:
            return
        link.state = LinkState.LOST
        for timer in link._timers:
            self.engine.cancel(timer)
        link._timers = []
        link.ka_pending = False
        link.ka_misses = 0
        link.slave_heard = False
        link.slave_misses = 0
        self.engine.emit(
            "link_lost",
            link.master.address,
            peer=str(link.slave.address),
            reason=reason,
        )
        self._notify(link)

    def _notify(self, link: Link) -> None:
        for fn in list(link._observers):
            fn(link)

    def drop_link(self, a: DeviceAddress, b: DeviceAddress, reason: str = "forced") -> None:
        link = self.link_between(a, b)
        if link is None:
            raise LinkError(f"no link between {a} and {b}")
        self._lose(link, reason)

    # -- data plane ---------------------------------------------------------

    def send_on_link(self, link: Link, sender: Device, proto: int, body: bytes):
        if link.state is not LinkState.CONNECTED:
            raise LinkError("link is down")
        peer = link.peer_of(sender.address)
        frame = RadioFrame(
            from_addr=sender.address,
            freq_index=hop_frequency(link.params, self.engine.now),
            kind=FrameKind.LINK_DATA,
            payload=bytes([proto]) + body,
            to=peer.address,
        )
        return self.engine.broadcast(frame, sender)

    def _on_link_data(self, receiver: Device, frame: RadioFrame, now: SimTime) -> None:
        if not frame.payload:
            return
        proto = frame.payload[0]
        if proto == PROTO_LINK:
            msg = frame.payload[1]
            if msg == _MSG_PAGE_ACCEPT:
                self._on_page_accept(receiver, frame, now)
            elif msg == _MSG_PAGE_PARAMS:
                self._on_page_params(receiver, frame, now)
            elif msg == _MSG_PARAMS_ACK:
                self._on_params_ack(receiver, frame, now)
            elif msg == _MSG_KEEPALIVE:
                self._on_keepalive(receiver, frame)
            elif msg == _MSG_KEEPALIVE_ACK:
                self._on_keepalive_ack(receiver, frame)
            return
        handler = self._protocols.get(proto)
        if handler is None:
            return
        link = self.link_between(receiver.address, frame.from_addr)
        if link is None:
            return
        handler(link, receiver, frame.from_addr, frame.payload[1:], now)

    def _on_keepalive(self, receiver: Device, frame: RadioFrame) -> None:
        link = self.link_between(receiver.address, frame.from_addr)
        if link is None or link.state is not LinkState.CONNECTED:
            return
        if receiver is link.slave:
            link.slave_heard = True
            self._send_control(link, receiver, _MSG_KEEPALIVE_ACK)

    def _on_keepalive_ack(self, receiver: Device, frame: RadioFrame) -> None:
        link = self.link_between(receiver.address, frame.from_addr)
        if link is None or link.state is not LinkState.CONNECTED:
            return
        if receiver is link.master:
            link.ka_pending = False
            link.ka_misses = 0

    # -- pairing ------------------------------------------------------------

    def pair_link(self, link: Link) -> Optional[AuthOutcome]:
        """Authenticate a link when both endpoints have a configured PIN.

        Each side derives its initialization key from its own PIN, the
        slave's address, and a shared random value; mutual challenge
        response then succeeds only when the PINs match. Returns None when
        either side has no PIN.
        """
        pin_m = self._pins.get(link.master.address)
        pin_s = self._pins.get(link.slave.address)
        if pin_m is None or pin_s is None:
            return None
        rand = self.engine.rng.randbytes(16)
        key_m = derive_init_key(pin_m, link.slave.address, rand)
        key_s = derive_init_key(pin_s, link.slave.address, rand)
        outcome = authenticate(
            key_m, key_s, link.master.address, link.slave.address, self.engine.rng
        )
        if outcome is AuthOutcome.SUCCESS:
            link.authenticated = True
            link.link_key = key_m
            self.engine.emit(
                "auth_ok",
                link.master.address,
                peer=str(link.slave.address),
                key_hash=key_m.hash8(),
            )
        else:
            self.engine.emit(
                "auth_fail",
                link.master.address,
                peer=str(link.slave.address),
                key_hash_local=key_m.hash8(),
                key_hash_peer=key_s.hash8(),
            )
        return outcome

    # -- topology operations ------------------------------------------------

    def role_switch(self, link: Link) -> Link:
        """Swap master and slave on a live link, moving it between piconets."""
        if link.state is not LinkState.CONNECTED:
            raise LinkError("cannot switch roles on a lost link")
        new_master, new_slave = link.slave, link.master
        target = self.piconets.get(new_master.address)
        if (
            target is not None
            and new_slave.address not in target.links
            and len(target) >= MAX_SLAVES
        ):
            raise WouldViolateTopology(
                f"{new_master.address} piconet already has {MAX_SLAVES} slaves"
            )
        old = self.piconets[link.master.address]
        del old.links[link.slave.address]
        if not old.links:
            del self.piconets[link.master.address]
        if target is None:
            target = Piconet(
                master=new_master,
                rate_cap_bps=self._rate_caps.get(
                    new_master.address, self.params.version_rate_cap_bps
                ),
            )
            self.piconets[new_master.address] = target
        target.links[new_slave.address] = link
        link.master, link.slave = new_master, new_slave
        link.ka_pending = False
        link.ka_misses = 0
        link.slave_heard = False
        link.slave_misses = 0
        self._start_supervision(link)
        self.engine.emit(
            "role_switch",
            new_master.address,
            peer=str(new_slave.address),
        )
        return link

    def admit_traffic(
        self, master: DeviceAddress, requested: dict[DeviceAddress, int]
    ) -> dict[DeviceAddress, int]:
        """Grant per-slave rates under the piconet's aggregate cap.

        When total demand fits the cap every request is granted in full;
        otherwise each slave gets its proportional share rounded down, so
        the sum of grants never exceeds the cap.
        """
        piconet = self.piconets.get(master)
        if piconet is None:
            raise LinkError(f"{master} does not master a piconet")
        for addr, bps in requested.items():
            if addr not in piconet.links:
                raise LinkError(f"{addr} is not a slave of {master}")
            if bps < 0:
                raise ValueError("requested rate must be non-negative")
        total = sum(requested.values())
        cap = piconet.rate_cap_bps
        if total <= cap:
            granted = dict(requested)
        else:
            granted = {addr: bps * cap // total for addr, bps in requested.items()}
        self.engine.emit(
            "admit",
            master,
            granted={str(addr): bps for addr, bps in granted.items()},
            cap_bps=cap,
            requested_bps=total,
        )
        return granted

    # -- invariants ----------------------------------------------------------

    def topology_violations(self) -> list[str]:
        """Structural checks; an empty list means the topology is sound."""
        problems = []
        for master, piconet in self.piconets.items():
            if len(piconet) > MAX_SLAVES:
                problems.append(f"piconet of {master} has {len(piconet)} slaves")
            if piconet.master.address != master:
                problems.append(f"piconet key {master} does not match its master")
            for slave, link in piconet.links.items():
                if link.master.address != master or link.slave.address != slave:
                    problems.append(f"link {link.pair} misfiled under {master}/{slave}")
        for (a, b), link in self.links.items():
            if pair_key(link.master.address, link.slave.address) != (a, b):
                problems.append(f"link endpoints do not match key {(a, b)}")
        return problems
