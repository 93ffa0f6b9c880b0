"""Channel management over links: data channel lifecycle, delivery, clock sync.

One control channel exists per device pair, multiplexing any number of data
channels, each identified by an id that is never reused within the pair. A
full creation handshake costs four control messages; reconnecting a channel
that survived a link loss costs exactly two, which is what makes recovery
cheap. Data channels are reliable (stop-and-wait retransmission, exactly
once delivery, queue preserved across link loss) or streaming (single
attempt, dropped on loss, never queued). The control channel also provides
two-way clock sampling from which the requester estimates the peer's clock
offset with a bounded error.

Payloads on an authenticated link are enciphered with the link key and the
transmit clock; the clock rides in the data header so the receiver can
compute the same keystream.
"""

from __future__ import annotations

import enum
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .core import DeviceAddress, SimTime
from .engine import Device, Engine
from .link import Link, LinkManager, LinkState, PROTO_MCAP, pair_key
from .params import SimParams
from .security import NotAuthenticated, apply_cipher


class McapError(Exception):
    """Base for channel-management failures."""


class LinkDown(McapError):
    """The operation needs a live link."""


class ChannelClosed(McapError):
    """The data channel has been deleted."""


class McapTimeout(McapError):
    """A control exchange got no response within its deadline."""


class SyncTimeout(McapTimeout):
    """Clock sampling got no response within its deadline."""


_OP_CREATE_REQ = 1
_OP_CREATE_ACCEPT = 2
_OP_CREATE_CONFIG = 3
_OP_CREATE_CONFIRM = 4
_OP_RECONNECT_REQ = 5
_OP_RECONNECT_ACCEPT = 6
_OP_DELETE_REQ = 7
_OP_DELETE_ACK = 8
_OP_ABORT = 9
_OP_DATA = 10
_OP_DATA_ACK = 11
_OP_SYNC_REQ = 12
_OP_SYNC_RSP = 13

_OP_NAMES = {
    _OP_CREATE_REQ: "create_req",
    _OP_CREATE_ACCEPT: "create_accept",
    _OP_CREATE_CONFIG: "create_config",
    _OP_CREATE_CONFIRM: "create_confirm",
    _OP_RECONNECT_REQ: "reconnect_req",
    _OP_RECONNECT_ACCEPT: "reconnect_accept",
    _OP_DELETE_REQ: "delete_req",
    _OP_DELETE_ACK: "delete_ack",
    _OP_ABORT: "abort",
}

_DATA_HEADER = struct.Struct(">HIBq")
_FLAG_RELIABLE = 1
_FLAG_ENCRYPTED = 2


class ChannelState(enum.Enum):
    ACTIVE = "active"
    # The link dropped underneath the channel; state and queue are kept for
    # the two-message reconnect.
    SUSPENDED = "suspended"
    CLOSED = "closed"


class SendStatus(enum.Enum):
    QUEUED = "queued"
    DELIVERED = "delivered"
    DROPPED = "dropped"
    ABANDONED = "abandoned"


@dataclass
class SendOp:
    """Outcome handle for one payload submission."""

    seq: int
    status: SendStatus

    @property
    def done(self) -> bool:
        return self.status is not SendStatus.QUEUED


@dataclass
class _QueuedItem:
    seq: int
    payload: bytes
    op: SendOp
    attempts: int = 0


@dataclass
class ClockSyncResult:
    """Requester's estimate of the peer clock relative to its own."""

    offset_us: int
    accuracy_us: int
    rtt_us: int


@dataclass
class McapOp:
    """Generic async handle resolved while the engine runs."""

    result: object = None
    error: Optional[Exception] = None
    done: bool = False
    _callbacks: list[Callable[["McapOp"], None]] = field(default_factory=list)

    def on_complete(self, fn: Callable[["McapOp"], None]) -> None:
        if self.done:
            fn(self)
        else:
            self._callbacks.append(fn)

    def _resolve(self, result=None, error=None) -> None:
        if self.done:
            return
        self.result = result
        self.error = error
        self.done = True
        for fn in self._callbacks:
            fn(self)


@dataclass
class DataChannel:
    """One logical data pipe between a pair; shared by both endpoints."""

    control: "ControlChannel"
    mdl_id: int
    reliable: bool
    state: ChannelState = ChannelState.ACTIVE
    tx_seq: dict[DeviceAddress, int] = field(default_factory=dict)
    rx_last: dict[DeviceAddress, int] = field(default_factory=dict)
    queue: dict[DeviceAddress, deque] = field(default_factory=dict)
    in_flight: dict[DeviceAddress, bool] = field(default_factory=dict)
    _retx_timers: dict[DeviceAddress, int] = field(default_factory=dict)
    _receivers: list[Callable] = field(default_factory=list)

    def on_receive(self, fn: Callable[["DataChannel", DeviceAddress, bytes, SimTime], None]) -> None:
        self._receivers.append(fn)

    def pending_count(self, sender: DeviceAddress) -> int:
        return len(self.queue.get(sender, ()))


@dataclass
class ControlChannel:
    """Per-pair control plane owning the data channel id space."""

    link: Link
    next_mdl_id: int = 1
    next_token: int = 1
    channels: dict[int, DataChannel] = field(default_factory=dict)

    @property
    def pair(self) -> tuple[DeviceAddress, DeviceAddress]:
        return self.link.pair


@dataclass
class _Exchange:
    send: Callable[[], None]
    fail: Callable[[McapError], None]
    deadline_us: SimTime
    retry_us: Optional[int]
    done: bool = False


class McapManager:
    """Channel management state for every pair on one engine."""

    def __init__(self, engine: Engine, links: LinkManager, params: SimParams):
        self.engine = engine
        self.links = links
        self.params = params
        self.controls: dict[tuple[DeviceAddress, DeviceAddress], ControlChannel] = {}
        self._exchanges: dict[tuple, _Exchange] = {}
        self._sync_pending: dict[tuple, tuple[McapOp, Device, int]] = {}
        self._creating: dict[tuple, tuple] = {}
        self._reconnecting: dict[tuple, Callable[[], None]] = {}
        self._deleting: dict[tuple, Callable[[], None]] = {}
        links.register_protocol(PROTO_MCAP, self._on_pdu)

    # -- control channel ----------------------------------------------------

    def open_control_channel(self, a: Device, b: Device) -> ControlChannel:
        """Get or create the single control channel between two devices.

        Requires a live, authenticated link between them.
        """
        key = pair_key(a.address, b.address)
        existing = self.controls.get(key)
        if existing is not None:
            return existing
        link = self.links.link_between(a.address, b.address)
        if link is None or link.state is not LinkState.CONNECTED:
            raise LinkDown(f"no live link between {a.address} and {b.address}")
        if not link.authenticated:
            raise NotAuthenticated(f"link {a.address}<->{b.address} is not authenticated")
        control = ControlChannel(link=link)
        self.controls[key] = control
        link.on_state_change(lambda lk, c=control: self._on_link_state(c, lk))
        self.engine.emit("control_open", a.address, peer=str(b.address))
        return control

    def _on_link_state(self, control: ControlChannel, link: Link) -> None:
        if link.state is LinkState.LOST:
            for channel in control.channels.values():
                if channel.state is ChannelState.ACTIVE:
                    channel.state = ChannelState.SUSPENDED
                    self._halt_retx(channel)
                    self.engine.emit(
                        "mdl_suspended",
                        link.master.address,
                        mdl_id=channel.mdl_id,
                    )

    def _halt_retx(self, channel: DataChannel) -> None:
        for addr, timer in channel._retx_timers.items():
            self.engine.cancel(timer)
        channel._retx_timers.clear()
        for addr in channel.in_flight:
            channel.in_flight[addr] = False

    # -- wire helpers -------------------------------------------------------

    def _tx(self, control: ControlChannel, sender: Device, opcode: int, body: bytes) -> bool:
        try:
            self.links.send_on_link(
                control.link, sender, PROTO_MCAP, bytes([opcode]) + body
            )
        except Exception:
            return False
        name = _OP_NAMES.get(opcode)
        if name is not None:
            mdl_id = struct.unpack(">H", body[:2])[0] if len(body) >= 2 else 0
            self.engine.emit("mcap_tx", sender.address, op=name, mdl_id=mdl_id)
        return True

    # -- exchange machinery -------------------------------------------------

    def _start_exchange(
        self,
        key: tuple,
        send: Callable[[], None],
        fail: Callable[[McapError], None],
        timeout_us: int,
        retry_us: Optional[int],
    ) -> None:
        exchange = _Exchange(
            send=send,
            fail=fail,
            deadline_us=self.engine.now + timeout_us,
            retry_us=retry_us,
        )
        self._exchanges[key] = exchange
        self._exchange_tick(key, exchange)

    def _exchange_tick(self, key: tuple, exchange: _Exchange) -> None:
        if exchange.done:
            return
        now = self.engine.now
        if now >= exchange.deadline_us:
            exchange.done = True
            self._exchanges.pop(key, None)
            exchange.fail(McapTimeout(str(key)))
            return
        exchange.send()
        if exchange.retry_us is None:
            self.engine.schedule(
                exchange.deadline_us, lambda: self._exchange_tick(key, exchange)
            )
        else:
            self.engine.schedule_in(
                min(exchange.retry_us, exchange.deadline_us - now),
                lambda: self._exchange_tick(key, exchange),
            )

    def _resolve_exchange(self, key: tuple) -> Optional[_Exchange]:
        exchange = self._exchanges.pop(key, None)
        if exchange is not None:
            exchange.done = True
        return exchange

    # -- data channel creation ----------------------------------------------

    def create_data_channel(
        self, control: ControlChannel, initiator: Device, reliable: bool
    ) -> McapOp:
        """Four-message handshake yielding a new data channel.

        The id is taken from the pair's counter before the first message,
        so even a failed attempt permanently consumes it.
        """
        if control.link.state is not LinkState.CONNECTED:
            raise LinkDown("cannot create a channel while the link is down")
        peer = control.link.peer_of(initiator.address)
        mdl_id = control.next_mdl_id
        control.next_mdl_id += 1
        op = McapOp()
        flags = _FLAG_RELIABLE if reliable else 0
        req = struct.pack(">HB", mdl_id, flags)

        def fail(err: McapError) -> None:
            op._resolve(error=err)

        self._start_exchange(
            (control.pair, "create", mdl_id),
            lambda: self._tx(control, initiator, _OP_CREATE_REQ, req),
            fail,
            self.params.handshake_timeout_us,
            self.params.retransmit_interval_us,
        )
        self._creating[(control.pair, mdl_id)] = (op, initiator, reliable, peer)
        return op

    def _on_create_req(self, control: ControlChannel, receiver: Device, body: bytes) -> None:
        mdl_id, flags = struct.unpack(">HB", body[:3])
        channel = control.channels.get(mdl_id)
        if channel is None:
            channel = DataChannel(
                control=control, mdl_id=mdl_id, reliable=bool(flags & _FLAG_RELIABLE)
            )
            control.channels[mdl_id] = channel
            if mdl_id >= control.next_mdl_id:
                control.next_mdl_id = mdl_id + 1
        self._tx(control, receiver, _OP_CREATE_ACCEPT, struct.pack(">H", mdl_id))

    def _on_create_accept(self, control: ControlChannel, receiver: Device, body: bytes) -> None:
        mdl_id = struct.unpack(">H", body[:2])[0]
        if self._resolve_exchange((control.pair, "create", mdl_id)) is None:
            return
        pending = self._creating.get((control.pair, mdl_id))
        if pending is None:
            return
        op, initiator, reliable, peer = pending

        def fail(err: McapError) -> None:
            self._creating.pop((control.pair, mdl_id), None)
            op._resolve(error=err)

        self._start_exchange(
            (control.pair, "config", mdl_id),
            lambda: self._tx(
                control, initiator, _OP_CREATE_CONFIG, struct.pack(">H", mdl_id)
            ),
            fail,
            self.params.handshake_timeout_us,
            self.params.retransmit_interval_us,
        )

    def _on_create_config(self, control: ControlChannel, receiver: Device, body: bytes) -> None:
        mdl_id = struct.unpack(">H", body[:2])[0]
        channel = control.channels.get(mdl_id)
        if channel is None:
            return
        self._tx(control, receiver, _OP_CREATE_CONFIRM, struct.pack(">H", mdl_id))

    def _on_create_confirm(self, control: ControlChannel, receiver: Device, body: bytes) -> None:
        mdl_id = struct.unpack(">H", body[:2])[0]
        if self._resolve_exchange((control.pair, "config", mdl_id)) is None:
            return
        pending = self._creating.pop((control.pair, mdl_id), None)
        if pending is None:
            return
        op, initiator, reliable, peer = pending
        channel = control.channels.get(mdl_id)
        if channel is None:
            channel = DataChannel(control=control, mdl_id=mdl_id, reliable=reliable)
            control.channels[mdl_id] = channel
        self.engine.emit(
            "mdl_create",
            initiator.address,
            mdl_id=mdl_id,
            reliable=reliable,
            peer=str(peer.address),
        )
        op._resolve(result=channel)

    # -- reconnect ----------------------------------------------------------

    def reconnect_data_channel(self, channel: DataChannel, initiator: Device) -> McapOp:
        """Two-message handshake rebinding a suspended channel to its link."""
        control = channel.control
        if channel.state is ChannelState.CLOSED:
            raise ChannelClosed(f"mdl {channel.mdl_id} is closed")
        if control.link.state is not LinkState.CONNECTED:
            raise LinkDown("cannot reconnect a channel while the link is down")
        op = McapOp()
        if channel.state is ChannelState.ACTIVE:
            op._resolve(result=channel)
            return op
        mdl_id = channel.mdl_id

        def fail(err: McapError) -> None:
            op._resolve(error=err)

        def complete() -> None:
            channel.state = ChannelState.ACTIVE
            self.engine.emit(
                "mdl_reconnect",
                initiator.address,
                mdl_id=mdl_id,
                pending=channel.pending_count(initiator.address),
            )
            op._resolve(result=channel)
            self._pump(channel, initiator)

        self._reconnecting[(control.pair, mdl_id)] = complete
        self._start_exchange(
            (control.pair, "reconnect", mdl_id),
            lambda: self._tx(
                control, initiator, _OP_RECONNECT_REQ, struct.pack(">H", mdl_id)
            ),
            fail,
            self.params.handshake_timeout_us,
            self.params.retransmit_interval_us,
        )
        return op

    def _on_reconnect_req(self, control: ControlChannel, receiver: Device, body: bytes) -> None:
        mdl_id = struct.unpack(">H", body[:2])[0]
        channel = control.channels.get(mdl_id)
        if channel is None or channel.state is ChannelState.CLOSED:
            return
        if channel.state is ChannelState.SUSPENDED:
            channel.state = ChannelState.ACTIVE
        self._tx(control, receiver, _OP_RECONNECT_ACCEPT, struct.pack(">H", mdl_id))
        self._pump(channel, receiver)

    def _on_reconnect_accept(self, control: ControlChannel, receiver: Device, body: bytes) -> None:
        mdl_id = struct.unpack(">H", body[:2])[0]
        if self._resolve_exchange((control.pair, "reconnect", mdl_id)) is None:
            return
        complete = self._reconnecting.pop((control.pair, mdl_id), None)
        if complete is not None:
            complete()

    # -- close --------------------------------------------------------------

    def close_channel(
        self, channel: DataChannel, initiator: Device, abort: bool = False
    ) -> McapOp:
        """Delete a channel; ``abort`` tears it down without waiting.

        Undelivered queued payloads are abandoned on both sides.
        """
        control = channel.control
        op = McapOp()
        if channel.state is ChannelState.CLOSED:
            op._resolve(result=channel)
            return op
        mdl_id = channel.mdl_id
        if abort:
            if control.link.state is LinkState.CONNECTED:
                self._tx(control, initiator, _OP_ABORT, struct.pack(">H", mdl_id))
            self._close_local(channel, initiator.address, "abort")
            op._resolve(result=channel)
            return op

        def fail(err: McapError) -> None:
            op._resolve(error=err)

        def complete() -> None:
            self._close_local(channel, initiator.address, "delete")
            op._resolve(result=channel)

        self._deleting[(control.pair, mdl_id)] = complete
        self._start_exchange(
            (control.pair, "delete", mdl_id),
            lambda: self._tx(
                control, initiator, _OP_DELETE_REQ, struct.pack(">H", mdl_id)
            ),
            fail,
            self.params.handshake_timeout_us,
            self.params.retransmit_interval_us,
        )
        return op

    def abandon_pending(
        self,
        channel: DataChannel,
        sender: DeviceAddress,
        delivered_seqs: set[int],
    ) -> int:
        """Settle a sender's queue without transmitting further.

        Items whose seq appears in ``delivered_seqs`` are marked delivered
        (the peer already has them); the rest are abandoned. Returns the
        abandoned count.
        """
        queue = channel.queue.get(sender)
        abandoned = 0
        if queue:
            for item in queue:
                if item.seq in delivered_seqs:
                    item.op.status = SendStatus.DELIVERED
                else:
                    item.op.status = SendStatus.ABANDONED
                    abandoned += 1
            queue.clear()
        channel.in_flight[sender] = False
        timer = channel._retx_timers.pop(sender, None)
        if timer is not None:
            self.engine.cancel(timer)
        return abandoned

    def _close_local(self, channel: DataChannel, by: DeviceAddress, mode: str) -> None:
        if channel.state is ChannelState.CLOSED:
            return
        channel.state = ChannelState.CLOSED
        self._halt_retx(channel)
        abandoned = 0
        for addr, queue in channel.queue.items():
            for item in queue:
                item.op.status = SendStatus.ABANDONED
                abandoned += 1
            queue.clear()
        self.engine.emit(
            "mdl_close", by, mdl_id=channel.mdl_id, mode=mode, abandoned=abandoned
        )

    def _on_delete_req(self, control: ControlChannel, receiver: Device, body: bytes) -> None:
        mdl_id = struct.unpack(">H", body[:2])[0]
        channel = control.channels.get(mdl_id)
        if channel is not None:
            self._close_local(channel, receiver.address, "delete")
        self._tx(control, receiver, _OP_DELETE_ACK, struct.pack(">H", mdl_id))

    def _on_delete_ack(self, control: ControlChannel, receiver: Device, body: bytes) -> None:
        mdl_id = struct.unpack(">H", body[:2])[0]
        if self._resolve_exchange((control.pair, "delete", mdl_id)) is None:
            return
        complete = self._deleting.pop((control.pair, mdl_id), None)
        if complete is not None:
            complete()

    def _on_abort(self, control: ControlChannel, receiver: Device, body: bytes) -> None:
        mdl_id = struct.unpack(">H", body[:2])[0]
        channel = control.channels.get(mdl_id)
        if channel is not None:
            self._close_local(channel, receiver.address, "abort")

    # -- data plane ---------------------------------------------------------

    def send(self, channel: DataChannel, sender: Device, payload: bytes) -> SendOp:
        """Submit one payload; the returned handle tracks its outcome.

        Reliable channels queue and retransmit until the peer acknowledges,
        surviving link loss. Streaming channels transmit once, immediately,
        and report Dropped when the medium or link does not carry the frame.
        """
        control = channel.control
        if channel.state is ChannelState.CLOSED:
            raise ChannelClosed(f"mdl {channel.mdl_id} is closed")
        if sender.address not in control.pair:
            raise McapError(f"{sender.address} is not an endpoint")
        limit = control.link.params.page_size_bytes
        if len(payload) > limit:
            raise McapError(f"payload of {len(payload)} bytes exceeds page size {limit}")
        seq = channel.tx_seq.get(sender.address, 0) + 1
        channel.tx_seq[sender.address] = seq
        if channel.reliable:
            op = SendOp(seq=seq, status=SendStatus.QUEUED)
            queue = channel.queue.setdefault(sender.address, deque())
            queue.append(_QueuedItem(seq=seq, payload=payload, op=op))
            self._pump(channel, sender)
            return op
        if (
            channel.state is ChannelState.SUSPENDED
            or control.link.state is not LinkState.CONNECTED
        ):
            self.engine.emit(
                "mdl_drop",
                sender.address,
                mdl_id=channel.mdl_id,
                seq=seq,
                reason="link_down",
            )
            return SendOp(seq=seq, status=SendStatus.DROPPED)
        delivered = self._tx_data(channel, sender, seq, payload, attempts=0)
        if delivered:
            return SendOp(seq=seq, status=SendStatus.DELIVERED)
        self.engine.emit(
            "mdl_drop",
            sender.address,
            mdl_id=channel.mdl_id,
            seq=seq,
            reason="loss",
        )
        return SendOp(seq=seq, status=SendStatus.DROPPED)

    def _tx_data(
        self, channel: DataChannel, sender: Device, seq: int, payload: bytes, attempts: int
    ) -> bool:
        control = channel.control
        link = control.link
        flags = _FLAG_RELIABLE if channel.reliable else 0
        clock = self.engine.now
        body = payload
        if link.authenticated and link.link_key is not None:
            body = apply_cipher(link.link_key, clock, payload)
            flags |= _FLAG_ENCRYPTED
        header = _DATA_HEADER.pack(channel.mdl_id, seq, flags, clock)
        try:
            deliveries = self.links.send_on_link(
                link, sender, PROTO_MCAP, bytes([_OP_DATA]) + header + body
            )
        except Exception:
            return False
        self.engine.emit(
            "mdl_send",
            sender.address,
            mdl_id=channel.mdl_id,
            seq=seq,
            retx=attempts,
            bytes=len(payload),
        )
        return bool(deliveries)

    def _pump(self, channel: DataChannel, sender: Device) -> None:
        addr = sender.address
        if channel.state is not ChannelState.ACTIVE:
            return
        if channel.in_flight.get(addr):
            return
        queue = channel.queue.get(addr)
        if not queue:
            return
        item = queue[0]
        self._tx_data(channel, sender, item.seq, item.payload, item.attempts)
        item.attempts += 1
        channel.in_flight[addr] = True
        self._arm_retx(channel, sender)

    def _arm_retx(self, channel: DataChannel, sender: Device) -> None:
        addr = sender.address
        channel._retx_timers[addr] = self.engine.schedule_in(
            self.params.retransmit_interval_us,
            lambda: self._retx_tick(channel, sender),
        )

    def _retx_tick(self, channel: DataChannel, sender: Device) -> None:
        addr = sender.address
        if channel.state is not ChannelState.ACTIVE:
            return
        if not channel.in_flight.get(addr):
            return
        queue = channel.queue.get(addr)
        if not queue:
            channel.in_flight[addr] = False
            return
        item = queue[0]
        self._tx_data(channel, sender, item.seq, item.payload, item.attempts)
        item.attempts += 1
        self._arm_retx(channel, sender)

    def _on_data(
        self, control: ControlChannel, receiver: Device, from_addr: DeviceAddress, body: bytes, now: SimTime
    ) -> None:
        mdl_id, seq, flags, clock = _DATA_HEADER.unpack_from(body, 0)
        channel = control.channels.get(mdl_id)
        if channel is None or channel.state is ChannelState.CLOSED:
            return
        payload = body[_DATA_HEADER.size :]
        link = control.link
        if flags & _FLAG_ENCRYPTED:
            if link.link_key is None:
                return
            payload = apply_cipher(link.link_key, clock, payload)
        if flags & _FLAG_RELIABLE:
            last = channel.rx_last.get(from_addr, 0)
            if seq <= last:
                self._tx(
                    control, receiver, _OP_DATA_ACK, struct.pack(">HI", mdl_id, seq)
                )
                return
            if seq != last + 1:
                return
            channel.rx_last[from_addr] = seq
            self._tx(control, receiver, _OP_DATA_ACK, struct.pack(">HI", mdl_id, seq))
        self.engine.emit(
            "mdl_rx",
            receiver.address,
            mdl_id=mdl_id,
            seq=seq,
            bytes=len(payload),
            reliable=bool(flags & _FLAG_RELIABLE),
        )
        for fn in list(channel._receivers):
            fn(channel, from_addr, payload, now)

    def _on_data_ack(self, control: ControlChannel, receiver: Device, body: bytes) -> None:
        mdl_id, seq = struct.unpack(">HI", body[:6])
        channel = control.channels.get(mdl_id)
        if channel is None:
            return
        addr = receiver.address
        queue = channel.queue.get(addr)
        if not queue or not channel.in_flight.get(addr):
            return
        if queue[0].seq != seq:
            return
        item = queue.popleft()
        item.op.status = SendStatus.DELIVERED
        channel.in_flight[addr] = False
        timer = channel._retx_timers.pop(addr, None)
        if timer is not None:
            self.engine.cancel(timer)
        self.engine.emit("mdl_ack", addr, mdl_id=mdl_id, seq=seq)
        self._pump(channel, receiver)

    # -- clock sync ---------------------------------------------------------

    def sync_clocks(self, control: ControlChannel, requester: Device) -> McapOp:
        """Two-way clock sampling; resolves to a ClockSyncResult.

        The estimate places the exchange's remote timestamp against the
        midpoint of the local send and receive times, so its error is at
        most half the round trip, which is also the reported accuracy.
        """
        if control.link.state is not LinkState.CONNECTED:
            raise LinkDown("cannot sample clocks while the link is down")
        token = control.next_token
        control.next_token += 1
        op = McapOp()
        t0 = requester.local_time(self.engine.now)
        key = (control.pair, "sync", token)
        self._sync_pending[key] = (op, requester, t0)

        def fail(err: McapError) -> None:
            self._sync_pending.pop(key, None)
            self.engine.emit("sync_fail", requester.address, token=token)
            op._resolve(error=SyncTimeout(f"token {token}"))

        self._start_exchange(
            key,
            lambda: self._tx_sync_req(control, requester, token),
            fail,
            self.params.sync_timeout_us,
            None,
        )
        return op

    def _tx_sync_req(self, control: ControlChannel, requester: Device, token: int) -> None:
        self._tx(control, requester, _OP_SYNC_REQ, struct.pack(">I", token))

    def _on_sync_req(self, control: ControlChannel, receiver: Device, body: bytes) -> None:
        token = struct.unpack(">I", body[:4])[0]
        t1 = receiver.local_time(self.engine.now)
        self._tx(control, receiver, _OP_SYNC_RSP, struct.pack(">Iq", token, t1))

    def _on_sync_rsp(self, control: ControlChannel, receiver: Device, body: bytes) -> None:
        token, t1 = struct.unpack(">Iq", body[:12])
        key = (control.pair, "sync", token)
        if self._resolve_exchange(key) is None:
            return
        pending = self._sync_pending.pop(key, None)
        if pending is None:
            return
        op, requester, t0 = pending
        t2 = requester.local_time(self.engine.now)
        rtt = t2 - t0
        offset = t1 - (t0 + t2) // 2
        accuracy = (rtt + 1) // 2
        peer = control.link.peer_of(requester.address)
        self.engine.emit(
            "clock_sync",
            requester.address,
            peer=str(peer.address),
            offset_us=offset,
            accuracy_us=accuracy,
            rtt_us=rtt,
        )
        op._resolve(
            result=ClockSyncResult(offset_us=offset, accuracy_us=accuracy, rtt_us=rtt)
        )

    # -- dispatch -----------------------------------------------------------

    def _on_pdu(
        self, link: Link, receiver: Device, from_addr: DeviceAddress, body: bytes, now: SimTime
    ) -> None:
        if not body:
            return
        control = self.controls.get(pair_key(receiver.address, from_addr))
        if control is None:
            return
        opcode = body[0]
        rest = body[1:]
        if opcode == _OP_CREATE_REQ:
            self._on_create_req(control, receiver, rest)
        elif opcode == _OP_CREATE_ACCEPT:
            self._on_create_accept(control, receiver, rest)
        elif opcode == _OP_CREATE_CONFIG:
            self._on_create_config(control, receiver, rest)
        elif opcode == _OP_CREATE_CONFIRM:
            self._on_create_confirm(control, receiver, rest)
        elif opcode == _OP_RECONNECT_REQ:
            self._on_reconnect_req(control, receiver, rest)
        elif opcode == _OP_RECONNECT_ACCEPT:
            self._on_reconnect_accept(control, receiver, rest)
        elif opcode == _OP_DELETE_REQ:
            self._on_delete_req(control, receiver, rest)
        elif opcode == _OP_DELETE_ACK:
            self._on_delete_ack(control, receiver, rest)
        elif opcode == _OP_ABORT:
            self._on_abort(control, receiver, rest)
        elif opcode == _OP_DATA:
            self._on_data(control, receiver, from_addr, rest, now)
        elif opcode == _OP_DATA_ACK:
            self._on_data_ack(control, receiver, rest)
        elif opcode == _OP_SYNC_REQ:
            self._on_sync_req(control, receiver, rest)
        elif opcode == _OP_SYNC_RSP:
            self._on_sync_rsp(control, receiver, rest)
