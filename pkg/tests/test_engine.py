from __future__ import annotations

import pytest

from hdpsim.engine import (
    Engine,
    FrameKind,
    MediumModel,
    RadioFrame,
    SchedulingInPast,
    Trace,
    UnknownDevice,
)

from conftest import add_device, addr, make_stack


def test_events_run_in_time_then_insertion_order():
    engine = Engine()
    seen = []
    engine.schedule(20, lambda: seen.append("b"))
    engine.schedule(10, lambda: seen.append("a"))
    engine.schedule(20, lambda: seen.append("c"))
    engine.run_until(30)
    assert seen == ["a", "b", "c"]
    assert engine.now == 30


def test_schedule_at_now_is_allowed_but_past_is_not():
    engine = Engine()
    engine.run_until(100)
    engine.schedule(100, lambda: None)
    with pytest.raises(SchedulingInPast):
        engine.schedule(99, lambda: None)


def test_cancel_prevents_execution():
    engine = Engine()
    seen = []
    handle = engine.schedule(10, lambda: seen.append("x"))
    engine.cancel(handle)
    engine.run_until(20)
    assert seen == []


def test_run_until_does_not_execute_later_events():
    engine = Engine()
    seen = []
    engine.schedule(50, lambda: seen.append("later"))
    engine.run_until(49)
    assert seen == []
    assert engine.pending_events == 1
    engine.run_until(50)
    assert seen == ["later"]


def test_trace_rejects_time_going_backwards():
    trace = Trace()
    trace.append(5, "ev", "dev", {})
    with pytest.raises(ValueError):
        trace.append(4, "ev", "dev", {})


def test_unknown_device_lookup_raises():
    engine = Engine()
    with pytest.raises(UnknownDevice):
        engine.device(addr(1))


def test_move_device_emits_move_event():
    stack = make_stack()
    add_device(stack, 1)
    stack.engine.move_device(addr(1), (3.0, 4.0))
    events = [e for e in stack.engine.trace if e.ev == "move"]
    assert len(events) == 1
    assert stack.engine.device(addr(1)).position == (3.0, 4.0)


def _broadcast_probe(stack, sender, freq=0):
    frame = RadioFrame(
        from_addr=sender.address,
        freq_index=freq,
        kind=FrameKind.INQUIRY,
        payload=b"",
    )
    return stack.engine.broadcast(frame, sender)


def test_broadcast_respects_radio_range():
    stack = make_stack()
    a = add_device(stack, 1, position=(0.0, 0.0))
    add_device(stack, 2, position=(5.0, 0.0))
    add_device(stack, 3, position=(50.0, 0.0))
    stack.engine.add_listen_provider(lambda device, t: range(32))
    deliveries = _broadcast_probe(stack, a)
    receivers = {device.address for device, _ in deliveries}
    assert addr(2) in receivers
    assert addr(3) not in receivers


def test_broadcast_only_reaches_devices_listening_on_frequency():
    stack = make_stack()
    a = add_device(stack, 1)
    add_device(stack, 2, position=(1.0, 0.0))
    # Default standby scan at t=0 listens on frequency 0.
    assert _broadcast_probe(stack, a, freq=0)
    assert not _broadcast_probe(stack, a, freq=7)


def test_broadcast_to_filter_excludes_third_parties():
    stack = make_stack()
    a = add_device(stack, 1)
    add_device(stack, 2, position=(1.0, 0.0))
    add_device(stack, 3, position=(1.0, 1.0))
    frame = RadioFrame(
        from_addr=a.address,
        freq_index=0,
        kind=FrameKind.INQUIRY,
        payload=b"",
        to=addr(2),
    )
    deliveries = stack.engine.broadcast(frame, a)
    assert [device.address for device, _ in deliveries] == [addr(2)]


def test_delivery_delay_is_at_least_propagation():
    stack = make_stack(propagation_us=3)
    a = add_device(stack, 1)
    add_device(stack, 2, position=(1.0, 0.0))
    deliveries = _broadcast_probe(stack, a)
    assert all(at == stack.engine.now + 3 for _, at in deliveries)


def test_jitter_keeps_delay_positive_and_bounded():
    stack = make_stack(jitter_us=50, seed=9)
    a = add_device(stack, 1)
    add_device(stack, 2, position=(1.0, 0.0))
    delays = []
    for _ in range(200):
        for _, at in _broadcast_probe(stack, a):
            delays.append(at - stack.engine.now)
    assert all(1 <= d <= 51 for d in delays)
    assert len(set(delays)) > 1


def test_loss_probability_drops_some_frames_deterministically():
    drops = []
    for _ in range(2):
        stack = make_stack(loss=0.5, seed=77)
        a = add_device(stack, 1)
        add_device(stack, 2, position=(1.0, 0.0))
        outcomes = [bool(_broadcast_probe(stack, a)) for _ in range(100)]
        drops.append(outcomes)
    assert drops[0] == drops[1]
    assert any(drops[0]) and not all(drops[0])


def test_same_seed_same_trace_bytes():
    def run(seed):
        stack = make_stack(loss=0.3, seed=seed, jitter_us=10)
        a = add_device(stack, 1)
        add_device(stack, 2, position=(1.0, 0.0))
        stack.discovery.start_inquiry(a, 100_000)
        stack.engine.run_until(150_000)
        return stack.engine.trace.to_jsonl(), stack.engine.trace.sha256()

    text_a, hash_a = run(5)
    text_b, hash_b = run(5)
    text_c, hash_c = run(6)
    assert text_a == text_b and hash_a == hash_b
    assert hash_c != hash_a


def test_medium_validates_inputs():
    with pytest.raises(ValueError):
        MediumModel(loss_probability=1.5)
    with pytest.raises(ValueError):
        MediumModel(propagation_us=0)
