"""Driver workers and the supervising manager.

One worker thread runs per driver spec (one per IPMI card, one per PDU).
Each worker paces itself on its poll interval, reads the device, quantizes
to the device precision, optionally signs, and publishes one frame per
outlet.  A watchdog sweep restarts dead workers; a worker that keeps dying
without ever publishing again is quarantined so a broken probe cannot hog
the manager forever.

Measurements lost to device timeouts are counted, never silently ignored:
wattmeters report instantaneous W, not cumulative kWh, so a missed sample
cannot be reconstructed from later readings.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass

from wattbus.bus import Frame
from wattbus.devices import DeviceTimeout, DriverSpec, make_device, quantize
from wattbus.model import Measurement, encode_measurement
from wattbus.signing import sign

log = logging.getLogger(__name__)

DEFAULT_WATCHDOG_PERIOD_S = 10.0
DEFAULT_RESTART_LIMIT = 5


class DriverError(Exception):
    """A device failed to deliver this tick's measurement(s)."""

    def __init__(self, topic: str, message: str):
        super().__init__(f"{topic}: {message}")
        self.topic = topic


def poll_once(spec: DriverSpec, device, now: float | None = None) -> list[Measurement]:
    """Take one tick's worth of measurements from a device.

    Pull devices answer with one reading per outlet stamped at poll time;
    push devices hand over whatever accumulated since the last drain.
    """
    if now is None:
        now = time.time()
    try:
        readings = device.read(now)
    except DeviceTimeout as exc:
        raise DriverError(spec.topic, str(exc)) from exc
    measurements = []
    for r in readings:
        measurements.append(Measurement(
            probe=spec.outlet_probe(r.outlet),
            timestamp=r.timestamp,
            watts=quantize(r.watts, spec.profile.precision_w),
        ))
    return measurements


@dataclass(frozen=True)
class DriverStatus:
    """Point-in-time view of one driver worker."""

    topic: str
    alive: bool
    quarantined: bool
    finished: bool
    last_emit_timestamp: float | None
    restart_count: int
    published: int
    lost: int
    ticks: int


class _DriverSlot:
    """Mutable per-driver state that survives worker restarts."""

    def __init__(self, spec: DriverSpec):
        self.spec = spec
        self.thread: threading.Thread | None = None
        self.wake = threading.Event()  # set by stop or kill injection
        self.kill_requested = False
        self.restart_count = 0
        self.consecutive_restarts = 0
        self.healthy_since_restart = False
        self.quarantined = False
        self.finished = False
        self.last_emit_timestamp: float | None = None
        self.published = 0
        self.lost = 0
        self.ticks = 0

    def status(self) -> DriverStatus:
        thread = self.thread
        return DriverStatus(
            topic=self.spec.topic,
            alive=thread is not None and thread.is_alive(),
            quarantined=self.quarantined,
            finished=self.finished,
            last_emit_timestamp=self.last_emit_timestamp,
            restart_count=self.restart_count,
            published=self.published,
            lost=self.lost,
            ticks=self.ticks,
        )


class _InjectedFailure(Exception):
    """Raised inside a worker when a test/operator asked it to die."""


class DriverManager:
    """Spawns, paces and supervises one worker per driver spec.

    ``max_ticks`` bounds each worker to a fixed number of poll ticks (the
    benchmark harness uses this for deterministic publication counts);
    daemon mode leaves it None.  ``stagger`` spreads worker start times
    across one interval so a large fleet does not publish in lockstep.
    """

    def __init__(self, probes: list[DriverSpec], publisher,
                 secret: bytes | None = None,
                 watchdog_period_s: float = DEFAULT_WATCHDOG_PERIOD_S,
                 restart_limit: int = DEFAULT_RESTART_LIMIT,
                 max_ticks: int | None = None,
                 stagger: bool = True,
                 status_path: str | None = None,
                 device_factory=make_device):
        self._slots = {spec.topic: _DriverSlot(spec) for spec in probes}
        self._publisher = publisher
        self._secret = secret
        self._device_factory = device_factory
        self._watchdog_period_s = watchdog_period_s
        self._restart_limit = restart_limit
        self._max_ticks = max_ticks
        self._stagger = stagger
        self._status_path = status_path
        self._stop = threading.Event()
        self._watchdog: threading.Thread | None = None
        self._started = False

    # -- lifecycle --------------------------------------------------------

    def start(self) -> None:
        if self._started:
            raise RuntimeError("manager already started")
        self._started = True
        specs = list(self._slots.values())
        n = len(specs)
        for i, slot in enumerate(specs):
            offset = (i / n) * slot.spec.interval_s if self._stagger else 0.0
            self._spawn(slot, offset)
        self._watchdog = threading.Thread(
            target=self._watchdog_loop, name="driver-watchdog", daemon=True)
        self._watchdog.start()
        log.info("started %d driver worker(s)", n)

    def stop(self, timeout: float = 10.0) -> None:
        self._stop.set()
        for slot in self._slots.values():
            slot.wake.set()
        deadline = time.monotonic() + timeout
        for slot in self._slots.values():
            thread = slot.thread
            if thread is not None:
                thread.join(timeout=max(0.0, deadline - time.monotonic()))
        if self._watchdog is not None:
            self._watchdog.join(timeout=max(0.0, deadline - time.monotonic()))
        self._write_status_file()

    def wait_finished(self, timeout: float | None = None) -> bool:
        """Block until every worker completed its max_ticks (bench mode)."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            if all(s.finished or s.quarantined for s in self._slots.values()):
                return True
            if deadline is not None and time.monotonic() > deadline:
                return False
            time.sleep(0.05)

    # -- observation ------------------------------------------------------

    def statuses(self) -> list[DriverStatus]:
        return [slot.status() for slot in self._slots.values()]

    def status_for(self, topic: str) -> DriverStatus:
        return self._slots[topic].status()

    @property
    def total_published(self) -> int:
        return sum(s.published for s in self._slots.values())

    @property
    def total_lost(self) -> int:
        return sum(s.lost for s in self._slots.values())

    def inject_failure(self, topic: str) -> None:
        """Make one worker die on its next wakeup (supervision testing)."""
        slot = self._slots[topic]
        slot.kill_requested = True
        slot.wake.set()

    # -- worker machinery -------------------------------------------------

    def _spawn(self, slot: _DriverSlot, start_offset: float = 0.0) -> None:
        slot.wake.clear()
        slot.kill_requested = False
        slot.healthy_since_restart = False
        thread = threading.Thread(
            target=self._worker_main, args=(slot, start_offset),
            name=f"driver-{slot.spec.topic}", daemon=True)
        slot.thread = thread
        thread.start()

    def _worker_main(self, slot: _DriverSlot, start_offset: float) -> None:
        try:
            self._worker_loop(slot, start_offset)
        except _InjectedFailure:
            log.warning("driver %s: worker killed", slot.spec.topic)
        except Exception:
            log.exception("driver %s: worker crashed", slot.spec.topic)

    def _worker_loop(self, slot: _DriverSlot, start_offset: float) -> None:
        spec = slot.spec
        if start_offset > 0:
            if slot.wake.wait(start_offset):
                if slot.kill_requested:
                    raise _InjectedFailure(spec.topic)
                return  # manager stopping
        device = self._device_factory(spec, time.time())
        anchor = time.monotonic()
        tick_here = 0  # ticks since this (re)start; slot.ticks spans restarts
        while not self._stop.is_set():
            if self._max_ticks is not None and slot.ticks >= self._max_ticks:
                slot.finished = True
                return
            deadline = anchor + tick_here * spec.interval_s
            remaining = deadline - time.monotonic()
            if remaining > 0 and slot.wake.wait(remaining):
                if slot.kill_requested:
                    raise _InjectedFailure(spec.topic)
                return  # stop requested
            if slot.kill_requested:
                raise _InjectedFailure(spec.topic)
            self._tick(slot, device)
            tick_here += 1
        slot.finished = self._max_ticks is not None and slot.ticks >= self._max_ticks

    def _tick(self, slot: _DriverSlot, device) -> None:
        spec = slot.spec
        slot.ticks += 1
        try:
            measurements = poll_once(spec, device)
        except DriverError as exc:
            slot.lost += spec.outlet_count
            log.warning("measurement lost: %s", exc)
            return
        for m in measurements:
            if self._secret is not None:
                m = sign(m, self._secret)
            self._publisher.publish(Frame(m.probe.topic, encode_measurement(m)))
            slot.published += 1
            slot.last_emit_timestamp = m.timestamp
        slot.healthy_since_restart = True
        slot.consecutive_restarts = 0

    # -- watchdog ---------------------------------------------------------

    def _watchdog_loop(self) -> None:
        while not self._stop.wait(self._watchdog_period_s):
            self._sweep()
            self._write_status_file()

    def _sweep(self) -> None:
        for slot in self._slots.values():
            if slot.finished or slot.quarantined or self._stop.is_set():
                continue
            thread = slot.thread
            if thread is not None and thread.is_alive():
                continue
            if slot.consecutive_restarts >= self._restart_limit:
                slot.quarantined = True
                log.error("driver %s quarantined after %d failed restarts",
                          slot.spec.topic, slot.consecutive_restarts)
                continue
            slot.restart_count += 1
            slot.consecutive_restarts += 1
            log.warning("driver %s dead, restarting (restart %d)",
                        slot.spec.topic, slot.restart_count)
            self._spawn(slot)

    def _write_status_file(self) -> None:
        if self._status_path is None:
            return
        rows = []
        for status in self.statuses():
            rows.append(json.dumps({
                "topic": status.topic,
                "alive": status.alive,
                "quarantined": status.quarantined,
                "last_emit_timestamp": status.last_emit_timestamp,
                "restart_count": status.restart_count,
                "published": status.published,
                "lost": status.lost,
                "ticks": status.ticks,
            }, sort_keys=True))
        tmp = f"{self._status_path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("\n".join(rows) + "\n")
        os.replace(tmp, self._status_path)


def run_manager(cfg, publisher=None,
                watchdog_period_s: float = DEFAULT_WATCHDOG_PERIOD_S,
                status_path: str | None = None) -> None:
    """Run the driver fleet until interrupted (CLI entry)."""
    from wattbus.bus import Publisher  # local import keeps module deps one-way

    own_publisher = publisher is None
    if publisher is None:
        publisher = Publisher(cfg.bind)
    manager = DriverManager(
        cfg.probes, publisher, secret=cfg.signing_secret,
        watchdog_period_s=watchdog_period_s, status_path=status_path)
    manager.start()
    log.info("publishing on %s", publisher.endpoint)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        manager.stop()
        if own_publisher:
            publisher.close()
