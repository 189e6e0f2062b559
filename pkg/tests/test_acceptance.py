"""Acceptance gate: every stated criterion at its stated tolerance.

One test per criterion, ordered; each prints an ``ACCEPTANCE Cnn ...: PASS``
line once its assertions hold.  The throughput criteria run the real
two-process harness at full fleet size and full duration, so this module
takes several minutes.
"""

import dataclasses
import json
import random
import time
import urllib.error
import urllib.request

import pytest

from wattbus.api import ApiServer, StaticTokenValidator
from wattbus.bench import run_scenario, run_sweep, scenario_from_name
from wattbus.bus import Frame, InprocChannel, Publisher, Subscriber
from wattbus.devices import PROFILES, DriverSpec
from wattbus.energy import MeterState
from wattbus.forwarder import Forwarder, ForwarderConfig
from wattbus.manager import DriverManager
from wattbus.model import Measurement, ProbeId, decode_measurement, encode_measurement
from wattbus.pollster import poll_once as pollster_poll_once, read_sink
from wattbus.rra import AVERAGE, MAX, MIN, RoundRobinArchive
from wattbus.signing import sign, verify

from test_bus import loopback, wait_until
from test_rra import naive_retained


def report(criterion: str, detail: str) -> None:
    print(f"ACCEPTANCE {criterion}: PASS ({detail})")


_SCENARIO_CACHE: dict[str, object] = {}


def scenario_result(name: str):
    if name not in _SCENARIO_CACHE:
        _SCENARIO_CACHE[name] = run_scenario(scenario_from_name(name))
    return _SCENARIO_CACHE[name]


def check_throughput(result, expected: int) -> None:
    assert result.valid, "run did not complete cleanly"
    assert result.frames_published == expected
    low, high = expected * 0.99, expected * 1.01
    assert low <= result.frames_received <= high, \
        f"received {result.frames_received}, expected {expected} +-1%"
    assert result.drops == 0
    assert result.publisher_queue_drops == 0
    assert 50.0 <= result.elapsed_s <= 100.0, \
        f"runtime {result.elapsed_s:.1f}s not ~60s"


class TestC01ThroughputReproduction:
    def test_c01_ipmi_unsigned_60k_per_minute(self):
        result = scenario_result("ipmi-unsigned")
        check_throughput(result, 60_000)
        report("C01a ipmi-unsigned",
               f"received {result.frames_received}/60000, drops 0, "
               f"elapsed {result.elapsed_s:.1f}s")

    def test_c01_pdu_unsigned_60k_per_minute(self):
        result = scenario_result("pdu-unsigned")
        check_throughput(result, 60_000)
        report("C01b pdu-unsigned",
               f"received {result.frames_received}/60000, drops 0, "
               f"elapsed {result.elapsed_s:.1f}s")


class TestC02SigningCausesNoLoss:
    def test_c02_ipmi_signed_matches_unsigned(self):
        signed = scenario_result("ipmi-signed")
        unsigned = scenario_result("ipmi-unsigned")
        check_throughput(signed, 60_000)
        assert signed.frames_received == unsigned.frames_received
        assert signed.verified == signed.frames_received
        assert signed.verify_failures == 0
        report("C02a ipmi-signed",
               f"received {signed.frames_received} == unsigned, all verified")

    def test_c02_pdu_signed_matches_unsigned(self):
        signed = scenario_result("pdu-signed")
        unsigned = scenario_result("pdu-unsigned")
        check_throughput(signed, 60_000)
        assert signed.frames_received == unsigned.frames_received
        assert signed.verified == signed.frames_received
        assert signed.verify_failures == 0
        report("C02b pdu-signed",
               f"received {signed.frames_received} == unsigned, all verified")


class TestC03IntervalSweep:
    def test_c03_sweep_point_two_to_one_second(self):
        # sweep duration is not pinned by the stated criterion; 15s per
        # point keeps the full gate under ten minutes
        intervals = [0.2, 0.4, 0.6, 0.8, 1.0]
        results = run_sweep(intervals, fleet="ipmi", duration_s=15.0)
        assert [r.interval_s for r in results] == intervals
        by_interval = {r.interval_s: r for r in results}

        for interval in (0.4, 0.6, 0.8, 1.0):
            r = by_interval[interval]
            assert r.valid
            assert r.drops == 0, f"{interval}s: {r.drops} drops"
            assert r.publisher_queue_drops == 0
            assert r.jitter_p95_s <= 2 * interval, \
                f"{interval}s: p95 jitter {r.jitter_p95_s:.3f}s"

        burst = by_interval[0.2]
        assert burst.valid
        assert burst.max_burst >= 1  # informational, but must be reported
        report("C03 interval sweep",
               "0.4s+ lossless with p95 jitter <= 2x interval; "
               f"0.2s burst report: max burst {burst.max_burst} frames "
               f"within {burst.burst_window_s * 1000:.1f}ms, "
               f"received {burst.frames_received}/{burst.frames_published}")


class TestC04EnergyIntegrationOracle:
    def test_c04_thousand_probes_match_trapezoid_oracle(self):
        rng = random.Random(20260811)
        state = MeterState(gap_limit_s=1e12)
        traces = {}
        for i in range(1000):
            topic = f"site{i % 10}/probe{i:04d}"
            t = rng.uniform(1.0, 1000.0)
            series = []
            for _ in range(60):
                t += rng.uniform(0.05, 20.0)
                series.append((t, rng.uniform(0.0, 5000.0)))
            traces[topic] = series

        started = time.perf_counter()
        for topic, series in traces.items():
            probe = ProbeId.parse(topic)
            for t, w in series:
                state.ingest(Measurement(probe, t, w))
        elapsed = time.perf_counter() - started

        for topic, series in traces.items():
            expected = 0.0
            for (t0, w0), (t1, w1) in zip(series, series[1:]):
                expected += (w0 + w1) / 2.0 * (t1 - t0) / 3.6e6
            got = state.get(topic)["kwh"]
            assert got == pytest.approx(expected, rel=1e-9), topic

        assert elapsed < 10.0, f"replay took {elapsed:.1f}s"
        report("C04 energy oracle",
               f"1000 probes x 60 samples replayed in {elapsed:.2f}s, "
               "all within 1e-9 relative")


class TestC05ArchiveOracleEquivalence:
    def test_c05_two_hundred_traces_three_consolidations(self):
        started = time.perf_counter()
        rng = random.Random(5150)
        checked = 0
        for case in range(200):
            step = rng.choice([0.5, 1.0, 10.0, 60.0])
            capacity = rng.randrange(2, 40)
            t = rng.uniform(0.1, 100.0)
            samples = []
            for _ in range(rng.randrange(1, 150)):
                t += rng.uniform(0.0, 3.0 * capacity * step / 10.0)
                samples.append((t, rng.uniform(0.0, 800.0)))
            for consolidation in (AVERAGE, MIN, MAX):
                archive = RoundRobinArchive(step, capacity, consolidation)
                for ts, w in samples:
                    archive.update(ts, w)
                expected = naive_retained(samples, step, capacity, consolidation)
                got = archive.fetch_all()
                assert json.dumps(got) == json.dumps(expected), \
                    f"case {case} {consolidation}"
                checked += 1
        elapsed = time.perf_counter() - started
        assert elapsed < 30.0, f"oracle comparison took {elapsed:.1f}s"
        report("C05 archive oracle",
               f"{checked} archive/oracle comparisons byte-identical in "
               f"{elapsed:.2f}s")


class TestC06ForwarderTransparency:
    def test_c06_three_hop_chain_signed_in_order(self):
        secret = b"acceptance-chain-secret"
        pub = Publisher(loopback())
        forwarders = []
        upstream = pub.endpoint
        try:
            for _ in range(3):
                fwd = Forwarder(ForwarderConfig(
                    upstreams=((upstream, ""),), downstream_bind=loopback()))
                forwarders.append(fwd)
                upstream = fwd.publisher.endpoint

            direct = Subscriber(pub.endpoint, "")
            chained = Subscriber(upstream, "")
            assert wait_until(lambda: pub.subscriber_count == 2)
            for fwd in forwarders[:-1]:
                assert wait_until(lambda: fwd.publisher.subscriber_count == 1)
            assert wait_until(lambda: forwarders[-1].publisher.subscriber_count == 1)

            probe = ProbeId.parse("chain/probe")
            for seq in range(1, 1001):
                m = sign(Measurement(probe, float(seq), float(seq % 300)), secret)
                pub.publish(Frame(probe.topic, encode_measurement(m)))

            def collect(sub):
                frames = []
                while len(frames) < 1000:
                    f = sub.get(timeout=10.0)
                    assert f is not None, f"stalled at {len(frames)}"
                    frames.append((f.topic, f.payload))
                return frames

            got_direct = collect(direct)
            got_chained = collect(chained)
            assert got_chained == got_direct  # byte-identical, in order
            seqs = [decode_measurement(p).timestamp for _, p in got_chained]
            assert seqs == [float(s) for s in range(1, 1001)]
            assert all(verify(decode_measurement(p), secret) for _, p in got_chained)
            direct.close()
            chained.close()
        finally:
            for fwd in forwarders:
                fwd.close()
            pub.close()
        report("C06 forwarder transparency",
               "1000 signed frames through 3 hops: ordered, verified, "
               "byte-identical to the direct path")


class TestC07Supervision:
    def test_c07_killed_worker_restarts_within_two_periods(self):
        watchdog_period = 1.0
        specs = [
            DriverSpec(ProbeId.parse(f"sup/d{i}"), PROFILES["emulated-ipmi"],
                       interval_s=0.2, seed=i)
            for i in range(5)
        ]
        chan = InprocChannel()
        manager = DriverManager(specs, chan, watchdog_period_s=watchdog_period)
        manager.start()
        try:
            topic = "sup/d2"
            assert wait_until(lambda: manager.status_for(topic).published > 0)
            killed_at = time.monotonic()
            manager.inject_failure(topic)
            assert wait_until(
                lambda: manager.status_for(topic).alive
                and manager.status_for(topic).restart_count == 1,
                timeout=2 * watchdog_period + 1.0)
            recovery = time.monotonic() - killed_at
            assert recovery <= 2 * watchdog_period, \
                f"recovery took {recovery:.2f}s"
            # and the worker keeps publishing afterwards
            before = manager.status_for(topic).published
            assert wait_until(lambda: manager.status_for(topic).published > before)
        finally:
            manager.stop()
        report("C07 supervision",
               f"killed worker alive again with restart_count+1 in "
               f"{recovery:.2f}s (limit {2 * watchdog_period:.1f}s)")


class TestC08SignatureSuite:
    def test_c08_property_suite_and_pinned_vector(self):
        secret = b"acceptance-sign-secret"
        rng = random.Random(88)

        def random_measurement():
            return Measurement(
                ProbeId(f"s{rng.randrange(100)}", f"p{rng.randrange(1000)}"),
                rng.uniform(1.0, 2e9),
                rng.uniform(0.0, 1e6),
                volts=rng.uniform(0, 500) if rng.random() < 0.5 else None,
                amps=rng.uniform(0, 64) if rng.random() < 0.5 else None,
            )

        for _ in range(10_000):
            assert verify(sign(random_measurement(), secret), secret)

        fields = ("probe", "timestamp", "watts", "volts", "amps", "signature")
        for i in range(10_000):
            signed = sign(random_measurement(), secret)
            which = fields[i % len(fields)]
            if which == "probe":
                tampered = dataclasses.replace(
                    signed, probe=ProbeId(signed.probe.site, signed.probe.name + "x"))
            elif which == "timestamp":
                tampered = dataclasses.replace(signed, timestamp=signed.timestamp + 0.5)
            elif which == "watts":
                tampered = dataclasses.replace(signed, watts=signed.watts + 0.5)
            elif which == "volts":
                new = 1.0 if signed.volts is None else signed.volts + 0.5
                tampered = dataclasses.replace(signed, volts=new)
            elif which == "amps":
                new = 1.0 if signed.amps is None else signed.amps + 0.5
                tampered = dataclasses.replace(signed, amps=new)
            else:
                sig = signed.signature
                flipped = "0" if sig[-1] != "0" else "1"
                tampered = dataclasses.replace(signed, signature=sig[:-1] + flipped)
            assert not verify(tampered, secret), which

        # pinned vector from an independent HMAC-SHA-256 implementation
        # (openssl), computed before this package was written
        vector = sign(Measurement(ProbeId("s", "p"), 1, 0), b"0123456789abcdef")
        assert vector.signature == \
            "5a38f838a9e2442198587922200ab5a28d7a92a0ee4f95dade0ad2b2cfbbcbf6"

        report("C08 signature suite",
               "10000 round-trips verified, 10000 mutations rejected, "
               "pinned vector matches")


class TestC09ApiContractAndPollster:
    def test_c09_full_http_contract_with_pollster_replay(self, tmp_path):
        token = "acceptance-token"
        state = MeterState(gap_limit_s=1e9)
        server = ApiServer(state, ("127.0.0.1", 0), StaticTokenValidator([token]),
                           stale_timeout_s=0.4, eviction_period_s=0.05)
        server.start()
        try:
            def get(path, tok=token):
                request = urllib.request.Request(server.url + path)
                if tok is not None:
                    request.add_header("X-Auth-Token", tok)
                try:
                    with urllib.request.urlopen(request, timeout=5.0) as resp:
                        return resp.status, json.loads(resp.read())
                except urllib.error.HTTPError as exc:
                    return exc.code, json.loads(exc.read())

            status, _ = get("/v1/probes/", tok=None)
            assert status == 401
            status, _ = get("/v1/probes/", tok="wrong")
            assert status == 401
            status, _ = get("/v1/probes/nope/missing/")
            assert status == 404

            probe = ProbeId.parse("acc/p1")
            series = [(100.0, 250.0), (160.0, 300.0), (220.0, 100.0),
                      (280.0, 0.0), (340.0, 420.0)]
            sink = str(tmp_path / "sink.jsonl")
            expected_kwh = []
            running, prev = 0.0, None
            for t, w in series:
                state.ingest(Measurement(probe, t, w))
                if prev is not None:
                    running += (prev[1] + w) / 2.0 * (t - prev[0]) / 3.6e6
                prev = (t, w)
                expected_kwh.append(running)
                pollster_poll_once(server.url, token, sink)

            status, body = get("/v1/probes/acc/p1/")
            assert status == 200
            assert body["w"] == 420.0
            assert body["timestamp"] == 340.0
            assert body["kwh"] == pytest.approx(expected_kwh[-1], rel=1e-12)

            samples = read_sink(sink)
            gauges = [s for s in samples if s["type"] == "gauge"]
            cumulatives = [s for s in samples if s["type"] == "cumulative"]
            assert [g["value"] for g in gauges] == [w for _, w in series]
            assert [c["value"] for c in cumulatives] == expected_kwh
            assert all(c["unit"] == "kWh" for c in cumulatives)
            assert all(g["unit"] == "W" for g in gauges)

            # stale eviction: silence beyond the timeout removes the probe
            assert wait_until(lambda: state.get("acc/p1") is None, timeout=5.0)
            status, _ = get("/v1/probes/acc/p1/")
            assert status == 404
        finally:
            server.close()
        report("C09 API + pollster",
               "401/404/fields/eviction all correct; sink reconstructs the "
               "kWh series exactly")


class TestC10LazyPublication:
    def test_c10_zero_subscribers_zero_bytes(self):
        pub = Publisher(loopback())
        try:
            probe = ProbeId.parse("idle/probe")
            for i in range(10_000):
                m = Measurement(probe, float(i + 1), 42.0)
                pub.publish(Frame(probe.topic, encode_measurement(m)))
            assert pub.publish_calls == 10_000
            assert pub.bytes_sent == 0
            assert pub.frames_delivered == 0
        finally:
            pub.close()
        report("C10 lazy publication",
               "10000 publishes with zero subscribers wrote 0 bytes")
