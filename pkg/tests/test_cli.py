"""CLI wiring: argument handling, config errors, daemon and bench smokes."""

import json
import signal
import subprocess
import sys
import time

import pytest

from wattbus.cli import build_parser, main


def test_requires_subcommand():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.conf"
    bad.write_text("")  # no probes
    assert main(["drivers", "--config", str(bad)]) == 2


def test_missing_forwarder_section(tmp_path):
    conf = tmp_path / "f.conf"
    conf.write_text("[probe:a/b]\ndriver = emulated-ipmi\n")
    assert main(["forwarder", "--config", str(conf)]) == 2


def test_bench_smoke_via_main(tmp_path):
    scenario = tmp_path / "s.json"
    scenario.write_text(json.dumps({
        "name": "cli smoke", "fleet": "ipmi", "signing": False,
        "interval_s": 0.2, "duration_s": 0.6, "drivers": 4}))
    out = tmp_path / "r.json"
    assert main(["bench", "--scenario", str(scenario), "--out", str(out)]) == 0
    results = json.loads(out.read_text())["results"]
    assert len(results) == 1
    assert results[0]["frames_received"] == 12
    assert results[0]["drops"] == 0


def test_bench_rejects_bad_sweep(tmp_path):
    assert main(["bench", "--sweep", "fast,slow",
                 "--out", str(tmp_path / "r.json")]) == 2


def test_drivers_daemon_runs_and_stops(tmp_path):
    conf = tmp_path / "d.conf"
    conf.write_text(
        "[bus]\nbind = ipc://{}\n"
        "[probe:cli/p1]\ndriver = emulated-ipmi\ninterval = 0.1\n".format(
            tmp_path / "bus.sock"))
    status = tmp_path / "status.jsonl"
    proc = subprocess.Popen(
        [sys.executable, "-m", "wattbus.cli", "drivers",
         "--config", str(conf), "--status-file", str(status),
         "--watchdog-period", "0.2"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    try:
        deadline = time.monotonic() + 10.0
        while time.monotonic() < deadline and not status.exists():
            time.sleep(0.05)
        assert status.exists(), proc.stderr.read().decode() if proc.poll() else "no status file"
        rows = [json.loads(l) for l in status.read_text().splitlines()]
        assert rows[0]["topic"] == "cli/p1"
    finally:
        proc.send_signal(signal.SIGINT)
        try:
            proc.wait(timeout=10.0)
        except subprocess.TimeoutExpired:
            proc.kill()
    assert proc.returncode == 0
