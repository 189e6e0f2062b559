"""Configuration parsing for all daemons.

The format is classic INI: ``[section]`` headers, ``key = value`` lines,
``#`` or ``;`` comments.  One file describes a whole deployment; each
daemon picks out the sections it needs.

Sections::

    [bus]                     bind/connect endpoints
    [signing]                 optional shared secret (enables signing)
    [probe:<site>/<name>]     one metered probe (driver, interval, ...)
    [api]                     REST API consumer
    [viz]                     chart/archive consumer
    [forwarder]               relay daemon

Unknown sections and keys are ignored but recorded as warnings; structural
problems (bad syntax, duplicate probes, missing driver keys) raise
ConfigError.
"""

from __future__ import annotations

import configparser
import logging
import os
from dataclasses import dataclass, field

from wattbus.bus import Endpoint
from wattbus.devices import (
    PROFILES,
    PULL,
    PUSH,
    DeviceProfile,
    DriverSpec,
    load_trace,
    seed_for_topic,
)
from wattbus.forwarder import ForwarderConfig
from wattbus.model import ProbeId
from wattbus.signing import MIN_SECRET_LEN

log = logging.getLogger(__name__)

DEFAULT_BIND = "tcp://127.0.0.1:5577"
DEFAULT_ARCHIVES = ((1.0, 3600), (60.0, 1440), (3600.0, 720))
CONSOLIDATIONS = ("average", "min", "max")


class ConfigError(ValueError):
    """Raised for any configuration problem; message says where and why."""


@dataclass(frozen=True)
class ArchiveDef:
    """One round-robin archive: bucket width and how many buckets to keep."""

    step_s: float
    capacity: int
    consolidation: str = "average"

    def __post_init__(self):
        if self.step_s <= 0:
            raise ValueError("archive step must be positive")
        if self.capacity <= 0:
            raise ValueError("archive capacity must be positive")
        if self.consolidation not in CONSOLIDATIONS:
            raise ValueError(f"unknown consolidation {self.consolidation!r}")


@dataclass(frozen=True)
class ApiConfig:
    listen: tuple[str, int] = ("127.0.0.1", 8417)
    tokens: tuple[str, ...] = ()
    stale_timeout_s: float = 300.0
    gap_limit_s: float = 60.0


@dataclass(frozen=True)
class VizConfig:
    listen: tuple[str, int] = ("127.0.0.1", 8418)
    data_dir: str = "wattbus-data"
    price_eur_per_kwh: float = 0.0
    archives: tuple[ArchiveDef, ...] = tuple(
        ArchiveDef(step, cap) for step, cap in DEFAULT_ARCHIVES
    )


@dataclass
class FrameworkConfig:
    """Validated deployment description shared by every daemon."""

    bind: Endpoint
    connect: Endpoint
    probes: list[DriverSpec]
    signing_secret: bytes | None = None
    api: ApiConfig = ApiConfig()
    viz: VizConfig = VizConfig()
    forwarder: ForwarderConfig | None = None
    warnings: list[str] = field(default_factory=list)


_KNOWN_KEYS = {
    "bus": {"bind", "connect"},
    "signing": {"secret"},
    "api": {"listen", "tokens", "stale_timeout", "gap_limit"},
    "viz": {"listen", "data_dir", "price_eur_per_kwh", "archives", "consolidation"},
    "forwarder": {"upstreams", "bind"},
}
_PROBE_KEYS = {
    "driver", "interval", "outlets", "seed", "watts_min", "watts_max",
    "trace", "refresh", "precision", "mode",
}


def _listen_address(section: str, value: str) -> tuple[str, int]:
    host, sep, port_s = value.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"[{section}] listen must be host:port, got {value!r}")
    try:
        port = int(port_s)
    except ValueError:
        raise ConfigError(f"[{section}] listen port must be an integer, got {port_s!r}") from None
    if not 1 <= port <= 65535:
        raise ConfigError(f"[{section}] listen port out of range: {port}")
    return host, port


def _positive_float(section: str, key: str, value: str) -> float:
    try:
        out = float(value)
    except ValueError:
        raise ConfigError(f"[{section}] {key} must be a number, got {value!r}") from None
    if out <= 0:
        raise ConfigError(f"[{section}] {key} must be positive, got {value!r}")
    return out


def _endpoint(section: str, key: str, value: str) -> Endpoint:
    try:
        return Endpoint.parse(value)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def _parse_probe(section: str, topic: str, opts: dict[str, str],
                 base_dir: str, warnings: list[str]) -> DriverSpec:
    try:
        probe = ProbeId.parse(topic)
    except ValueError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None

    for key in opts:
        if key not in _PROBE_KEYS:
            warnings.append(f"[{section}] ignoring unknown key {key!r}")

    if "driver" not in opts:
        raise ConfigError(f"[{section}] missing mandatory key 'driver'")
    driver = opts["driver"].strip().lower()

    if driver == "custom":
        for key in ("refresh", "precision", "mode"):
            if key not in opts:
                raise ConfigError(
                    f"[{section}] driver 'custom' requires key {key!r}")
        mode = opts["mode"].strip().lower()
        if mode not in (PULL, PUSH):
            raise ConfigError(f"[{section}] mode must be 'pull' or 'push', got {mode!r}")
        try:
            profile = DeviceProfile(
                model=f"custom:{topic}",
                interface="custom",
                refresh_period_s=_positive_float(section, "refresh", opts["refresh"]),
                precision_w=_positive_float(section, "precision", opts["precision"]),
                mode=mode,
            )
        except ValueError as exc:
            raise ConfigError(f"[{section}] {exc}") from None
    elif driver in PROFILES:
        profile = PROFILES[driver]
        for key in ("refresh", "precision", "mode"):
            if key in opts:
                warnings.append(
                    f"[{section}] key {key!r} only applies to driver 'custom', ignored")
    else:
        known = ", ".join(sorted(k for k in PROFILES)) + ", custom"
        raise ConfigError(f"[{section}] unknown driver {driver!r} (known: {known})")

    interval = profile.refresh_period_s
    if "interval" in opts:
        interval = _positive_float(section, "interval", opts["interval"])

    outlets = None
    if "outlets" in opts:
        try:
            outlets = int(opts["outlets"])
        except ValueError:
            raise ConfigError(f"[{section}] outlets must be an integer") from None

    seed = seed_for_topic(topic)
    if "seed" in opts:
        try:
            seed = int(opts["seed"])
        except ValueError:
            raise ConfigError(f"[{section}] seed must be an integer") from None

    trace = None
    if "trace" in opts:
        path = opts["trace"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        try:
            trace = load_trace(path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"[{section}] trace: {exc}") from None

    def _watts(key: str, default: float) -> float:
        if key not in opts:
            return default
        try:
            return float(opts[key])
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be a number") from None

    watts_min = _watts("watts_min", 50.0)
    watts_max = _watts("watts_max", 250.0)

    try:
        return DriverSpec(
            probe=probe,
            profile=profile,
            interval_s=interval,
            seed=seed,
            watts_min=watts_min,
            watts_max=watts_max,
            trace=trace,
            outlets=outlets,
        )
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _parse_forwarder(opts: dict[str, str], warnings: list[str]) -> ForwarderConfig:
    for key in opts:
        if key not in _KNOWN_KEYS["forwarder"]:
            warnings.append(f"[forwarder] ignoring unknown key {key!r}")
    if "upstreams" not in opts:
        raise ConfigError("[forwarder] missing mandatory key 'upstreams'")
    if "bind" not in opts:
        raise ConfigError("[forwarder] missing mandatory key 'bind'")
    upstreams = []
    for item in opts["upstreams"].split(","):
        item = item.strip()
        if not item:
            continue
        url, _, prefix = item.partition("|")
        upstreams.append((_endpoint("forwarder", "upstreams", url.strip()), prefix.strip()))
    bind = _endpoint("forwarder", "bind", opts["bind"])
    try:
        return ForwarderConfig(upstreams=tuple(upstreams), downstream_bind=bind)
    except ValueError as exc:
        raise ConfigError(f"[forwarder] {exc}") from None


def parse_config(text: str, base_dir: str = ".") -> FrameworkConfig:
    """Parse and validate a deployment configuration.

    Total over all inputs: every string yields either a FrameworkConfig or
    a ConfigError, never an unstructured crash.  ``base_dir`` anchors
    relative trace-file paths.
    """
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"line {exc.lineno}: content before any [section] header") from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"line {exc.lineno}: duplicate section [{exc.section}]") from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(
            f"line {exc.lineno}: duplicate key {exc.option!r} in [{exc.section}]") from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"line {lineno}: malformed line {line}") from None

    warnings: list[str] = []
    probes: list[DriverSpec] = []
    api = ApiConfig()
    viz = VizConfig()
    forwarder = None
    signing_secret = None
    bind = Endpoint.parse(DEFAULT_BIND)
    connect: Endpoint | None = None

    for section in parser.sections():
        opts = dict(parser.items(section))
        if section.startswith("probe:"):
            probes.append(_parse_probe(section, section[len("probe:"):], opts,
                                       base_dir, warnings))
        elif section == "bus":
            for key in opts:
                if key not in _KNOWN_KEYS["bus"]:
                    warnings.append(f"[bus] ignoring unknown key {key!r}")
            if "bind" in opts:
                bind = _endpoint("bus", "bind", opts["bind"])
            if "connect" in opts:
                connect = _endpoint("bus", "connect", opts["connect"])
        elif section == "signing":
            for key in opts:
                if key not in _KNOWN_KEYS["signing"]:
                    warnings.append(f"[signing] ignoring unknown key {key!r}")
            if "secret" in opts:
                secret = opts["secret"].encode("utf-8")
                if len(secret) < MIN_SECRET_LEN:
                    raise ConfigError(
                        f"[signing] secret must be at least {MIN_SECRET_LEN} bytes")
                signing_secret = secret
        elif section == "api":
            api = _parse_api(opts, warnings)
        elif section == "viz":
            viz = _parse_viz(opts, warnings)
        elif section == "forwarder":
            forwarder = _parse_forwarder(opts, warnings)
        else:
            warnings.append(f"ignoring unknown section [{section}]")

    if not probes:
        raise ConfigError("no probes defined (need at least one [probe:<site>/<name>] section)")

    seen: dict[str, str] = {}
    for spec in probes:
        for topic in spec.all_topics():
            if topic in seen:
                raise ConfigError(
                    f"duplicate probe topic {topic!r} "
                    f"(from [probe:{seen[topic]}] and [probe:{spec.topic}])")
            seen[topic] = spec.topic

    if connect is None:
        if bind.scheme == "tcp" and bind.host in ("0.0.0.0", "::"):
            connect = Endpoint("tcp", host="127.0.0.1", port=bind.port)
        else:
            connect = bind

    for message in warnings:
        log.warning("%s", message)

    return FrameworkConfig(
        bind=bind,
        connect=connect,
        probes=probes,
        signing_secret=signing_secret,
        api=api,
        viz=viz,
        forwarder=forwarder,
        warnings=warnings,
    )


def _parse_api(opts: dict[str, str], warnings: list[str]) -> ApiConfig:
    for key in opts:
        if key not in _KNOWN_KEYS["api"]:
            warnings.append(f"[api] ignoring unknown key {key!r}")
    defaults = ApiConfig()
    listen = defaults.listen
    if "listen" in opts:
        listen = _listen_address("api", opts["listen"])
    tokens = tuple(t.strip() for t in opts.get("tokens", "").split(",") if t.strip())
    if not tokens:
        warnings.append("[api] no tokens configured; every request will be rejected")
    stale = defaults.stale_timeout_s
    if "stale_timeout" in opts:
        stale = _positive_float("api", "stale_timeout", opts["stale_timeout"])
    gap = defaults.gap_limit_s
    if "gap_limit" in opts:
        gap = _positive_float("api", "gap_limit", opts["gap_limit"])
    return ApiConfig(listen=listen, tokens=tokens, stale_timeout_s=stale, gap_limit_s=gap)


def _parse_viz(opts: dict[str, str], warnings: list[str]) -> VizConfig:
    for key in opts:
        if key not in _KNOWN_KEYS["viz"]:
            warnings.append(f"[viz] ignoring unknown key {key!r}")
    defaults = VizConfig()
    listen = defaults.listen
    if "listen" in opts:
        listen = _listen_address("viz", opts["listen"])
    data_dir = opts.get("data_dir", defaults.data_dir)
    price = 0.0
    if "price_eur_per_kwh" in opts:
        try:
            price = float(opts["price_eur_per_kwh"])
        except ValueError:
            raise ConfigError("[viz] price_eur_per_kwh must be a number") from None
        if price < 0:
            raise ConfigError("[viz] price_eur_per_kwh must not be negative")
    consolidation = opts.get("consolidation", "average").strip().lower()
    if consolidation not in CONSOLIDATIONS:
        raise ConfigError(
            f"[viz] consolidation must be one of {', '.join(CONSOLIDATIONS)}")
    archives = tuple(ArchiveDef(step, cap, consolidation) for step, cap in DEFAULT_ARCHIVES)
    if "archives" in opts:
        parsed = []
        for item in opts["archives"].split(","):
            item = item.strip()
            if not item:
                continue
            parts = item.split(":")
            if len(parts) not in (2, 3):
                raise ConfigError(
                    f"[viz] archives entries must be step:capacity[:consolidation], got {item!r}")
            step = _positive_float("viz", "archives", parts[0])
            try:
                capacity = int(parts[1])
            except ValueError:
                raise ConfigError(f"[viz] archive capacity must be an integer in {item!r}") from None
            cons = parts[2].strip().lower() if len(parts) == 3 else consolidation
            try:
                parsed.append(ArchiveDef(step, capacity, cons))
            except ValueError as exc:
                raise ConfigError(f"[viz] {exc}") from None
        if not parsed:
            raise ConfigError("[viz] archives must define at least one archive")
        archives = tuple(parsed)
    return VizConfig(listen=listen, data_dir=data_dir,
                     price_eur_per_kwh=price, archives=archives)


def load_config(path: str) -> FrameworkConfig:
    """Read and parse a configuration file."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)))
