"""Domain types and the canonical JSON payload codec.

Every daemon exchanges the same wire payload: a UTF-8 JSON object with
alphabetically ordered keys and no insignificant whitespace.  Keeping the
byte form canonical matters because message signatures are computed over
these exact bytes.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, replace

_HEX_RE = re.compile(r"^[0-9a-f]+$")


class DecodeError(ValueError):
    """Raised when a payload cannot be decoded into a Measurement.

    ``field`` names the offending key when it can be identified.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class ProbeId:
    """Identifier of one metered point: a server chassis or a PDU outlet.

    The canonical topic form is ``site/name``.  Neither part may be empty,
    contain ``/`` or NUL, or be a filesystem dot entry (probe ids name
    archive directories on disk).
    """

    site: str
    name: str

    def __post_init__(self):
        for label, part in (("site", self.site), ("name", self.name)):
            if not part:
                raise ValueError(f"probe {label} must be non-empty")
            if "/" in part:
                raise ValueError(f"probe {label} must not contain '/': {part!r}")
            if "\x00" in part:
                raise ValueError(f"probe {label} must not contain NUL")
            if part in (".", ".."):
                raise ValueError(f"probe {label} must not be {part!r}")

    @classmethod
    def parse(cls, topic: str) -> "ProbeId":
        parts = topic.split("/")
        if len(parts) != 2:
            raise ValueError(f"malformed probe topic {topic!r}: expected 'site/name'")
        return cls(parts[0], parts[1])

    @property
    def topic(self) -> str:
        return f"{self.site}/{self.name}"

    def __str__(self) -> str:
        return self.topic


def _check_number(label: str, value, minimum: float, strict: bool) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"{label} must be a number, got {type(value).__name__}")
    if not math.isfinite(value):
        raise ValueError(f"{label} must be finite")
    if strict and value <= minimum:
        raise ValueError(f"{label} must be > {minimum}")
    if not strict and value < minimum:
        raise ValueError(f"{label} must be >= {minimum}")


@dataclass(frozen=True)
class Measurement:
    """One timestamped power sample from one probe.

    ``timestamp`` is seconds since the Unix epoch (producer clock,
    fractional allowed) and ``watts`` the instantaneous power.  Voltage and
    current are optional and carry no cross-field constraint against watts
    (power factor).  ``signature`` is a lowercase hex HMAC, present only on
    signed messages.

    Values are not coerced to float: an integer timestamp encodes as an
    integer, which keeps encode/decode byte-exact in both directions.
    """

    probe: ProbeId
    timestamp: float
    watts: float
    volts: float | None = None
    amps: float | None = None
    signature: str | None = None

    def __post_init__(self):
        _check_number("timestamp", self.timestamp, 0, strict=True)
        _check_number("watts", self.watts, 0, strict=False)
        if self.volts is not None:
            _check_number("volts", self.volts, 0, strict=False)
        if self.amps is not None:
            _check_number("amps", self.amps, 0, strict=False)
        if self.signature is not None and not _HEX_RE.match(self.signature):
            raise ValueError("signature must be a lowercase hex string")

    def without_signature(self) -> "Measurement":
        if self.signature is None:
            return self
        return replace(self, signature=None)

    def with_signature(self, signature: str) -> "Measurement":
        return replace(self, signature=signature)


def encode_measurement(m: Measurement) -> bytes:
    """Serialize a measurement to its canonical byte form.

    Keys are alphabetical, optionals are omitted when absent, and there is
    no whitespace, so equal measurements always produce equal bytes (the
    signing input).
    """
    obj: dict = {"probe": m.probe.topic, "timestamp": m.timestamp, "w": m.watts}
    if m.volts is not None:
        obj["v"] = m.volts
    if m.amps is not None:
        obj["a"] = m.amps
    if m.signature is not None:
        obj["signature"] = m.signature
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def decode_measurement(b: bytes) -> Measurement:
    """Parse a JSON payload into a Measurement.

    Unknown keys are tolerated; missing mandatory keys, malformed probe
    topics and out-of-range numbers raise DecodeError naming the field.
    """
    try:
        obj = json.loads(b.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"payload is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise DecodeError("payload must be a JSON object")

    for key in ("probe", "timestamp", "w"):
        if key not in obj:
            raise DecodeError(f"missing mandatory key {key!r}", field=key)

    if not isinstance(obj["probe"], str):
        raise DecodeError("probe must be a string", field="probe")
    try:
        probe = ProbeId.parse(obj["probe"])
    except ValueError as exc:
        raise DecodeError(str(exc), field="probe") from exc

    def number(key: str, minimum: float, strict: bool):
        try:
            _check_number(key, obj[key], minimum, strict)
        except ValueError as exc:
            raise DecodeError(str(exc), field=key) from exc
        return obj[key]

    timestamp = number("timestamp", 0, strict=True)
    watts = number("w", 0, strict=False)
    volts = number("v", 0, strict=False) if "v" in obj else None
    amps = number("a", 0, strict=False) if "a" in obj else None

    signature = obj.get("signature")
    if signature is not None:
        if not isinstance(signature, str) or not _HEX_RE.match(signature):
            raise DecodeError("signature must be a lowercase hex string", field="signature")

    return Measurement(
        probe=probe,
        timestamp=timestamp,
        watts=watts,
        volts=volts,
        amps=amps,
        signature=signature,
    )
