"""Temporal intervals, the IoU kernel, and the dataset record codec."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence


class ValidationError(ValueError):
    """A value violates a domain invariant."""


class DecodeError(ValueError):
    """A serialized record could not be parsed."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class TimeInterval:
    start_s: float
    end_s: float

    def __post_init__(self):
        start, end = float(self.start_s), float(self.end_s)
        if not (math.isfinite(start) and math.isfinite(end)):
            raise ValidationError(f"interval endpoints must be finite, got [{start}, {end}]")
        if start > end:
            raise ValidationError(f"interval start {start} exceeds end {end}")
        object.__setattr__(self, "start_s", start)
        object.__setattr__(self, "end_s", end)

    @property
    def length(self) -> float:
        return self.end_s - self.start_s

    def shifted(self, offset: float) -> TimeInterval:
        return TimeInterval(self.start_s + offset, self.end_s + offset)

    def scaled(self, factor: float) -> TimeInterval:
        return TimeInterval(self.start_s * factor, self.end_s * factor)

    def as_list(self) -> list[float]:
        return [self.start_s, self.end_s]


def interval_iou(a: TimeInterval, b: TimeInterval) -> float:
    """Temporal intersection-over-union of two proper intervals.

    Two identical zero-length intervals score 1; any other zero-measure union
    scores 0.
    """
    inter = max(0.0, min(a.end_s, b.end_s) - max(a.start_s, b.start_s))
    union = a.length + b.length - inter
    if union <= 0.0:
        return 1.0 if (a.start_s == b.start_s and a.end_s == b.end_s) else 0.0
    return min(1.0, max(0.0, inter / union))


@dataclass(frozen=True)
class GroundingSample:
    id: str
    duration_s: float
    features: tuple[float, ...]
    gt: TimeInterval
    difficulty: float
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(float(x) for x in self.features))
        object.__setattr__(self, "meta", dict(self.meta))
        if not (math.isfinite(self.duration_s) and self.duration_s > 0):
            raise ValidationError(f"duration_s must be positive, got {self.duration_s}")
        if self.gt.start_s < 0 or self.gt.end_s > self.duration_s:
            raise ValidationError(
                f"gt [{self.gt.start_s}, {self.gt.end_s}] outside [0, {self.duration_s}]"
            )
        if not 0.0 <= self.difficulty <= 1.0:
            raise ValidationError(f"difficulty must lie in [0, 1], got {self.difficulty}")
        if not all(math.isfinite(x) for x in self.features):
            raise ValidationError("features must be finite")


SAMPLE_FIELDS = ("id", "duration_s", "features", "gt", "difficulty", "meta")


def sample_to_dict(s: GroundingSample) -> dict:
    return {
        "id": s.id,
        "duration_s": s.duration_s,
        "features": list(s.features),
        "gt": s.gt.as_list(),
        "difficulty": s.difficulty,
        "meta": dict(s.meta),
    }


def encode_sample(s: GroundingSample) -> str:
    """Serialize a sample as a single JSON line (no trailing newline)."""
    return json.dumps(sample_to_dict(s), ensure_ascii=False, separators=(",", ":"))


def _number(obj: dict, name: str) -> float:
    value = obj[name]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DecodeError(name, f"expected a number, got {type(value).__name__}")
    return float(value)


def _number_list(value, name: str, length: int | None = None) -> list[float]:
    if not isinstance(value, list):
        raise DecodeError(name, "expected an array")
    if length is not None and len(value) != length:
        raise DecodeError(name, f"expected {length} elements, got {len(value)}")
    out = []
    for x in value:
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise DecodeError(name, "array elements must be numbers")
        out.append(float(x))
    return out


def parse_interval(value, name: str = "gt") -> TimeInterval:
    start, end = _number_list(value, name, length=2)
    return TimeInterval(start, end)


def sample_from_dict(obj: dict, extra_fields: Sequence[str] = ()) -> GroundingSample:
    if not isinstance(obj, dict):
        raise DecodeError("record", "expected a JSON object")
    allowed = set(SAMPLE_FIELDS) | set(extra_fields)
    for key in obj:
        if key not in allowed:
            raise DecodeError(key, "unknown field")
    for key in SAMPLE_FIELDS:
        if key not in obj and key != "meta":
            raise DecodeError(key, "missing field")

    if not isinstance(obj["id"], str):
        raise DecodeError("id", "expected a string")
    meta = obj.get("meta", {})
    if meta is None:
        meta = {}
    if not isinstance(meta, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in meta.items()
    ):
        raise DecodeError("meta", "expected a string-to-string object")

    return GroundingSample(
        id=obj["id"],
        duration_s=_number(obj, "duration_s"),
        features=tuple(_number_list(obj["features"], "features")),
        gt=parse_interval(obj["gt"], "gt"),
        difficulty=_number(obj, "difficulty"),
        meta=meta,
    )


def load_json_line(line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DecodeError("record", f"malformed JSON ({exc.msg} at column {exc.colno})") from exc
    if not isinstance(obj, dict):
        raise DecodeError("record", "expected a JSON object")
    return obj


def decode_sample(line: str, d_feat: int | None = None) -> GroundingSample:
    """Parse one dataset line.

    Raises DecodeError for malformed records and ValidationError when a
    well-formed record breaks a sample invariant.
    """
    sample = sample_from_dict(load_json_line(line))
    if d_feat is not None and len(sample.features) != d_feat:
        raise ValidationError(f"features has length {len(sample.features)}, expected {d_feat}")
    return sample


def write_samples(path, samples: Sequence[GroundingSample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(encode_sample(s) + "\n")


def read_samples(path, d_feat: int | None = None) -> list[GroundingSample]:
    with open(path, encoding="utf-8") as fh:
        return [decode_sample(line, d_feat) for line in fh if line.strip()]
