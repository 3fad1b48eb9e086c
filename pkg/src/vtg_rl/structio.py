"""Tagged-response grammar: parsing, rendering, and the format reward."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Optional

from .core import TimeInterval


@dataclass(frozen=True)
class TagProfile:
    think_open: str = "<think>"
    think_close: str = "</think>"
    answer_open: str = "<time>"
    answer_close: str = "</time>"

    def __post_init__(self):
        tags = self.tags
        if any(not t for t in tags):
            raise ValueError("tag strings must be non-empty")
        if len(set(tags)) != 4:
            raise ValueError(f"tag strings must be pairwise distinct, got {tags}")

    @property
    def tags(self) -> tuple[str, str, str, str]:
        return (self.think_open, self.think_close, self.answer_open, self.answer_close)

    @classmethod
    def answer_tags(cls) -> TagProfile:
        """Profile using <answer></answer> for the interval instead of <time></time>."""
        return cls(answer_open="<answer>", answer_close="</answer>")


DEFAULT_PROFILE = TagProfile()

_NUMBER = r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)"
_PAIR_RE = re.compile(rf"\[?\s*({_NUMBER})\s*,\s*({_NUMBER})\s*\]?")


@dataclass
class StructuredResponse:
    raw_text: str
    cot_text: Optional[str] = None
    interval: Optional[TimeInterval] = None
    improper_pair: Optional[tuple[float, float]] = None
    tags_present: frozenset[str] = field(default_factory=frozenset)
    well_formed: bool = False


def _between(text: str, open_tag: str, close_tag: str) -> Optional[str]:
    i = text.find(open_tag)
    if i < 0:
        return None
    start = i + len(open_tag)
    j = text.find(close_tag, start)
    if j < 0:
        return None
    return text[start:j]


def parse_response(text: str, profile: TagProfile = DEFAULT_PROFILE) -> StructuredResponse:
    """Parse a tagged model output. Never raises; failures show up as absent fields."""
    tags_present = frozenset(t for t in profile.tags if t in text)
    cot = _between(text, profile.think_open, profile.think_close)

    interval = None
    improper = None
    answer = _between(text, profile.answer_open, profile.answer_close)
    # An interval only counts when the full tag set is present.
    if answer is not None and len(tags_present) == 4:
        m = _PAIR_RE.search(answer)
        if m is not None:
            a, b = float(m.group(1)), float(m.group(2))
            if not (math.isfinite(a) and math.isfinite(b)):
                pass
            elif a <= b:
                interval = TimeInterval(a, b)
            else:
                improper = (a, b)

    well_formed = cot is not None and interval is not None and len(tags_present) == 4
    return StructuredResponse(
        raw_text=text,
        cot_text=cot,
        interval=interval,
        improper_pair=improper,
        tags_present=tags_present,
        well_formed=well_formed,
    )


def format_interval(iv: TimeInterval) -> str:
    return f"[{iv.start_s:.3f}, {iv.end_s:.3f}]"


def render_response(cot: str, iv: TimeInterval, profile: TagProfile = DEFAULT_PROFILE) -> str:
    for tag in profile.tags:
        if tag in cot:
            raise ValueError(f"reasoning text contains the tag {tag!r}")
    return (
        profile.think_open + cot + profile.think_close
        + profile.answer_open + format_interval(iv) + profile.answer_close
    )


def format_reward(resp: StructuredResponse, profile: TagProfile = DEFAULT_PROFILE) -> int:
    # Presence only: order and nesting are deliberately not checked.
    return int(all(t in resp.tags_present for t in profile.tags))
