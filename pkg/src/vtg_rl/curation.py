"""Synthetic grounding tasks, simulated CoT annotation, and IoU-threshold filtering.

Each sample's difficulty drives both how noisy its features are and how noisy
the simulated annotator is, so hard samples are hard for the policy and are
also the ones most likely to be filtered out.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    DecodeError,
    GroundingSample,
    TimeInterval,
    interval_iou,
    load_json_line,
    parse_interval,
    sample_from_dict,
    sample_to_dict,
)
from .policy import PolicyVocab, decode_response, encode_response
from .structio import DEFAULT_PROFILE, TagProfile

EASY_RANGE = (0.0, 0.3)
HARD_RANGE = (0.7, 1.0)


@dataclass(frozen=True)
class CurationConfig:
    n_samples: int = 500
    duration_s: float = 64.0
    eps1: float = 0.8
    eps2: float = 0.4
    difficulty_dist: str = "uniform"  # "uniform" or "bimodal"
    easy_frac: float = 0.5
    p_annot_error: float = 0.1
    noise_scale: float = 0.15
    cot_len_range: tuple[int, int] = (4, 24)
    feature_noise_base: float = 0.05
    feature_noise_slope: float = 0.25
    d_feat: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cot_len_range", tuple(int(x) for x in self.cot_len_range))
        if not 0.0 <= self.eps2 <= self.eps1 <= 1.0:
            raise ValueError(f"need 0 <= eps2 <= eps1 <= 1, got eps1={self.eps1}, eps2={self.eps2}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.difficulty_dist not in ("uniform", "bimodal"):
            raise ValueError(f"unknown difficulty_dist {self.difficulty_dist!r}")
        if not 0.0 <= self.p_annot_error <= 1.0:
            raise ValueError("p_annot_error must lie in [0, 1]")
        lo, hi = self.cot_len_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad cot_len_range {self.cot_len_range}")
        if self.d_feat < 4:
            raise ValueError("d_feat must be >= 4 (four informative features)")

    def feature_noise(self, difficulty: float) -> float:
        return self.feature_noise_base + self.feature_noise_slope * difficulty

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cot_len_range"] = list(self.cot_len_range)
        return d


def _draw_difficulty(cfg: CurationConfig, rng: np.random.Generator) -> float:
    if cfg.difficulty_dist == "uniform":
        return float(rng.uniform(0.0, 1.0))
    lo, hi = EASY_RANGE if rng.random() < cfg.easy_frac else HARD_RANGE
    return float(rng.uniform(lo, hi))


def make_sample(index: int, cfg: CurationConfig, rng: np.random.Generator, prefix: str = "s") -> GroundingSample:
    dur = cfg.duration_s
    start = float(rng.uniform(0.0, 0.8 * dur))
    length = float(rng.uniform(0.05, 0.3) * dur)
    end = min(start + length, dur)
    difficulty = _draw_difficulty(cfg, rng)
    sd = cfg.feature_noise(difficulty)
    eta = rng.normal(0.0, 1.0, size=3) * sd
    distractors = rng.standard_normal(cfg.d_feat - 4)
    features = [
        start / dur + eta[0],
        end / dur + eta[1],
        difficulty,
        (end - start) / dur + eta[2],
        *distractors.tolist(),
    ]
    return GroundingSample(
        id=f"{prefix}{cfg.seed}-{index:06d}",
        duration_s=dur,
        features=tuple(float(x) for x in features),
        gt=TimeInterval(start, end),
        difficulty=difficulty,
        meta={"difficulty_dist": cfg.difficulty_dist},
    )


# Stream tags keep datasets drawn from one seed independent of each other.
STREAM_TASK = 0
STREAM_ANNOTATION = 1
STREAM_BASE = 2
STREAM_VALIDATION = 3


def generate_dataset(cfg: CurationConfig, prefix: str = "s", stream: int = STREAM_TASK) -> list[GroundingSample]:
    """Deterministic per (seed, stream); every sample draws from its own derived generator."""
    return [make_sample(i, cfg, np.random.default_rng([cfg.seed, stream, i]), prefix) for i in range(cfg.n_samples)]


@dataclass
class AnnotatedSample:
    sample: GroundingSample
    response_text: str
    response_tokens: list[int]
    ann_interval: Optional[TimeInterval]
    ann_iou: float


def simulate_annotation(
    s: GroundingSample,
    cfg: CurationConfig,
    rng: np.random.Generator,
    vocab: PolicyVocab = PolicyVocab(),
    profile: TagProfile = DEFAULT_PROFILE,
) -> AnnotatedSample:
    dur = s.duration_s
    if rng.random() < cfg.p_annot_error:
        a, b = sorted(rng.uniform(0.0, dur, size=2).tolist())
    else:
        sd = cfg.noise_scale * s.difficulty * dur
        a, b = (np.array(s.gt.as_list()) + rng.normal(0.0, 1.0, size=2) * sd).tolist()
        a, b = sorted((min(max(a, 0.0), dur), min(max(b, 0.0), dur)))
    ann = TimeInterval(a, b)

    lo, hi = cfg.cot_len_range
    n_cot = int(rng.integers(lo, hi + 1))
    fillers = rng.integers(0, vocab.n_filler, size=n_cot).tolist()
    tokens = encode_response(fillers, ann, dur, vocab)
    return AnnotatedSample(
        sample=s,
        response_text=decode_response(tokens, dur, vocab, profile),
        response_tokens=tokens,
        ann_interval=ann,
        ann_iou=interval_iou(ann, s.gt),
    )


def annotate_dataset(
    samples: Sequence[GroundingSample],
    cfg: CurationConfig,
    vocab: PolicyVocab = PolicyVocab(),
    profile: TagProfile = DEFAULT_PROFILE,
) -> list[AnnotatedSample]:
    return [
        simulate_annotation(s, cfg, np.random.default_rng([cfg.seed, STREAM_ANNOTATION, i]), vocab, profile)
        for i, s in enumerate(samples)
    ]


def filter_split(annotated: Sequence[AnnotatedSample], eps1: float = 0.8, eps2: float = 0.4):
    """Return (coldstart, rl, discarded).

    IoU > eps1 goes to cold start, IoU < eps2 is discarded, and the closed
    band [eps2, eps1] forms the RL pool.
    """
    coldstart, rl, discarded = [], [], []
    for a in annotated:
        if a.ann_iou > eps1:
            coldstart.append(a)
        elif a.ann_iou < eps2:
            discarded.append(a)
        else:
            rl.append(a)
    return coldstart, rl, discarded


ANNOTATION_FIELDS = ("response_text", "response_tokens", "ann_interval", "ann_iou")


def encode_annotated(a: AnnotatedSample) -> str:
    record = sample_to_dict(a.sample)
    record.update(
        response_text=a.response_text,
        response_tokens=list(a.response_tokens),
        ann_interval=a.ann_interval.as_list() if a.ann_interval is not None else None,
        ann_iou=a.ann_iou,
    )
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def decode_annotated(line: str) -> AnnotatedSample:
    obj = load_json_line(line)
    for key in ANNOTATION_FIELDS:
        if key not in obj:
            raise DecodeError(key, "missing field")
    sample = sample_from_dict(obj, extra_fields=ANNOTATION_FIELDS)
    if not isinstance(obj["response_text"], str):
        raise DecodeError("response_text", "expected a string")
    toks = obj["response_tokens"]
    if not isinstance(toks, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in toks):
        raise DecodeError("response_tokens", "expected an array of integers")
    ann = None if obj["ann_interval"] is None else parse_interval(obj["ann_interval"], "ann_interval")
    iou = obj["ann_iou"]
    if isinstance(iou, bool) or not isinstance(iou, (int, float)) or not 0.0 <= iou <= 1.0:
        raise DecodeError("ann_iou", "expected a number in [0, 1]")
    return AnnotatedSample(sample, obj["response_text"], toks, ann, float(iou))


def write_annotated(path, items: Sequence[AnnotatedSample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a in items:
            fh.write(encode_annotated(a) + "\n")


def read_annotated(path) -> list[AnnotatedSample]:
    with open(path, encoding="utf-8") as fh:
        return [decode_annotated(line) for line in fh if line.strip()]
