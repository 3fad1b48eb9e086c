"""R1@m recall and mean IoU over greedy policy predictions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import GroundingSample
from .policy import PolicyParams, PolicyVocab, decode_response, sample_batch
from .reward import tiou_reward
from .structio import DEFAULT_PROFILE, TagProfile, parse_response

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)


@dataclass
class EvalReport:
    recalls: dict[float, float]
    miou: float
    n: int
    unparsed_count: int

    def to_dict(self) -> dict:
        out = {f"R@{m:g}": r for m, r in self.recalls.items()}
        out.update({"mIoU": self.miou, "n": self.n, "unparsed": self.unparsed_count})
        return out


def recall_at(ious: Sequence[float], m: float) -> float:
    """Fraction of IoUs strictly greater than m."""
    if len(ious) == 0:
        raise ValueError("recall_at needs at least one IoU")
    return sum(1 for x in ious if x > m) / len(ious)


def mean_iou(ious: Sequence[float]) -> float:
    if len(ious) == 0:
        raise ValueError("mean_iou needs at least one IoU")
    m = math.fsum(ious) / len(ious)
    # the division can land one ulp outside the data range
    return min(max(m, min(ious)), max(ious))


def predict_ious(
    params: PolicyParams,
    dataset: Sequence[GroundingSample],
    profile: TagProfile = DEFAULT_PROFILE,
    max_len: int = 64,
) -> tuple[list[float], int]:
    """Greedy-decode each sample; returns (IoUs, number of unparsed predictions)."""
    X = np.array([s.features for s in dataset], dtype=np.float64)
    seqs = sample_batch(params, X, 0.0, max_len)
    ious, unparsed = [], 0
    for s, seq in zip(dataset, seqs):
        resp = parse_response(decode_response(seq.tokens, s.duration_s, params.vocab, profile), profile)
        if resp.interval is None:
            unparsed += 1
        ious.append(tiou_reward(resp, s.gt))
    return ious, unparsed


def evaluate_policy(
    params: PolicyParams,
    dataset: Sequence[GroundingSample],
    vocab: PolicyVocab | None = None,
    profile: TagProfile = DEFAULT_PROFILE,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    max_len: int = 64,
) -> EvalReport:
    if len(dataset) == 0:
        raise ValueError("evaluation dataset is empty")
    if vocab is not None and vocab != params.vocab:
        raise ValueError("vocabulary does not match the checkpoint")
    ious, unparsed = predict_ious(params, dataset, profile, max_len)
    return EvalReport(
        recalls={float(m): recall_at(ious, m) for m in sorted(thresholds)},
        miou=mean_iou(ious),
        n=len(ious),
        unparsed_count=unparsed,
    )
