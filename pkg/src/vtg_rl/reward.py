"""Composite verifiable reward: weighted temporal IoU plus format indicator."""

from __future__ import annotations

from dataclasses import dataclass

from .core import TimeInterval, interval_iou
from .structio import DEFAULT_PROFILE, StructuredResponse, TagProfile, format_reward


@dataclass(frozen=True)
class RewardWeights:
    lambda_tiou: float = 0.9
    lambda_form: float = 0.1

    def __post_init__(self):
        if self.lambda_tiou < 0 or self.lambda_form < 0:
            raise ValueError("reward weights must be nonnegative")
        if self.lambda_tiou == 0 and self.lambda_form == 0:
            raise ValueError("at least one reward weight must be positive")


@dataclass(frozen=True)
class RewardBreakdown:
    r_tiou: float
    r_form: int
    total: float


def tiou_reward(resp: StructuredResponse, gt: TimeInterval) -> float:
    # Missing or improper predictions score 0 rather than raising.
    if resp.interval is None or resp.improper_pair is not None:
        return 0.0
    return interval_iou(resp.interval, gt)


def composite_reward(r_tiou: float, r_form: int, w: RewardWeights = RewardWeights()) -> RewardBreakdown:
    if not 0.0 <= r_tiou <= 1.0:
        raise ValueError(f"r_tiou must lie in [0, 1], got {r_tiou}")
    total = w.lambda_tiou * r_tiou + w.lambda_form * r_form
    return RewardBreakdown(r_tiou=r_tiou, r_form=int(r_form), total=total)


def score_response(
    resp: StructuredResponse,
    gt: TimeInterval,
    w: RewardWeights = RewardWeights(),
    profile: TagProfile = DEFAULT_PROFILE,
) -> RewardBreakdown:
    return composite_reward(tiou_reward(resp, gt), format_reward(resp, profile), w)
