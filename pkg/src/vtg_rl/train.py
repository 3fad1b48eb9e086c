"""Training stages: base pretraining, supervised cold start, and GRPO with group-normalized advantages.

The base stage stands in for a pretrained backbone. It teaches direct answers
(an empty reasoning block) from weakly labelled data, so a policy that skips
the cold start still starts RL from something that answers in format.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import GroundingSample, TimeInterval
from .curation import AnnotatedSample
from .evaluation import evaluate_policy
from .policy import (
    PolicyParams,
    TokenSequence,
    decode_response,
    encode_response,
    sample_batch,
    sequence_logprob_batch,
    weighted_logprob_gradient,
)
from .reward import RewardWeights, score_response
from .structio import DEFAULT_PROFILE, TagProfile, parse_response

log = logging.getLogger(__name__)

ROLLOUT_MODE_ENV = "VTG_RL_ROLLOUTS"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    G: int = 8
    beta: float = 0.0
    lr_sft: float = 0.02
    lr_rl: float = 0.005
    rl_steps: int = 600
    sft_epochs: int = 30
    sft_batch_size: int = 8
    samples_per_step: int = 8
    max_len: int = 64
    temperature: float = 1.0
    val_every: int = 25
    clip_eps: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.G < 2:
            raise ValueError("group size G must be >= 2")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.max_len < 8:
            raise ValueError("max_len must be >= 8")
        if self.temperature <= 0:
            raise ValueError("rollout temperature must be positive")
        if self.samples_per_step < 1 or self.sft_batch_size < 1 or self.val_every < 1:
            raise ValueError("batch sizes and val_every must be >= 1")
        if self.clip_eps is not None and self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive when set")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BaseConfig:
    """Pretraining of the starting policy on a separate corpus of direct answers."""

    n_samples: int = 2000
    label_noise: float = 0.1  # endpoint noise sd as a fraction of duration
    epochs: int = 10
    lr: float = 0.05
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1 or self.batch_size < 1:
            raise ValueError("base n_samples and batch_size must be >= 1")
        if self.label_noise < 0 or self.lr < 0 or self.epochs < 0:
            raise ValueError("base label_noise, lr and epochs must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroupRollout:
    sample_id: str
    features: np.ndarray
    responses: list[TokenSequence]
    rendered: list[str]
    rewards: np.ndarray
    mean: float
    std: float
    advantages: np.ndarray
    tious: np.ndarray = field(default_factory=lambda: np.zeros(0))
    forms: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class StepStats:
    step: int
    mean_reward: float
    mean_tiou: float
    format_rate: float
    mean_response_len: float
    kl_value: float
    loss: float
    val_miou: Optional[float] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["val_miou"] is None:
            del d["val_miou"]
        return d


def group_advantages(rewards) -> np.ndarray:
    """(r - mean) / population std within the group; zeros when the group is constant."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("group_advantages needs at least two rewards")
    if r.max() == r.min():
        return np.zeros_like(r)
    mu = r.mean()
    sigma = math.sqrt(np.mean((r - mu) ** 2))
    if sigma == 0.0:
        return np.zeros_like(r)
    return (r - mu) / sigma


def kl_estimate(logp_new: Sequence[float], logp_ref: Sequence[float]) -> float:
    """Token-mean of the k3 estimator r - log r - 1 with r = p_ref / p_new."""
    new = np.asarray(logp_new, dtype=np.float64)
    ref = np.asarray(logp_ref, dtype=np.float64)
    if new.shape != ref.shape:
        raise ValueError(f"length mismatch: {new.shape} vs {ref.shape}")
    if new.size == 0:
        raise ValueError("kl_estimate needs at least one token")
    d = ref - new
    return float(np.mean(np.expm1(d) - d))


def _k3_token_grad_weights(logp_new, logp_ref) -> np.ndarray:
    # d/dlogp_new of (r - log r - 1) with r = exp(ref - new) is 1 - r.
    d = np.asarray(logp_ref) - np.asarray(logp_new)
    return -np.expm1(d) / d.size


def surrogate_weights(ratios, advantages, clip_eps: Optional[float]) -> np.ndarray:
    """d/dlogpi of the per-response surrogate term.

    Unclipped: ratio * A. With clip_eps the PPO rule zeroes responses whose
    ratio already moved past the trust region in the advantage's direction.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    w = ratios * adv
    if clip_eps is not None:
        clipped = ((adv > 0) & (ratios > 1 + clip_eps)) | ((adv < 0) & (ratios < 1 - clip_eps))
        w = np.where(clipped, 0.0, w)
    return w


def rollout_group(
    params: PolicyParams,
    sample: GroundingSample,
    weights: RewardWeights,
    cfg: TrainConfig,
    rng: np.random.Generator,
    profile: TagProfile = DEFAULT_PROFILE,
) -> GroupRollout:
    feats = np.asarray(sample.features, dtype=np.float64)
    seqs = sample_batch(params, np.tile(feats, (cfg.G, 1)), cfg.temperature, cfg.max_len, rng)
    rendered = [decode_response(s.tokens, sample.duration_s, params.vocab, profile) for s in seqs]
    scores = [score_response(parse_response(t, profile), sample.gt, weights, profile) for t in rendered]
    rewards = np.array([b.total for b in scores])
    mu = float(rewards.mean())
    return GroupRollout(
        sample_id=sample.id,
        features=feats,
        responses=seqs,
        rendered=rendered,
        rewards=rewards,
        mean=mu,
        std=float(np.sqrt(np.mean((rewards - mu) ** 2))),
        advantages=group_advantages(rewards),
        tious=np.array([b.r_tiou for b in scores]),
        forms=np.array([b.r_form for b in scores], dtype=np.float64),
    )


def _concurrent_rollouts() -> bool:
    mode = os.environ.get(ROLLOUT_MODE_ENV, "sequential").strip().lower()
    if mode not in ("sequential", "concurrent"):
        raise ValueError(f"{ROLLOUT_MODE_ENV} must be 'sequential' or 'concurrent', got {mode!r}")
    return mode == "concurrent"


def grpo_update(
    params: PolicyParams,
    ref_params: Optional[PolicyParams],
    groups: Sequence[GroupRollout],
    cfg: TrainConfig,
):
    """One ascent step on the batch-mean GRPO objective.

    Rollouts come from `params` itself, so the importance ratio is 1 at the
    update point. Returns (new params, kl_value, loss).
    """
    if not groups:
        raise ValueError("grpo_update needs at least one group")
    B = len(groups)
    grad = params.zeros_like()
    kls, objective = [], 0.0
    for grp in groups:
        G = len(grp.responses)
        token_lists = [s.tokens for s in grp.responses]
        X = np.tile(grp.features, (G, 1))
        new_lp = [s.per_token_logprob for s in grp.responses]
        old_total = np.array([s.total_logprob for s in grp.responses])
        ratios = np.exp(np.array([np.sum(lp) for lp in new_lp]) - old_total)
        seq_w = surrogate_weights(ratios, grp.advantages, cfg.clip_eps) / G

        token_w = [np.full(len(t), w) for t, w in zip(token_lists, seq_w)]
        kl_group = 0.0
        if ref_params is not None:
            ref_lp = [s.per_token_logprob for s in sequence_logprob_batch(ref_params, X, token_lists)]
            kl_each = [kl_estimate(n, r) for n, r in zip(new_lp, ref_lp)]
            kl_group = float(np.mean(kl_each))
            if cfg.beta > 0:
                for i in range(G):
                    token_w[i] = token_w[i] - cfg.beta / G * _k3_token_grad_weights(new_lp[i], ref_lp[i])
        kls.append(kl_group)
        objective += float(np.mean(ratios * grp.advantages)) - cfg.beta * kl_group

        if any(np.any(w != 0) for w in token_w):
            grad.iadd(weighted_logprob_gradient(params, X, token_lists, token_weights=token_w))

    if not grad.is_finite():
        bad = [k for k, v in grad.arrays().items() if not np.all(np.isfinite(v))]
        raise TrainingError(f"non-finite gradient in {bad}; group ids {[g.sample_id for g in groups]}")
    new_params = params.add_scaled(grad, cfg.lr_rl / B)
    return new_params, float(np.mean(kls)), -objective / B


def grpo_step(
    params: PolicyParams,
    ref_params: Optional[PolicyParams],
    batch: Sequence[GroundingSample],
    weights: RewardWeights,
    cfg: TrainConfig,
    rng: np.random.Generator,
    profile: TagProfile = DEFAULT_PROFILE,
    step: int = 0,
):
    """Sample G rollouts per sample, score them, and apply one GRPO update."""
    if not batch:
        raise ValueError("grpo_step needs a non-empty batch")
    streams = rng.spawn(len(batch))
    jobs = list(zip(batch, streams))
    if _concurrent_rollouts() and len(jobs) > 1:
        with ThreadPoolExecutor() as pool:
            groups = list(pool.map(lambda j: rollout_group(params, j[0], weights, cfg, j[1], profile), jobs))
    else:
        groups = [rollout_group(params, s, weights, cfg, r, profile) for s, r in jobs]

    new_params, kl_value, loss = grpo_update(params, ref_params, groups, cfg)
    lengths = [len(s) for g in groups for s in g.responses]
    stats = StepStats(
        step=step,
        mean_reward=float(np.mean([g.rewards for g in groups])),
        mean_tiou=float(np.mean([g.tious for g in groups])),
        format_rate=float(np.mean([g.forms for g in groups])),
        mean_response_len=float(np.mean(lengths)),
        kl_value=kl_value,
        loss=loss,
    )
    return new_params, stats


def sft_step(params: PolicyParams, batch, lr: float):
    """One descent step on mean sequence NLL; batch is a list of (features, tokens).

    Returns (new params, pre-step mean NLL).
    """
    if not batch:
        raise ValueError("sft_step needs a non-empty batch")
    X = np.array([np.asarray(f, dtype=np.float64) for f, _ in batch])
    token_lists = [list(t.tokens) if isinstance(t, TokenSequence) else list(t) for _, t in batch]
    scored = sequence_logprob_batch(params, X, token_lists)
    mean_nll = -float(np.mean([s.total_logprob for s in scored]))
    grad = weighted_logprob_gradient(params, X, token_lists)
    if not grad.is_finite():
        raise TrainingError("non-finite gradient in sft_step")
    return params.add_scaled(grad, lr / len(batch)), mean_nll


def mean_nll(params: PolicyParams, pairs) -> float:
    X = np.array([np.asarray(f, dtype=np.float64) for f, _ in pairs])
    scored = sequence_logprob_batch(params, X, [list(t) for _, t in pairs])
    return -float(np.mean([s.total_logprob for s in scored]))


def sft_pairs(coldstart: Sequence[AnnotatedSample]) -> list:
    return [(np.asarray(a.sample.features), list(a.response_tokens)) for a in coldstart]


def base_pairs(samples: Sequence[GroundingSample], label_noise: float, rng: np.random.Generator, vocab) -> list:
    """Direct-answer targets whose endpoints carry N(0, (label_noise * duration)^2) noise."""
    pairs = []
    for s in samples:
        ends = np.asarray(s.gt.as_list()) + rng.normal(0.0, label_noise * s.duration_s, size=2)
        lo, hi = np.clip(np.sort(ends), 0.0, s.duration_s)
        pairs.append((np.asarray(s.features), encode_response([], TimeInterval(float(lo), float(hi)), s.duration_s, vocab)))
    return pairs


def _sgd_epochs(params, pairs, epochs, batch_size, lr, rng, history, stage):
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(pairs))
        losses, steps = [], 0
        for i in range(0, len(order), batch_size):
            batch = [pairs[j] for j in order[i : i + batch_size]]
            params, loss = sft_step(params, batch, lr)
            losses.append(loss * len(batch))
            steps += 1
        epoch_nll = math.fsum(losses) / len(pairs)
        log.info("%s epoch %d: mean nll %.4f over %d steps", stage, epoch, epoch_nll, steps)
        if history is not None:
            history.append({"epoch": epoch, "mean_nll": epoch_nll, "steps": steps})
    return params


def pretrain_base(
    params: PolicyParams,
    corpus: Sequence[GroundingSample],
    cfg: BaseConfig,
    history: Optional[list] = None,
) -> PolicyParams:
    """Supervised pretraining on weakly labelled direct answers."""
    if not corpus:
        raise ValueError("base corpus is empty")
    rng = np.random.default_rng([cfg.seed, 30])
    pairs = base_pairs(corpus, cfg.label_noise, rng, params.vocab)
    return _sgd_epochs(params, pairs, cfg.epochs, cfg.batch_size, cfg.lr, rng, history, "base")


def train_sft(
    params: PolicyParams,
    coldstart: Sequence[AnnotatedSample],
    cfg: TrainConfig,
    history: Optional[list] = None,
) -> PolicyParams:
    """Cold-start fine-tuning: sft_epochs shuffled passes of minibatch SGD."""
    if not coldstart:
        raise ValueError("cold-start dataset is empty")
    rng = np.random.default_rng([cfg.seed, 10])
    return _sgd_epochs(params, sft_pairs(coldstart), cfg.sft_epochs, cfg.sft_batch_size, cfg.lr_sft, rng, history, "sft")


def train_rl(
    params: PolicyParams,
    rl_dataset: Sequence[GroundingSample],
    val_dataset: Sequence[GroundingSample],
    weights: RewardWeights,
    cfg: TrainConfig,
    profile: TagProfile = DEFAULT_PROFILE,
    ref_params: Optional[PolicyParams] = None,
    on_step: Optional[Callable[[StepStats, PolicyParams], None]] = None,
):
    """GRPO loop. The reference policy defaults to the starting parameters.

    Returns (final params, list of StepStats).
    """
    if not rl_dataset or not val_dataset:
        raise ValueError("RL and validation datasets must be non-empty")
    if ref_params is None:
        ref_params = params.copy()
    stats = []
    for step in range(1, cfg.rl_steps + 1):
        rng = np.random.default_rng([cfg.seed, 20, step])
        idx = rng.integers(0, len(rl_dataset), size=cfg.samples_per_step)
        batch = [rl_dataset[i] for i in idx]
        params, st = grpo_step(params, ref_params, batch, weights, cfg, rng, profile, step=step)
        if step % cfg.val_every == 0:
            st.val_miou = evaluate_policy(params, val_dataset, profile=profile, max_len=cfg.max_len).miou
            log.info("rl step %d: reward %.3f val mIoU %.3f", step, st.mean_reward, st.val_miou)
        stats.append(st)
        if on_step is not None:
            on_step(st, params)
    return params, stats
