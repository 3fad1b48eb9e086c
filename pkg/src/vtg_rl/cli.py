"""Command-line driver: one subcommand per pipeline stage plus an end-to-end `pipeline`.

Every output is written to `<name>.partial` first and renamed into place once
complete, so an interrupted run never leaves a file that looks finished.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from filelock import FileLock, Timeout

from .core import DecodeError, ValidationError, decode_sample, encode_sample, read_samples
from .curation import (
    STREAM_BASE,
    STREAM_VALIDATION,
    AnnotatedSample,
    CurationConfig,
    annotate_dataset,
    decode_annotated,
    encode_annotated,
    filter_split,
    generate_dataset,
    read_annotated,
)
from .evaluation import DEFAULT_THRESHOLDS, evaluate_policy
from .policy import PolicyParams, PolicyVocab, init_policy, load_checkpoint, params_to_dict
from .reward import RewardWeights
from .structio import DEFAULT_PROFILE, TagProfile
from .train import BaseConfig, TrainConfig, pretrain_base, train_rl, train_sft

log = logging.getLogger("vtg_rl")

PROG = "vtg-rl"
VARIANTS = ("coldstart", "zero", "coldstart-unfiltered-rl", "zero-unfiltered")
PROFILES = {"time": DEFAULT_PROFILE, "answer": TagProfile.answer_tags()}


class CliError(Exception):
    pass


@dataclass(frozen=True)
class PolicyDims:
    d_emb: int = 16
    d_hid: int = 32
    n_filler: int = 16
    n_bins: int = 64

    def vocab(self) -> PolicyVocab:
        return PolicyVocab(n_filler=self.n_filler, n_bins=self.n_bins)


@dataclass(frozen=True)
class EvalSettings:
    n_val: int = 300
    thresholds: tuple = DEFAULT_THRESHOLDS

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(m) for m in self.thresholds))
        if self.n_val < 1:
            raise ValueError("eval.n_val must be >= 1")
        if not self.thresholds or not all(0.0 <= m <= 1.0 for m in self.thresholds):
            raise ValueError("eval.thresholds must be a non-empty list of values in [0, 1]")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    profile: str = "time"
    curation: CurationConfig = field(default_factory=CurationConfig)
    base: BaseConfig = field(default_factory=BaseConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)
    policy: PolicyDims = field(default_factory=PolicyDims)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["curation"]["cot_len_range"] = list(self.curation.cot_len_range)
        d["eval"]["thresholds"] = list(self.eval.thresholds)
        for section in ("curation", "base", "train"):
            del d[section]["seed"]  # all stages follow the master seed
        return d

    @property
    def tag_profile(self) -> TagProfile:
        return PROFILES[self.profile]


_SECTIONS = {
    "curation": CurationConfig,
    "base": BaseConfig,
    "train": TrainConfig,
    "reward": RewardWeights,
    "policy": PolicyDims,
    "eval": EvalSettings,
}


def _build_section(name: str, cls, values: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    if "seed" in values:
        raise CliError(f"config section {name!r}: set the top-level 'seed' instead of a per-stage seed")
    unknown = sorted(set(values) - known)
    if unknown:
        raise CliError(f"config section {name!r}: unknown keys {unknown}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"config section {name!r}: {exc}") from exc


def resolve_config(raw: dict, overrides: dict) -> PipelineConfig:
    """Defaults, then the config document, then command-line overrides."""
    if not isinstance(raw, dict):
        raise CliError("config must be a JSON object")
    unknown = sorted(set(raw) - {"seed", "profile", *_SECTIONS})
    if unknown:
        raise CliError(f"unknown config keys {unknown}")
    merged = {}
    for name in _SECTIONS:
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise CliError(f"config section {name!r} must be an object")
        merged[name] = dict(section)
    for (section, key), value in overrides.items():
        if section and value is not None:
            merged[section][key] = value
    seed = overrides.get(("", "seed"))
    seed = raw.get("seed", 0) if seed is None else seed
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise CliError(f"seed must be a non-negative integer, got {seed!r}")
    profile = raw.get("profile", "time")
    if profile not in PROFILES:
        raise CliError(f"profile must be one of {sorted(PROFILES)}, got {profile!r}")
    built = {name: _build_section(name, cls, merged[name]) for name, cls in _SECTIONS.items()}
    for name in ("curation", "base", "train"):
        built[name] = dataclasses.replace(built[name], seed=seed)
    return PipelineConfig(seed=seed, profile=profile, **built)


# ---------------------------------------------------------------- file helpers


def _partial(path: Path) -> Path:
    return path.with_name(path.name + ".partial")


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = _partial(path)
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json(path: Path, obj) -> None:
    write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_lines(path: Path, lines) -> None:
    write_text(path, "".join(line + "\n" for line in lines))


def write_checkpoint(path: Path, p: PolicyParams) -> None:
    write_text(path, json.dumps(params_to_dict(p)) + "\n")


def _read_json(path: Path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: not valid JSON ({exc})") from exc


def _read_pool(path: Path, d_feat: int):
    """Plain samples from either a sample file or an annotated file."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                annotated = isinstance(obj, dict) and "ann_iou" in obj
                sample = decode_annotated(line).sample if annotated else decode_sample(line, d_feat)
            except (DecodeError, ValidationError, json.JSONDecodeError) as exc:
                raise CliError(f"{path}:{lineno}: {exc}") from exc
            out.append(sample)
    if not out:
        raise CliError(f"{path}: no records")
    return out


def _read_annotated_checked(path: Path) -> list[AnnotatedSample]:
    try:
        items = read_annotated(path)
    except (DecodeError, ValidationError) as exc:
        raise CliError(f"{path}: {exc}") from exc
    if not items:
        raise CliError(f"{path}: no records")
    return items


# ---------------------------------------------------------------- stages


def validation_set(cfg: PipelineConfig):
    vcfg = dataclasses.replace(cfg.curation, n_samples=cfg.eval.n_val)
    return generate_dataset(vcfg, prefix="v", stream=STREAM_VALIDATION)


def base_corpus(cfg: PipelineConfig):
    # generic pretraining data: same generator, uniform difficulty, its own stream
    bcfg = dataclasses.replace(cfg.curation, n_samples=cfg.base.n_samples, difficulty_dist="uniform")
    return generate_dataset(bcfg, prefix="b", stream=STREAM_BASE)


def run_base(cfg: PipelineConfig, history: Optional[list] = None) -> PolicyParams:
    p = init_policy(cfg.curation.d_feat, cfg.policy.d_emb, cfg.policy.d_hid, cfg.policy.vocab(), cfg.seed)
    p = pretrain_base(p, base_corpus(cfg), cfg.base, history)
    p.provenance["base"] = cfg.base.to_dict()
    return p


def run_sft(cfg: PipelineConfig, start: PolicyParams, coldstart, history: Optional[list] = None) -> PolicyParams:
    p = train_sft(start, coldstart, cfg.train, history)
    p.provenance["sft"] = {"n": len(coldstart), "epochs": cfg.train.sft_epochs, "lr": cfg.train.lr_sft}
    return p


def run_rl(cfg: PipelineConfig, start: PolicyParams, pool, val, out_dir: Path) -> PolicyParams:
    """GRPO with the metrics stream tailing into metrics.jsonl.partial until done."""
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    tmp = _partial(metrics_path)
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:

        def on_step(st, params):
            fh.write(json.dumps(st.to_dict(), sort_keys=True) + "\n")
            fh.flush()
            if st.step % cfg.train.val_every == 0:
                ck = params.copy()
                ck.provenance["rl_step"] = st.step
                write_checkpoint(out_dir / "checkpoints" / f"step_{st.step:06d}.json", ck)

        final, _ = train_rl(start, pool, val, cfg.reward, cfg.train, cfg.tag_profile, on_step=on_step)
    os.replace(tmp, metrics_path)
    final = final.copy()
    final.provenance["rl_step"] = cfg.train.rl_steps
    write_checkpoint(out_dir / "final.json", final)
    return final


def report_dict(cfg: PipelineConfig, params: PolicyParams, dataset, echo: dict) -> dict:
    rep = evaluate_policy(params, dataset, profile=cfg.tag_profile, thresholds=cfg.eval.thresholds, max_len=cfg.train.max_len)
    out = rep.to_dict()
    out["config"] = {**echo, "profile": cfg.profile, "thresholds": list(cfg.eval.thresholds)}
    return out


def curate_outputs(cfg: PipelineConfig, annotated, out_dir: Path, source: str) -> tuple:
    cs, rl, dis = filter_split(annotated, cfg.curation.eps1, cfg.curation.eps2)
    for name, items in (("coldstart", cs), ("rl", rl), ("discarded", dis)):
        write_lines(out_dir / f"{name}.jsonl", (encode_annotated(a) for a in items))
    manifest = {
        "counts": {"coldstart": len(cs), "rl": len(rl), "discarded": len(dis), "total": len(annotated)},
        "eps1": cfg.curation.eps1,
        "eps2": cfg.curation.eps2,
        "source": source,
        "config": cfg.to_dict(),
    }
    write_json(out_dir / "manifest.json", manifest)
    return cs, rl, dis


# ---------------------------------------------------------------- subcommands


def _need(args, name: str) -> Path:
    value = getattr(args, name)
    if value is None:
        raise CliError(f"--{name.replace('_', '-')} is required for '{args.command}'")
    return _under_workdir(args, value)


def _under_workdir(args, value) -> Path:
    path = Path(value)
    if args.workdir is not None and not path.is_absolute():
        path = Path(args.workdir) / path
    return path


def cmd_gen(args, cfg: PipelineConfig) -> None:
    out = _need(args, "out")
    write_lines(out, (encode_sample(s) for s in generate_dataset(cfg.curation)))


def cmd_annotate(args, cfg: PipelineConfig) -> None:
    src, out = _need(args, "dataset"), _need(args, "out")
    try:
        samples = read_samples(src, cfg.curation.d_feat)
    except (DecodeError, ValidationError) as exc:
        raise CliError(f"{src}: {exc}") from exc
    ann = annotate_dataset(samples, cfg.curation, cfg.policy.vocab(), cfg.tag_profile)
    write_lines(out, (encode_annotated(a) for a in ann))


def cmd_curate(args, cfg: PipelineConfig) -> None:
    src, out = _need(args, "dataset"), _need(args, "out")
    curate_outputs(cfg, _read_annotated_checked(src), out, args.dataset)


def cmd_base(args, cfg: PipelineConfig) -> None:
    write_checkpoint(_need(args, "out"), run_base(cfg))


def _start_policy(args, cfg: PipelineConfig) -> PolicyParams:
    path = _need(args, "checkpoint")
    try:
        p = load_checkpoint(path)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{path}: bad checkpoint ({exc})") from exc
    if p.d_feat != cfg.curation.d_feat:
        raise CliError(f"{path}: checkpoint expects {p.d_feat} features, config has d_feat={cfg.curation.d_feat}")
    return p


def cmd_sft(args, cfg: PipelineConfig) -> None:
    start = _start_policy(args, cfg)
    cs = _read_annotated_checked(_need(args, "dataset"))
    write_checkpoint(_need(args, "out"), run_sft(cfg, start, cs))


def cmd_rl(args, cfg: PipelineConfig) -> None:
    start = _start_policy(args, cfg)
    pool = _read_pool(_need(args, "dataset"), cfg.curation.d_feat)
    val = _read_pool(_under_workdir(args, args.val), cfg.curation.d_feat) if args.val else validation_set(cfg)
    run_rl(cfg, start, pool, val, _need(args, "out"))


def cmd_eval(args, cfg: PipelineConfig) -> None:
    params = _start_policy(args, cfg)
    data = _read_pool(_need(args, "dataset"), cfg.curation.d_feat)
    echo = {"checkpoint": args.checkpoint, "dataset": args.dataset}
    write_json(_need(args, "out"), report_dict(cfg, params, data, echo))


def run_pipeline(cfg: PipelineConfig, workdir: Path, variant: str) -> dict:
    """gen -> annotate -> curate -> base -> [sft] -> rl -> eval inside workdir."""
    data = workdir / "data"
    samples = generate_dataset(cfg.curation)
    write_lines(data / "tasks.jsonl", (encode_sample(s) for s in samples))
    annotated = annotate_dataset(samples, cfg.curation, cfg.policy.vocab(), cfg.tag_profile)
    write_lines(data / "annotated.jsonl", (encode_annotated(a) for a in annotated))
    cs, rl, _ = curate_outputs(cfg, annotated, data / "split", "data/annotated.jsonl")
    val = validation_set(cfg)
    write_lines(data / "val.jsonl", (encode_sample(s) for s in val))

    run_dir = workdir / variant
    history: dict[str, list] = {"base": [], "sft": []}
    params = run_base(cfg, history["base"])
    write_checkpoint(workdir / "base.json", params)
    if variant.startswith("coldstart"):
        if not cs:
            raise CliError("cold-start split is empty; lower eps1 or generate more samples")
        params = run_sft(cfg, params, cs, history["sft"])
        write_checkpoint(run_dir / "sft.json", params)
    pool = [a.sample for a in (annotated if "unfiltered" in variant else rl)]
    if not pool:
        raise CliError("RL pool is empty; widen [eps2, eps1] or generate more samples")
    step0 = report_dict(cfg, params, val, {"checkpoint": "start", "dataset": "data/val.jsonl"})
    final = run_rl(cfg, params, pool, val, run_dir / "rl")
    report = report_dict(cfg, final, val, {"checkpoint": f"{variant}/rl/final.json", "dataset": "data/val.jsonl"})
    report["variant"] = variant
    report["start"] = {k: step0[k] for k in step0 if k != "config"}
    report["supervised"] = history
    report["pools"] = {"coldstart": len(cs), "rl": len(pool)}
    write_json(run_dir / "report.json", report)
    return report


def cmd_pipeline(args, cfg: PipelineConfig) -> None:
    if args.workdir is None:
        raise CliError("--workdir is required for 'pipeline'")
    run_pipeline(cfg, Path(args.workdir), args.variant)


COMMANDS = {
    "gen": (cmd_gen, "generate synthetic grounding samples"),
    "annotate": (cmd_annotate, "simulate CoT annotation of a sample file"),
    "curate": (cmd_curate, "split annotated samples into cold-start / RL / discarded"),
    "base": (cmd_base, "pretrain the starting policy on direct answers"),
    "sft": (cmd_sft, "cold-start fine-tuning from a checkpoint"),
    "rl": (cmd_rl, "GRPO training from a checkpoint"),
    "eval": (cmd_eval, "greedy-decode evaluation report"),
    "pipeline": (cmd_pipeline, "run every stage for one variant inside --workdir"),
}


def _thresholds(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description="Temporal grounding with cold-start SFT and GRPO on a synthetic surrogate.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed for every stage")
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--workdir", help="work directory; relative paths resolve inside it")
        p.add_argument("--n", type=int, help="number of samples to generate")
        p.add_argument("--eps1", type=float, help="cold-start IoU threshold")
        p.add_argument("--eps2", type=float, help="discard IoU threshold")
        p.add_argument("--steps", type=int, help="RL steps")
        p.add_argument("--group-size", type=int, help="GRPO group size G")
        p.add_argument("--beta", type=float, help="KL coefficient")
        p.add_argument("--lambda-tiou", type=float, help="tIoU reward weight")
        p.add_argument("--lambda-form", type=float, help="format reward weight")
        p.add_argument("--max-len", type=int, help="maximum response length in tokens")
        p.add_argument("--variant", choices=VARIANTS, default="coldstart", help="pipeline variant")
        p.add_argument("--checkpoint", help="input policy checkpoint")
        p.add_argument("--dataset", help="input dataset file")
        p.add_argument("--val", help="validation sample file for 'rl' (default: generated from the config)")
        p.add_argument("--thresholds", type=_thresholds, help="comma-separated IoU thresholds")
    return parser


def _overrides(args) -> dict:
    return {
        ("", "seed"): args.seed,
        ("curation", "n_samples"): args.n,
        ("curation", "eps1"): args.eps1,
        ("curation", "eps2"): args.eps2,
        ("train", "rl_steps"): args.steps,
        ("train", "G"): args.group_size,
        ("train", "beta"): args.beta,
        ("train", "max_len"): args.max_len,
        ("reward", "lambda_tiou"): args.lambda_tiou,
        ("reward", "lambda_form"): args.lambda_form,
        ("eval", "thresholds"): args.thresholds,
    }


def _resolve(args) -> PipelineConfig:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        raw = _read_json(path)
    return resolve_config(raw, _overrides(args))


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handler, _ = COMMANDS[args.command]
    try:
        cfg = _resolve(args)
        if args.workdir is None:
            handler(args, cfg)
        else:
            workdir = Path(args.workdir)
            workdir.mkdir(parents=True, exist_ok=True)
            with FileLock(str(workdir / ".vtg_rl.lock"), timeout=0):
                if args.command == "pipeline":
                    write_json(workdir / "config.resolved.json", cfg.to_dict())
                handler(args, cfg)
    except Timeout:
        print(f"{PROG}: error: work directory {args.workdir} is locked by another run", file=sys.stderr)
        return 3
    except (CliError, ValueError, OSError, KeyError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
