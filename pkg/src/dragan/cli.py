"""Command line entry point: ``dragan <subcommand> --config run.ini --seed 0``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .exceptions import ConfigError, ContractError, DataError, DraganError, NumericDomainError
from .text_data import build_vocab, load_dataset, read_manifest, synth_corpus, write_corpus
from .training import (
    TrainConfig,
    benchmark_inference,
    evaluate,
    joint_gradient_check,
    joint_train,
    new_checkpoint,
    pretrain_classifier,
    pretrain_generator,
    standard_eval_sets,
)

log = logging.getLogger("dragan")

STAGE_FILES = {"pretrain_gen": "generator.drgn", "pretrain_cls": "classifier.drgn", "joint": "joint.drgn"}
STAGE_INPUT = {"pretrain_cls": "pretrain_gen", "joint": "pretrain_cls"}


def _train_config(cfg: RunConfig, stage: str, seed: int) -> TrainConfig:
    try:
        return TrainConfig(stage=stage, seed=seed, **cfg.train(stage)).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _data(cfg: RunConfig, args):
    data_dir = Path(args.data) if getattr(args, "data", None) else cfg.path("data_dir")
    manifest = read_manifest(data_dir)
    cats = manifest["categories"]
    return data_dir, cats


def _ckpt_path(cfg: RunConfig, args, default_name: str) -> Path:
    return Path(args.checkpoint) if getattr(args, "checkpoint", None) else cfg.path("work_dir") / default_name


def _out_path(cfg: RunConfig, args, default_name: str) -> Path:
    path = Path(args.out) if getattr(args, "out", None) else cfg.path("work_dir") / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_synth(cfg: RunConfig, args) -> dict:
    spec = cfg.corpus_spec(seed=args.seed)
    out = Path(args.out) if args.out else cfg.path("data_dir")
    corpus = synth_corpus(spec)
    write_corpus(corpus, out)
    return {"data_dir": str(out), "counts": {k: len(v) for k, v in corpus.splits().items()}}


def cmd_pretrain_gen(cfg: RunConfig, args) -> dict:
    data_dir, cats = _data(cfg, args)
    pretrain = load_dataset(data_dir / "pretrain.tsv", cats)
    joint = load_dataset(data_dir / "joint.tsv", cats)
    try:
        ckpt = new_checkpoint(
            build_vocab(pretrain + joint), cats, cfg.section("generator"), cfg.section("classifier"), seed=args.seed
        )
    except (ContractError, TypeError) as exc:
        raise ConfigError(f"model config: {exc}") from None
    tc = _train_config(cfg, "pretrain_gen", args.seed)
    hist = pretrain_generator(pretrain, tc, ckpt)
    out = _out_path(cfg, args, STAGE_FILES["pretrain_gen"])
    save_checkpoint(ckpt, out)
    return {"checkpoint": str(out), "loss": hist, "skipped_short_titles": ckpt.meta.get("pretrain_gen_skipped", 0)}


def _stage_from_previous(cfg: RunConfig, args, stage: str, fn) -> dict:
    data_dir, cats = _data(cfg, args)
    joint = load_dataset(data_dir / "joint.tsv", cats)
    src = _ckpt_path(cfg, args, STAGE_FILES[STAGE_INPUT[stage]])
    ckpt = load_checkpoint(src)
    if ckpt.categories != cats:
        raise DataError(f"checkpoint {src} was trained on different categories than {data_dir}")
    hist = fn(joint, _train_config(cfg, stage, args.seed), ckpt)
    out = _out_path(cfg, args, STAGE_FILES[stage])
    save_checkpoint(ckpt, out)
    return {"checkpoint": str(out), "loss": hist}


def cmd_pretrain_cls(cfg, args):
    return _stage_from_previous(cfg, args, "pretrain_cls", pretrain_classifier)


def cmd_joint_train(cfg, args):
    return _stage_from_previous(cfg, args, "joint", joint_train)


def cmd_eval(cfg: RunConfig, args) -> dict:
    data_dir, cats = _data(cfg, args)
    ev = cfg.section("eval")
    ckpt = load_checkpoint(_ckpt_path(cfg, args, ev["checkpoint"]))
    sets = standard_eval_sets(
        load_dataset(data_dir / "eval_overall.tsv", cats), load_dataset(data_dir / "eval_longtail.tsv", cats)
    )
    torch.manual_seed(args.seed)
    report = evaluate(ckpt, sets, tau=float(ev["tau"]))
    out = Path(args.out) if args.out else cfg.path("work_dir")
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "metrics.json")
    report.write_histogram_tsv(out / "start_histogram.tsv")
    return {
        "metrics": str(out / "metrics.json"),
        "f1": {name: s.f1 for name, s in report.splits.items()},
    }


def cmd_gradcheck(cfg: RunConfig, args) -> dict:
    gc = cfg.section("gradcheck")
    res = joint_gradient_check(seed=args.seed, eps=float(gc["eps"]))
    fd = res.finite_difference
    summary = {
        "max_rel_err": fd.max_rel_err,
        "worst_param": fd.worst_param,
        "closed_form_max_abs_diff": res.closed_form_max_abs_diff,
        "n_params": res.n_params,
        "seconds": round(res.seconds, 2),
    }
    if fd.max_rel_err >= float(gc["tol"]) or res.closed_form_max_abs_diff >= float(gc["closed_form_tol"]):
        raise NumericDomainError(f"gradient check failed: {json.dumps(summary)}")
    return summary


def cmd_bench(cfg: RunConfig, args) -> dict:
    data_dir, cats = _data(cfg, args)
    b = cfg.section("bench")
    ckpt = load_checkpoint(_ckpt_path(cfg, args, b["checkpoint"]))
    queries = [e.query for e in load_dataset(data_dir / "eval_overall.tsv", cats)]
    stats = {
        mode: asdict(benchmark_inference(ckpt, queries, mode, int(b["n_queries"]), int(b["warmup"])))
        for mode in ("fragment", "full_title")
    }
    stats["ratio"] = stats["full_title"]["median_ms"] / stats["fragment"]["median_ms"]
    return stats


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic corpus"),
    "pretrain-gen": (cmd_pretrain_gen, "pre-train the fragment generator on gold title clips"),
    "pretrain-cls": (cmd_pretrain_cls, "pre-train the classifier on generated fragments"),
    "joint-train": (cmd_joint_train, "train generator and classifier jointly"),
    "eval": (cmd_eval, "evaluate a checkpoint on the overall and long-tail sets"),
    "gradcheck": (cmd_gradcheck, "finite-difference and closed-form check of the joint loss"),
    "bench": (cmd_bench, "per-query latency, fragment vs full-title decoding"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dragan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file with [sections]")
        p.add_argument("--seed", type=int, default=0)
        if name != "gradcheck":
            p.add_argument("--out", help="output path (defaults come from [paths])")
        if name not in ("synth", "gradcheck"):
            p.add_argument("--data", help="corpus directory (overrides paths.data_dir)")
        if name in ("pretrain-cls", "joint-train", "eval", "bench"):
            p.add_argument("--checkpoint", help="input checkpoint")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        result = COMMANDS[args.command][0](cfg, args)
    except DraganError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
