"""Command-line entry point.

One config file drives everything; flags override config values; environment
variables are never consulted. Exit codes: 0 success, 1 usage error, 2 data
error (missing artifact, bad manifest, bad config).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from . import evolve
from .config import ConfigError, RunConfig, load_config, save_config, validate_config
from .corpus import ManifestError
from .generator import N_LEVELS
from .tensorio import TensorFormatError, write_matrix
from .tokenizer import TokenSequence
from .training import load_generator
from .rng import derive_seed

_DATA_ERRORS = (
    evolve.PipelineError,
    evolve.StageError,
    ManifestError,
    ConfigError,
    TensorFormatError,
    ValueError,
    FileNotFoundError,
)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this interface reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    p = _Parser(prog="confcap", description=__doc__)
    p.add_argument("--config", default="config.yaml", help="path to the run config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--run-id", default=None, help="override the config run id")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    sub.add_parser("init", help="write a default config (if absent) and the toy corpora")

    train = sub.add_parser("train", help="train the caption model for one stage")
    train.add_argument("--stage", type=int, choices=[1, 3, 4], required=True)

    sub.add_parser("stats", help="confidence statistics of the stage-1 model on val")
    sub.add_parser("filter", help="split the weak corpus into high/low confidence halves")
    sub.add_parser("pairs", help="mine preference pairs from the low-confidence half")
    sub.add_parser("refine", help="rescore and possibly recaption every record")
    sub.add_parser("quantize", help="fit the 5-level confidence quantizer")
    sub.add_parser("gen-train", help="train the conditional generator on the refined corpus")

    gen = sub.add_parser("generate", help="sample a mel patch conditioned on a caption")
    gen.add_argument("--caption", required=True, help="text prompt")
    gen.add_argument(
        "--level",
        type=int,
        choices=range(N_LEVELS),
        default=N_LEVELS - 1,
        help="quality level (default: highest)",
    )
    gen.add_argument("--steps", type=int, default=None, help="sampling steps (default: full)")
    gen.add_argument("--guidance", type=float, default=None, help="guidance scale override")
    gen.add_argument(
        "--sample-seed", type=int, default=None, help="sampling seed (default: derived)"
    )
    gen.add_argument("--out", default=None, help="output path (default: under runs/)")

    evc = sub.add_parser("eval-captions", help="BLEU@4 / ROUGE-L of a checkpoint on a split")
    evc.add_argument("--stage", type=int, choices=[1, 3, 4], default=3)
    evc.add_argument("--split", choices=["val", "test"], default="test")

    evf = sub.add_parser("eval-confidence", help="confidence distribution of a checkpoint")
    evf.add_argument("--stage", type=int, choices=[1, 3, 4], default=1)
    evf.add_argument("--split", choices=["val", "test"], default="val")

    sub.add_parser("pipeline", help="run the full chain S1 through GEN_TRAIN")
    return p


def _load_cfg(args) -> RunConfig:
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}; run `confcap init` first")
    cfg = load_config(path)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.run_id is not None:
        cfg.run_id = args.run_id
    validate_config(cfg)
    return cfg


def _log(msg: str) -> None:
    print(msg, flush=True)


def _cmd_init(args) -> int:
    path = Path(args.config)
    if not path.exists():
        save_config(RunConfig(), path)
        _log(f"wrote default config to {path}")
    cfg = _load_cfg(args)
    evolve.init_workspace(cfg, _log)
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    step = {1: evolve.stage1_train, 3: evolve.stage3_train, 4: evolve.stage4_train}[args.stage]
    step(cfg, _log)
    _log(f"stage {args.stage} checkpoint written")
    return 0


def _cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    paths = evolve.artifact_paths(cfg)
    ckpt = paths["gen"]
    if not ckpt.exists():
        raise evolve.PipelineError(f"missing generator checkpoint {ckpt}; run `confcap gen-train` first")
    gen, _ = load_generator(ckpt)
    caption = TokenSequence.from_caption(args.caption)
    seed = (
        args.sample_seed
        if args.sample_seed is not None
        else derive_seed(cfg.seed, "sample", args.caption, args.level)
    )
    mel = gen.sample(
        caption, level=args.level, steps=args.steps, guidance_scale=args.guidance, seed=seed
    )
    out = Path(args.out) if args.out else paths["samples"] / f"mel_level{args.level}.bin"
    write_matrix(out, mel)
    sidecar = {
        "caption": args.caption,
        "level": args.level,
        "seed": seed,
        "steps": args.steps if args.steps is not None else gen.cfg.t_max,
        "guidance_scale": args.guidance if args.guidance is not None else gen.cfg.guidance_scale,
    }
    out.with_suffix(".json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    _log(f"wrote {mel.shape[0]}x{mel.shape[1]} mel patch to {out}")
    return 0


def _cmd_eval_captions(args) -> int:
    cfg = _load_cfg(args)
    report = evolve.evaluate_captions(cfg, f"stage{args.stage}", args.split)
    out = evolve.artifact_paths(cfg)["reports"] / f"captions-stage{args.stage}-{args.split}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _log(
        f"stage{args.stage} on {args.split}: bleu4={report['bleu4']:.4f} "
        f"rouge_l={report['rouge_l']:.4f} n={report['n']}"
    )
    _log(f"report written to {out}")
    return 0


def _cmd_eval_confidence(args) -> int:
    cfg = _load_cfg(args)
    report = evolve.evaluate_confidence(cfg, f"stage{args.stage}", args.split)
    rep_dir = evolve.artifact_paths(cfg)["reports"]
    rep_dir.mkdir(parents=True, exist_ok=True)
    base = f"confidence-stage{args.stage}-{args.split}"
    (rep_dir / f"{base}.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    lines = [f"{x:.6f} {d:.8f}" for x, d in zip(report["grid"], report["density"])]
    (rep_dir / f"{base}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _log(f"stage{args.stage} on {args.split}: n={report['n']} std={report['std']:.4f}")
    _log(f"report written to {rep_dir / (base + '.json')}")
    _log(f"density grid written to {rep_dir / (base + '.txt')}")
    return 0


def _cmd_simple(step):
    def run(args) -> int:
        cfg = _load_cfg(args)
        step(cfg, _log)
        return 0

    return run


def _cmd_pipeline(args) -> int:
    cfg = _load_cfg(args)
    evolve.run_pipeline(cfg, _log)
    _log("pipeline complete")
    return 0


_COMMANDS = {
    "init": _cmd_init,
    "train": _cmd_train,
    "stats": _cmd_simple(evolve.stage1_stats),
    "filter": _cmd_simple(evolve.stage2_filter),
    "pairs": _cmd_simple(evolve.stage4_pairs),
    "refine": _cmd_simple(evolve.refine_step),
    "quantize": _cmd_simple(evolve.quantize_step),
    "gen-train": _cmd_simple(evolve.gen_train_step),
    "generate": _cmd_generate,
    "eval-captions": _cmd_eval_captions,
    "eval-confidence": _cmd_eval_confidence,
    "pipeline": _cmd_pipeline,
}


def main(argv=None) -> int:
    torch.set_num_threads(1)
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _DATA_ERRORS as e:
        print(f"confcap: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
