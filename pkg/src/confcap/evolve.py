"""Staged training pipeline driven by confidence scores.

Chain: S1 pretrain on the well-labeled corpus and take confidence statistics
on the validation split; S2 split the weak corpus at mean - std into high and
low halves; S3 retrain on well + high; S4 mine preference pairs from the low
half and fine-tune with the preference objective against a frozen reference;
REFINE rescore and possibly recaption every record, then fit the five-level
confidence quantizer; GEN_TRAIN hand the refined corpus to the generator.

All artifacts live under ``runs/<run-id>/``: ``stage{1,3,4}/checkpoint``,
``stats.json``, ``quantizer.json``, ``manifests/{high,low,refined,pairs}``,
and ``gen/checkpoint``. Relative feature paths inside run manifests point
back at the corpus directory. Every step is deterministic given the config
seed, so rerunning a step rewrites identical bytes.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from . import corpus as corpus_mod
from . import tensorio
from .captioner import (
    CaptionModelConfig,
    CaptionScorer,
    confidence_batch,
    generate_caption,
)
from .config import RunConfig
from .corpus import CorpusRecord, Manifest, load_manifest, save_manifest
from .generator import GeneratorConfig, QualityDiffusion, mel_from_features
from .metrics import bleu4, confidence_distribution, rouge_l
from .objectives import Batch, BatchItem, DPOConfig, PairItem
from .rng import derive_seed
from .tokenizer import MAX_CAPTION_TOKENS, VOCAB_SIZE, TokenSequence
from .training import (
    TrainRecord,
    load_captioner,
    load_generator,
    train_captioner,
    train_generator,
)


class PipelineError(RuntimeError):
    """A required artifact is missing or inconsistent."""


# ---------------------------------------------------------------------------
# Confidence statistics and filtering


@dataclass
class ConfidenceStats:
    mean: float
    std: float  # population standard deviation
    n: int
    split: str = "val"


def compute_stats(model: CaptionScorer, manifest: Manifest) -> ConfidenceStats:
    """Mean and population std of confidence over a manifest's own captions."""
    if len(manifest) < 2:
        raise PipelineError("confidence statistics need at least 2 validation records")
    scores = score_manifest(model, manifest)
    arr = np.asarray(scores, dtype=np.float64)
    return ConfidenceStats(
        mean=float(arr.mean()), std=float(arr.std(ddof=0)), n=len(scores), split=manifest.split
    )


def score_manifest(model: CaptionScorer, manifest: Manifest, batch_size: int = 32) -> list[float]:
    """Confidence of every record's clip against its own caption."""
    scores: list[float] = []
    for start in range(0, len(manifest), batch_size):
        chunk = manifest.records[start : start + batch_size]
        feats = [_load_features(manifest, r) for r in chunk]
        caps = [TokenSequence.from_caption(r.caption) for r in chunk]
        scores.extend(confidence_batch(model, feats, caps))
    return scores


def threshold_keep(scores, stats: ConfidenceStats) -> list[bool]:
    """The filter rule: keep scores strictly above mean - std."""
    cut = stats.mean - stats.std
    return [s > cut for s in scores]


def filter_weak(
    model: CaptionScorer, weak: Manifest, stats: ConfidenceStats
) -> tuple[Manifest, Manifest]:
    """Split the weak corpus into high/low confidence halves, scores attached."""
    scores = score_manifest(model, weak)
    keep = threshold_keep(scores, stats)
    high = [corpus_mod.with_confidence(r, s) for r, s, k in zip(weak.records, scores, keep) if k]
    low = [
        corpus_mod.with_confidence(r, s) for r, s, k in zip(weak.records, scores, keep) if not k
    ]

    def side(recs, name):
        return Manifest(
            records=recs,
            split=weak.split,
            stage_provenance=f"stage2-filter:{name}",
            base_dir=weak.base_dir,
        )

    return side(high, "high"), side(low, "low")


# ---------------------------------------------------------------------------
# Preference pairs


@dataclass
class PreferencePair:
    record_id: str
    y_w: TokenSequence
    y_l: TokenSequence
    conf_w: float
    conf_l: float


def build_preference_pairs(
    model: CaptionScorer,
    manifest: Manifest,
    *,
    n_candidates: int = 5,
    stats: ConfidenceStats,
    margin_sigmas: float = 2.0,
    seed: int = 0,
) -> list[PreferencePair]:
    """Mine winner/loser caption pairs from low-confidence records.

    Candidates are the record's own caption plus ``n_candidates`` nucleus
    samples (per-record derived seeds). The two best and two worst by
    confidence form up to four cross pairs, kept when the margin is at least
    ``margin_sigmas * stats.std`` and strictly positive; duplicate (y_w, y_l)
    texts are dropped.
    """
    if n_candidates < 3:
        raise ValueError("need at least 3 sampled candidates")
    pairs: list[PreferencePair] = []
    for rec in manifest.records:
        feats = _load_features(manifest, rec)
        cands = [TokenSequence.from_caption(rec.caption)]
        for k in range(n_candidates):
            cands.append(
                generate_caption(
                    model, feats, "nucleus", seed=derive_seed(seed, rec.id, "cand", k)
                )
            )
        scores = confidence_batch(model, [feats] * len(cands), cands)
        order = sorted(range(len(cands)), key=lambda i: (-scores[i], i))
        winners, losers = order[:2], order[-2:]
        margin = margin_sigmas * stats.std
        seen: set[tuple] = set()
        for w in winners:
            for lo in losers:
                if w == lo or cands[w].ids == cands[lo].ids:
                    continue
                if not (scores[w] > scores[lo] and scores[w] - scores[lo] >= margin):
                    continue
                key = (cands[w].ids, cands[lo].ids)
                if key in seen:
                    continue
                seen.add(key)
                pairs.append(
                    PreferencePair(rec.id, cands[w], cands[lo], scores[w], scores[lo])
                )
    return pairs


def save_pairs(pairs: list[PreferencePair], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"kind": "preference_pairs"}, sort_keys=True, separators=(",", ":"))]
    for p in pairs:
        lines.append(
            json.dumps(
                {
                    "record_id": p.record_id,
                    "y_w": list(p.y_w.ids),
                    "y_l": list(p.y_l.ids),
                    "conf_w": float(p.conf_w),
                    "conf_l": float(p.conf_l),
                },
                sort_keys=True,
                separators=(",", ":"),
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_pairs(path) -> list[PreferencePair]:
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"pairs file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    out = []
    for line in lines[1:]:
        if not line.strip():
            continue
        doc = json.loads(line)
        out.append(
            PreferencePair(
                record_id=doc["record_id"],
                y_w=TokenSequence(ids=tuple(doc["y_w"])),
                y_l=TokenSequence(ids=tuple(doc["y_l"])),
                conf_w=doc["conf_w"],
                conf_l=doc["conf_l"],
            )
        )
    return out


# ---------------------------------------------------------------------------
# Refinement and quantization


def refine_corpus(model: CaptionScorer, manifest: Manifest) -> Manifest:
    """Keep each record's better caption (original vs beam-3 synthetic).

    The synthetic caption wins only when its confidence is strictly higher;
    ties and degenerate (empty) synthetics keep the original. The stored
    confidence is the maximum of the two.
    """
    refined: list[CorpusRecord] = []
    for rec in manifest.records:
        feats = _load_features(manifest, rec)
        orig = TokenSequence.from_caption(rec.caption)
        syn = generate_caption(model, feats, "beam", beam_size=3)
        c_orig, c_syn = confidence_batch(model, [feats, feats], [orig, syn])
        valid = 1 <= len(syn.words()) <= MAX_CAPTION_TOKENS
        best = max(c_orig, c_syn) if valid else c_orig
        if valid and c_syn > c_orig:
            new = dataclasses.replace(
                rec, caption=syn.text(), source="synthetic_caption", confidence=best
            )
        else:
            new = dataclasses.replace(rec, confidence=best)
        refined.append(new)
    return Manifest(
        records=refined,
        split=manifest.split,
        stage_provenance="stage-refine",
        base_dir=manifest.base_dir,
    )


@dataclass
class ConfidenceQuantizer:
    """Five levels split at the 20/40/60/80th percentiles of refined scores."""

    boundaries: tuple[float, float, float, float]

    def __post_init__(self):
        b = self.boundaries
        if len(b) != 4 or any(b[i] >= b[i + 1] for i in range(3)):
            raise ValueError(f"boundaries must be 4 strictly ascending reals, got {b}")

    def level(self, score: float) -> int:
        return int(np.searchsorted(np.asarray(self.boundaries), score, side="left"))


def build_quantizer(manifest: Manifest) -> ConfidenceQuantizer:
    scores = [r.confidence for r in manifest.records]
    if any(s is None for s in scores):
        raise PipelineError("quantizer needs confidence on every record; run refine first")
    if len(set(scores)) < 5:
        raise PipelineError("quantizer needs at least 5 distinct confidence values")
    bounds = np.percentile(np.asarray(scores, dtype=np.float64), [20, 40, 60, 80])
    return ConfidenceQuantizer(boundaries=tuple(float(b) for b in bounds))


# ---------------------------------------------------------------------------
# Stage machine


class Stage(Enum):
    S1 = "S1"
    S2 = "S2"
    S3 = "S3"
    S4 = "S4"
    REFINE = "REFINE"
    GEN_TRAIN = "GEN_TRAIN"


STAGE_ORDER = [Stage.S1, Stage.S2, Stage.S3, Stage.S4, Stage.REFINE, Stage.GEN_TRAIN]


class StageError(RuntimeError):
    pass


def ensure_transition(current: Stage | None, target: Stage) -> None:
    """Reject any transition that does not follow the chain."""
    expected = STAGE_ORDER[0] if current is None else _successor(current)
    if target is not expected:
        cur = current.value if current is not None else "(start)"
        raise StageError(f"illegal stage transition {cur} -> {target.value}")


def _successor(stage: Stage) -> Stage | None:
    i = STAGE_ORDER.index(stage)
    return STAGE_ORDER[i + 1] if i + 1 < len(STAGE_ORDER) else None


@dataclass
class StageState:
    """Pipeline position: last completed stage plus the artifacts in play."""

    completed: Stage | None
    checkpoint: Path | None
    manifests: dict[str, Path]
    stats: ConfidenceStats | None

    @property
    def next_stage(self) -> Stage | None:
        return STAGE_ORDER[0] if self.completed is None else _successor(self.completed)

    def advance(self, to: Stage) -> "StageState":
        ensure_transition(self.completed, to)
        return dataclasses.replace(self, completed=to, manifests=dict(self.manifests))


# ---------------------------------------------------------------------------
# Paths and loading helpers


def corpus_manifest_path(cfg: RunConfig, name: str) -> Path:
    return cfg.corpus_dir() / f"{name}.manifest"


def artifact_paths(cfg: RunConfig) -> dict[str, Path]:
    run = cfg.run_dir()
    return {
        "stage1": run / "stage1" / "checkpoint",
        "stage3": run / "stage3" / "checkpoint",
        "stage4": run / "stage4" / "checkpoint",
        "stats": run / "stats.json",
        "quantizer": run / "quantizer.json",
        "high": run / "manifests" / "high",
        "low": run / "manifests" / "low",
        "refined": run / "manifests" / "refined",
        "pairs": run / "manifests" / "pairs",
        "gen": run / "gen" / "checkpoint",
        "reports": run / "reports",
        "samples": run / "samples",
    }


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing artifact {path}; run `{hint}` first")
    return path


def _load_features(manifest: Manifest, rec: CorpusRecord) -> torch.Tensor:
    return torch.from_numpy(tensorio.read_matrix(manifest.resolve_features(rec)))


def manifest_batch(manifest: Manifest, records: list[CorpusRecord] | None = None) -> Batch:
    recs = manifest.records if records is None else records
    return Batch(
        items=[
            BatchItem(
                features=_load_features(manifest, r),
                caption=TokenSequence.from_caption(r.caption),
                tags=r.tags,
            )
            for r in recs
        ]
    )


def _train_records(manifests: list[Manifest]) -> list[TrainRecord]:
    items = []
    for m in manifests:
        for r in m.records:
            items.append(
                TrainRecord(
                    features=_load_features(m, r),
                    caption_ids=TokenSequence.from_caption(r.caption).ids,
                    tags=r.tags,
                )
            )
    return items


def _model_config(cfg: RunConfig) -> CaptionModelConfig:
    m = cfg.model
    return CaptionModelConfig(
        n_queries=m.n_queries,
        d_model=m.d_model,
        n_layers=m.n_layers,
        n_heads=m.n_heads,
        vocab_size=VOCAB_SIZE,
        d_proj=m.d_proj,
        d_ff=m.d_ff,
        temperature_init=m.temperature_init,
    )


def _rewrite_paths(manifest: Manifest, target_dir: Path) -> Manifest:
    """Re-root relative feature paths so the manifest can live in target_dir."""
    out = []
    for rec in manifest.records:
        abs_path = manifest.resolve_features(rec).resolve()
        rel = os.path.relpath(abs_path, target_dir.resolve())
        out.append(dataclasses.replace(rec, features_path=rel))
    return Manifest(
        records=out,
        split=manifest.split,
        stage_provenance=manifest.stage_provenance,
        base_dir=target_dir,
    )


def _stats_json(stats: ConfidenceStats) -> str:
    return json.dumps(dataclasses.asdict(stats), sort_keys=True, separators=(",", ":")) + "\n"


def load_stats(path) -> ConfidenceStats:
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"missing statistics file {path}; run `confcap stats` first")
    return ConfidenceStats(**json.loads(path.read_text()))


def load_quantizer(path) -> ConfidenceQuantizer:
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"missing quantizer file {path}; run `confcap quantize` first")
    doc = json.loads(path.read_text())
    return ConfidenceQuantizer(boundaries=tuple(doc["boundaries"]))


# ---------------------------------------------------------------------------
# Granular pipeline steps (the CLI subcommands call these directly)


def init_workspace(cfg: RunConfig, log=None) -> None:
    """Generate the four corpus manifests and their feature files."""
    out = cfg.corpus_dir()
    well, weak = corpus_mod.generate_toy_corpus(
        cfg.seed,
        cfg.corpus.n_well,
        cfg.corpus.n_weak,
        p_corrupt=cfg.corpus.p_corrupt,
        corruption=cfg.corpus.corruption,
        out_dir=out,
    )
    val = corpus_mod.generate_eval_corpus(cfg.seed, cfg.corpus.n_val, "val", out_dir=out)
    test = corpus_mod.generate_eval_corpus(cfg.seed, cfg.corpus.n_test, "test", out_dir=out)
    for name, manifest in [("well", well), ("weak", weak), ("val", val), ("test", test)]:
        save_manifest(manifest, corpus_manifest_path(cfg, name))
    if log:
        log(
            f"corpus ready: {len(well)} well, {len(weak)} weak, "
            f"{len(val)} val, {len(test)} test records in {out}"
        )


def stage1_train(cfg: RunConfig, log=None) -> None:
    well = load_manifest(_require(corpus_manifest_path(cfg, "well"), "confcap init"))
    model = _seeded_construct(cfg.seed, "stage1-init", lambda: CaptionScorer(_model_config(cfg)))
    train_captioner(
        model,
        _train_records([well]),
        cfg.stage1,
        seed=cfg.seed,
        stage=1,
        stage_tag="stage1",
        final_path=artifact_paths(cfg)["stage1"],
        log=log,
    )


def stage1_stats(cfg: RunConfig, log=None) -> ConfidenceStats:
    paths = artifact_paths(cfg)
    model, _ = load_captioner(_require(paths["stage1"], "confcap train --stage 1"))
    val = load_manifest(_require(corpus_manifest_path(cfg, "val"), "confcap init"))
    stats = compute_stats(model, val)
    paths["stats"].parent.mkdir(parents=True, exist_ok=True)
    paths["stats"].write_text(_stats_json(stats), encoding="utf-8")
    if log:
        log(f"confidence stats on val: mean={stats.mean:.4f} std={stats.std:.4f} n={stats.n}")
    return stats


def stage2_filter(cfg: RunConfig, log=None) -> None:
    paths = artifact_paths(cfg)
    model, _ = load_captioner(_require(paths["stage1"], "confcap train --stage 1"))
    stats = load_stats(paths["stats"])
    weak = load_manifest(_require(corpus_manifest_path(cfg, "weak"), "confcap init"))
    high, low = filter_weak(model, weak, stats)
    manifest_dir = paths["high"].parent
    save_manifest(_rewrite_paths(high, manifest_dir), paths["high"])
    save_manifest(_rewrite_paths(low, manifest_dir), paths["low"])
    if log:
        log(f"filtered weak corpus: {len(high)} high, {len(low)} low (cut {stats.mean - stats.std:.4f})")


def stage3_train(cfg: RunConfig, log=None) -> None:
    paths = artifact_paths(cfg)
    model, _ = load_captioner(_require(paths["stage1"], "confcap train --stage 1"))
    well = load_manifest(_require(corpus_manifest_path(cfg, "well"), "confcap init"))
    high = load_manifest(_require(paths["high"], "confcap filter"))
    train_captioner(
        model,
        _train_records([well, high]),
        cfg.stage3,
        seed=cfg.seed,
        stage=3,
        stage_tag="stage3",
        final_path=paths["stage3"],
        log=log,
    )


def stage4_pairs(cfg: RunConfig, log=None) -> list[PreferencePair]:
    paths = artifact_paths(cfg)
    model, _ = load_captioner(_require(paths["stage3"], "confcap train --stage 3"))
    stats = load_stats(paths["stats"])
    low = load_manifest(_require(paths["low"], "confcap filter"))
    pairs = build_preference_pairs(
        model,
        low,
        n_candidates=cfg.pairs.n_candidates,
        stats=stats,
        margin_sigmas=cfg.pairs.margin_sigmas,
        seed=cfg.seed,
    )
    save_pairs(pairs, paths["pairs"])
    if log:
        log(f"mined {len(pairs)} preference pairs from {len(low)} low-confidence records")
    return pairs


def stage4_train(cfg: RunConfig, log=None) -> None:
    paths = artifact_paths(cfg)
    policy, _ = load_captioner(_require(paths["stage3"], "confcap train --stage 3"))
    reference, _ = load_captioner(paths["stage3"])
    for p in reference.parameters():
        p.requires_grad_(False)
    well = load_manifest(_require(corpus_manifest_path(cfg, "well"), "confcap init"))
    high = load_manifest(_require(paths["high"], "confcap filter"))
    low = load_manifest(_require(paths["low"], "confcap filter"))
    low_by_id = low.by_id()
    pair_items = []
    for p in load_pairs(_require(paths["pairs"], "confcap pairs")):
        if p.record_id not in low_by_id:
            raise PipelineError(f"pairs file references unknown record {p.record_id!r}")
        rec = low_by_id[p.record_id]
        pair_items.append(
            PairItem(features=_load_features(low, rec), y_w=p.y_w, y_l=p.y_l)
        )
    train_captioner(
        policy,
        _train_records([well, high]),
        cfg.stage4,
        seed=cfg.seed,
        stage=4,
        stage_tag="stage4",
        final_path=paths["stage4"],
        pairs=pair_items,
        reference=reference,
        dpo=DPOConfig(beta=cfg.dpo.beta),
        log=log,
    )


def refine_step(cfg: RunConfig, log=None) -> None:
    paths = artifact_paths(cfg)
    model, _ = load_captioner(_require(paths["stage4"], "confcap train --stage 4"))
    well = load_manifest(_require(corpus_manifest_path(cfg, "well"), "confcap init"))
    weak = load_manifest(_require(corpus_manifest_path(cfg, "weak"), "confcap init"))
    manifest_dir = paths["refined"].parent
    well_r = _rewrite_paths(well, manifest_dir)
    weak_r = _rewrite_paths(weak, manifest_dir)
    combined = Manifest(
        records=well_r.records + weak_r.records,
        split="train",
        stage_provenance="stage-refine",
        base_dir=manifest_dir,
    )
    refined = refine_corpus(model, combined)
    save_manifest(refined, paths["refined"])
    if log:
        n_syn = sum(1 for r in refined.records if r.source == "synthetic_caption")
        log(f"refined {len(refined)} records; {n_syn} captions replaced")


def quantize_step(cfg: RunConfig, log=None) -> ConfidenceQuantizer:
    paths = artifact_paths(cfg)
    refined = load_manifest(_require(paths["refined"], "confcap refine"))
    quant = build_quantizer(refined)
    paths["quantizer"].write_text(
        json.dumps({"boundaries": list(quant.boundaries)}, sort_keys=True, separators=(",", ":"))
        + "\n",
        encoding="utf-8",
    )
    levelled = Manifest(
        records=[corpus_mod.with_level(r, quant.level(r.confidence)) for r in refined.records],
        split=refined.split,
        stage_provenance=refined.stage_provenance,
        base_dir=refined.base_dir,
    )
    save_manifest(levelled, paths["refined"])
    if log:
        log(f"quantizer boundaries: {[round(b, 4) for b in quant.boundaries]}")
    return quant


def _generator_config(cfg: RunConfig) -> GeneratorConfig:
    g = cfg.generator
    return GeneratorConfig(
        base_channels=g.base_channels,
        t_max=g.t_max,
        beta_start=g.beta_start,
        beta_end=g.beta_end,
        d_time=g.d_time,
        d_text=g.d_text,
        vocab_size=VOCAB_SIZE,
        guidance_scale=g.guidance_scale,
        cond_dropout=g.cond_dropout,
    )


def gen_train_step(cfg: RunConfig, log=None) -> None:
    paths = artifact_paths(cfg)
    refined = load_manifest(_require(paths["refined"], "confcap refine"))
    if any(r.level is None for r in refined.records):
        raise PipelineError("refined manifest has no quality levels; run `confcap quantize` first")
    mels = torch.stack(
        [
            torch.from_numpy(mel_from_features(tensorio.read_matrix(refined.resolve_features(r))))
            for r in refined.records
        ]
    ).unsqueeze(1)
    captions = [TokenSequence.from_caption(r.caption) for r in refined.records]
    levels = torch.tensor([r.level for r in refined.records], dtype=torch.long)
    gen = _seeded_construct(cfg.seed, "gen-init", lambda: QualityDiffusion(_generator_config(cfg)))
    train_generator(
        gen,
        mels,
        captions,
        levels,
        vae_steps=cfg.generator.vae_steps,
        vae_lr=cfg.generator.vae_lr,
        ldm_steps=cfg.generator.ldm_steps,
        ldm_lr=cfg.generator.ldm_lr,
        batch_size=cfg.generator.batch_size,
        seed=cfg.seed,
        final_path=paths["gen"],
        log=log,
    )


def _seeded_construct(seed: int, tag: str, build):
    """Seed torch's global RNG so the constructor's draws are replayable."""
    torch.manual_seed(derive_seed(seed, tag))
    return build()


# ---------------------------------------------------------------------------
# run_stage and the full pipeline


def run_stage(state: StageState, cfg: RunConfig, log=None) -> StageState:
    """Execute the next stage in the chain and return the advanced state."""
    target = state.next_stage
    if target is None:
        raise StageError("pipeline already complete")
    paths = artifact_paths(cfg)
    if target is Stage.S1:
        stage1_train(cfg, log)
        stats = stage1_stats(cfg, log)
        new = state.advance(Stage.S1)
        return dataclasses.replace(new, checkpoint=paths["stage1"], stats=stats)
    if target is Stage.S2:
        stage2_filter(cfg, log)
        new = state.advance(Stage.S2)
        new.manifests.update(high=paths["high"], low=paths["low"])
        return new
    if target is Stage.S3:
        stage3_train(cfg, log)
        new = state.advance(Stage.S3)
        return dataclasses.replace(new, checkpoint=paths["stage3"])
    if target is Stage.S4:
        stage4_pairs(cfg, log)
        stage4_train(cfg, log)
        new = state.advance(Stage.S4)
        new.manifests["pairs"] = paths["pairs"]
        return dataclasses.replace(new, checkpoint=paths["stage4"])
    if target is Stage.REFINE:
        refine_step(cfg, log)
        quantize_step(cfg, log)
        new = state.advance(Stage.REFINE)
        new.manifests["refined"] = paths["refined"]
        return new
    if target is Stage.GEN_TRAIN:
        gen_train_step(cfg, log)
        return state.advance(Stage.GEN_TRAIN)
    raise StageError(f"unknown stage {target!r}")


def initial_state() -> StageState:
    return StageState(completed=None, checkpoint=None, manifests={}, stats=None)


def run_pipeline(cfg: RunConfig, log=None) -> StageState:
    state = initial_state()
    for _ in STAGE_ORDER:
        state = run_stage(state, cfg, log)
    return state


# ---------------------------------------------------------------------------
# Evaluation helpers


def evaluate_captions(cfg: RunConfig, stage_tag: str, split: str = "test") -> dict:
    """Greedy-decode a checkpoint on a split; macro-average BLEU and ROUGE."""
    paths = artifact_paths(cfg)
    ckpt = {"stage1": paths["stage1"], "stage3": paths["stage3"], "stage4": paths["stage4"]}.get(
        stage_tag
    )
    if ckpt is None:
        raise PipelineError(f"unknown stage tag {stage_tag!r}")
    model, _ = load_captioner(_require(ckpt, f"confcap train --stage {stage_tag[-1]}"))
    manifest = load_manifest(_require(corpus_manifest_path(cfg, split), "confcap init"))
    bleus, rouges = [], []
    for rec in manifest.records:
        feats = _load_features(manifest, rec)
        hyp = generate_caption(model, feats, "greedy")
        ref = TokenSequence.from_caption(rec.caption)
        hyp_words = list(hyp.words())
        if not hyp_words:
            bleus.append(0.0)
            rouges.append(0.0)
            continue
        bleus.append(bleu4(hyp_words, [list(ref.words())]))
        rouges.append(rouge_l(hyp_words, [list(ref.words())]))
    return {
        "stage": stage_tag,
        "split": split,
        "n": len(manifest),
        "bleu4": float(np.mean(bleus)) if bleus else 0.0,
        "rouge_l": float(np.mean(rouges)) if rouges else 0.0,
    }


def evaluate_confidence(cfg: RunConfig, stage_tag: str, split: str = "val") -> dict:
    """Score a split with a checkpoint and summarize the distribution."""
    paths = artifact_paths(cfg)
    ckpt = {"stage1": paths["stage1"], "stage3": paths["stage3"], "stage4": paths["stage4"]}.get(
        stage_tag
    )
    if ckpt is None:
        raise PipelineError(f"unknown stage tag {stage_tag!r}")
    model, _ = load_captioner(_require(ckpt, f"confcap train --stage {stage_tag[-1]}"))
    manifest = load_manifest(_require(corpus_manifest_path(cfg, split), "confcap init"))
    scores = score_manifest(model, manifest)
    report = confidence_distribution(scores)
    return {
        "stage": stage_tag,
        "split": split,
        "n": len(scores),
        "raw_scores": [float(s) for s in scores],
        "normalized": report.normalized,
        "std": report.std,
        "grid": report.grid,
        "density": report.density,
    }
