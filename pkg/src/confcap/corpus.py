"""Toy clip corpus: record model, manifest files, and synthetic generation.

A clip's "audio" is a T x 32 float32 feature matrix: a sum of per-event
template patches placed at random onsets plus Gaussian noise. Its caption
names the events in onset order via the grammar in :mod:`confcap.tokenizer`.

Manifest file format: line-delimited JSON. The first line is a header object
with ``split`` and ``stage_provenance``; each following line is one record
with exactly the keys ``id, features_path, caption, tags, confidence, level,
source`` (optional keys omitted when unset). Serialization is canonical
(sorted keys, no spaces), so saving the same manifest twice yields identical
bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensorio
from .tokenizer import (
    MAX_CAPTION_TOKENS,
    N_EVENTS,
    caption_for_events,
    encode_words,
)

SOURCES = ("well_labeled", "weak_labeled", "synthetic_caption")
SPLITS = ("train", "val", "test")
CORRUPTION_MODES = ("deletion", "substitution", "reordering", "mixed")

N_LEVELS = 5
FEATURE_DIM = 32
MIN_FRAMES, MAX_FRAMES = 32, 128

# Template length and noise floor trade off per-event evidence against clip
# variety. 16 frames at sigma 0.1 gave the best balance of caption-vs-audio
# score separation and a filterable confidence spread on held-out clips.
_TEMPLATE_FRAMES = 16
_NOISE_SCALE = 0.1

_RECORD_KEYS = ("id", "features_path", "caption", "tags", "confidence", "level", "source")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusRecord:
    id: str
    features_path: str
    caption: str
    source: str
    tags: frozenset[int] | None = None
    confidence: float | None = None
    level: int | None = None

    def validate(self) -> None:
        if not self.id:
            raise ManifestError("record id must be non-empty")
        if not self.features_path:
            raise ManifestError(f"record {self.id}: empty features_path")
        n_tokens = len(encode_words(self.caption))
        if not 1 <= n_tokens <= MAX_CAPTION_TOKENS:
            raise ManifestError(
                f"record {self.id}: caption tokenizes to {n_tokens} tokens, "
                f"expected 1..{MAX_CAPTION_TOKENS}"
            )
        if self.source not in SOURCES:
            raise ManifestError(f"record {self.id}: unknown source {self.source!r}")
        if self.tags is not None:
            for t in self.tags:
                if not (isinstance(t, int) and 0 <= t < N_EVENTS):
                    raise ManifestError(f"record {self.id}: tag {t!r} out of range")
        if self.confidence is not None and not -1.0 <= self.confidence <= 1.0:
            raise ManifestError(
                f"record {self.id}: confidence {self.confidence} outside [-1, 1]"
            )
        if self.level is not None and not (
            isinstance(self.level, int) and 0 <= self.level < N_LEVELS
        ):
            raise ManifestError(f"record {self.id}: level {self.level!r} outside 0..{N_LEVELS - 1}")

    def to_json(self) -> str:
        doc: dict = {
            "id": self.id,
            "features_path": self.features_path,
            "caption": self.caption,
            "source": self.source,
        }
        if self.tags is not None:
            doc["tags"] = sorted(self.tags)
        if self.confidence is not None:
            doc["confidence"] = float(self.confidence)
        if self.level is not None:
            doc["level"] = int(self.level)
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str, *, where: str = "<line>") -> "CorpusRecord":
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{where}: malformed record line: {e}") from None
        if not isinstance(doc, dict):
            raise ManifestError(f"{where}: record line is not an object")
        unknown = set(doc) - set(_RECORD_KEYS)
        if unknown:
            raise ManifestError(f"{where}: unknown record keys {sorted(unknown)}")
        missing = {"id", "features_path", "caption", "source"} - set(doc)
        if missing:
            raise ManifestError(f"{where}: missing record keys {sorted(missing)}")
        tags = doc.get("tags")
        rec = cls(
            id=doc["id"],
            features_path=doc["features_path"],
            caption=doc["caption"],
            source=doc["source"],
            tags=frozenset(tags) if tags is not None else None,
            confidence=doc.get("confidence"),
            level=doc.get("level"),
        )
        try:
            rec.validate()
        except ManifestError as e:
            raise ManifestError(f"{where}: {e}") from None
        return rec


@dataclass
class Manifest:
    records: list[CorpusRecord]
    split: str
    stage_provenance: str
    # Directory feature paths resolve against; set on load, never serialized.
    base_dir: Path | None = field(default=None, compare=False)

    def validate(self, *, check_paths: bool = False) -> None:
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")
        seen: set[str] = set()
        for rec in self.records:
            rec.validate()
            if rec.id in seen:
                raise ManifestError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
        if check_paths:
            for rec in self.records:
                if not self.resolve_features(rec).exists():
                    raise ManifestError(
                        f"record {rec.id}: features file not found: {rec.features_path}"
                    )

    def resolve_features(self, rec: CorpusRecord) -> Path:
        p = Path(rec.features_path)
        if p.is_absolute() or self.base_dir is None:
            return p
        return self.base_dir / p

    def by_id(self) -> dict[str, CorpusRecord]:
        return {r.id: r for r in self.records}

    def __len__(self) -> int:
        return len(self.records)


def save_manifest(manifest: Manifest, path) -> None:
    manifest.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(
        {"split": manifest.split, "stage_provenance": manifest.stage_provenance},
        sort_keys=True,
        separators=(",", ":"),
    )
    lines = [header] + [rec.to_json() for rec in manifest.records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty file, expected a header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}:1: malformed header: {e}") from None
    if not isinstance(header, dict) or set(header) != {"split", "stage_provenance"}:
        raise ManifestError(f"{path}:1: header must carry exactly split and stage_provenance")
    records = [
        CorpusRecord.from_json(line, where=f"{path}:{i}")
        for i, line in enumerate(lines[1:], start=2)
        if line.strip()
    ]
    manifest = Manifest(
        records=records,
        split=header["split"],
        stage_provenance=header["stage_provenance"],
        base_dir=path.parent,
    )
    manifest.validate(check_paths=True)
    return manifest


# ---------------------------------------------------------------------------
# Synthetic generation


def _event_templates(seed_seq: np.random.SeedSequence) -> np.ndarray:
    rng = np.random.default_rng(seed_seq)
    return rng.standard_normal((N_EVENTS, _TEMPLATE_FRAMES, FEATURE_DIM)).astype(np.float32)


def _make_clip(
    rng: np.random.Generator, templates: np.ndarray, min_events: int, max_events: int
) -> tuple[np.ndarray, list[int]]:
    """One clip: distinct events at non-overlapping onsets over a noise floor.

    Clip length is drawn so every event fits without overlap; overlapping
    templates would smear the evidence for individual events and make the
    caption only loosely tied to the features.
    """
    m = int(rng.integers(min_events, max_events + 1))
    events = rng.choice(N_EVENTS, size=m, replace=False)
    lo = max(MIN_FRAMES, m * _TEMPLATE_FRAMES + 4)
    n_frames = int(rng.integers(lo, MAX_FRAMES + 1))
    feats = _NOISE_SCALE * rng.standard_normal((n_frames, FEATURE_DIM))
    # Stars-and-bars: spread the spare frames into m+1 gaps between templates.
    slack = n_frames - m * _TEMPLATE_FRAMES
    dividers = np.sort(rng.choice(slack + m, size=m, replace=False))
    gaps = np.diff(np.concatenate(([0], dividers + 1))) - 1
    onsets = np.cumsum(gaps) + np.arange(m) * _TEMPLATE_FRAMES
    ordered = [int(e) for e in events]
    for ev, onset in zip(events, onsets):
        feats[onset : onset + _TEMPLATE_FRAMES] += templates[ev]
    return feats.astype(np.float32), ordered


def _corrupt_events(events: list[int], mode: str, rng: np.random.Generator) -> list[int]:
    if mode == "mixed":
        mode = ("deletion", "substitution", "reordering")[int(rng.integers(3))]
    out = list(events)
    if mode == "deletion":
        if len(out) < 2:
            raise ValueError("deletion needs at least 2 events")
        del out[int(rng.integers(len(out)))]
    elif mode == "substitution":
        idx = int(rng.integers(len(out)))
        absent = [e for e in range(N_EVENTS) if e not in events]
        out[idx] = int(absent[int(rng.integers(len(absent)))])
    elif mode == "reordering":
        if len(out) < 2:
            raise ValueError("reordering needs at least 2 events")
        i = int(rng.integers(len(out) - 1))
        out[i], out[i + 1] = out[i + 1], out[i]
    else:
        raise ValueError(f"unknown corruption mode {mode!r}")
    return out


def _write_records(
    prefix: str,
    n: int,
    clip_rng: np.random.Generator,
    templates: np.ndarray,
    out_dir: Path,
    *,
    min_events: int,
    max_events: int,
) -> list[tuple[str, str, list[int]]]:
    """Synthesize clips and write feature files; return (id, path, events)."""
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n):
        feats, events = _make_clip(clip_rng, templates, min_events, max_events)
        rec_id = f"{prefix}-{i:04d}"
        rel = f"features/{rec_id}.bin"
        tensorio.write_matrix(out_dir / rel, feats)
        rows.append((rec_id, rel, events))
    return rows


def generate_toy_corpus(
    seed: int,
    n_well: int,
    n_weak: int,
    *,
    p_corrupt: float = 0.5,
    corruption: str = "mixed",
    out_dir,
) -> tuple[Manifest, Manifest]:
    """Build the well-labeled and weakly labeled training corpora.

    Corruption draws come from a stream separate from clip synthesis, so the
    same seed yields identical clips and feature files for every value of
    ``p_corrupt``; only the weak captions change. Weak clips always carry at
    least two events so every corruption mode is applicable. Weak tags are
    present with probability 0.5 and always describe the true events.
    """
    if corruption not in CORRUPTION_MODES:
        raise ValueError(f"unknown corruption mode {corruption!r}")
    if not 0.0 <= p_corrupt <= 1.0:
        raise ValueError(f"p_corrupt {p_corrupt} outside [0, 1]")
    out_dir = Path(out_dir)
    ss_templates, ss_well, ss_weak, _, _ = np.random.SeedSequence(seed).spawn(5)
    templates = _event_templates(ss_templates)
    provenance = f"toy-corpus seed={seed}"

    well_rng = np.random.default_rng(ss_well)
    well_rows = _write_records(
        "well", n_well, well_rng, templates, out_dir, min_events=1, max_events=4
    )
    well_records = [
        CorpusRecord(
            id=rid,
            features_path=rel,
            caption=caption_for_events(events),
            source="well_labeled",
            tags=frozenset(events),
        )
        for rid, rel, events in well_rows
    ]

    ss_clips, ss_corrupt, ss_tags = ss_weak.spawn(3)
    weak_rng = np.random.default_rng(ss_clips)
    corrupt_rng = np.random.default_rng(ss_corrupt)
    tags_rng = np.random.default_rng(ss_tags)
    weak_rows = _write_records(
        "weak", n_weak, weak_rng, templates, out_dir, min_events=2, max_events=4
    )
    weak_records = []
    for rid, rel, events in weak_rows:
        caption_events = events
        if corrupt_rng.random() < p_corrupt:
            caption_events = _corrupt_events(events, corruption, corrupt_rng)
        tags = frozenset(events) if tags_rng.random() < 0.5 else None
        weak_records.append(
            CorpusRecord(
                id=rid,
                features_path=rel,
                caption=caption_for_events(caption_events),
                source="weak_labeled",
                tags=tags,
            )
        )

    well = Manifest(well_records, split="train", stage_provenance=provenance, base_dir=out_dir)
    weak = Manifest(weak_records, split="train", stage_provenance=provenance, base_dir=out_dir)
    return well, weak


def generate_eval_corpus(seed: int, n: int, split: str, *, out_dir) -> Manifest:
    """Held-out well-labeled clips sharing the training corpus templates."""
    if split not in ("val", "test"):
        raise ValueError(f"eval split must be val or test, got {split!r}")
    out_dir = Path(out_dir)
    children = np.random.SeedSequence(seed).spawn(5)
    templates = _event_templates(children[0])
    rng = np.random.default_rng(children[3] if split == "val" else children[4])
    rows = _write_records(split, n, rng, templates, out_dir, min_events=1, max_events=4)
    records = [
        CorpusRecord(
            id=rid,
            features_path=rel,
            caption=caption_for_events(events),
            source="well_labeled",
            tags=frozenset(events),
        )
        for rid, rel, events in rows
    ]
    return Manifest(
        records, split=split, stage_provenance=f"toy-corpus seed={seed}", base_dir=out_dir
    )


def clean_weak_captions(seed: int, n_weak: int) -> dict[str, str]:
    """Uncorrupted caption for every weak record id, via the generation rule.

    Replays the weak clip stream for ``seed`` without touching any files;
    useful as an oracle when judging corrupted captions.
    """
    _, _, ss_weak, _, _ = np.random.SeedSequence(seed).spawn(5)
    ss_clips, _, _ = ss_weak.spawn(3)
    rng = np.random.default_rng(ss_clips)
    # Mirror of _write_records/_make_clip without file output.
    out = {}
    for i in range(n_weak):
        _, events = _make_clip(rng, np.zeros((N_EVENTS, _TEMPLATE_FRAMES, FEATURE_DIM), np.float32), 2, 4)
        out[f"weak-{i:04d}"] = caption_for_events(events)
    return out


def with_confidence(rec: CorpusRecord, confidence: float) -> CorpusRecord:
    return replace(rec, confidence=float(confidence))


def with_level(rec: CorpusRecord, level: int) -> CorpusRecord:
    return replace(rec, level=int(level))
