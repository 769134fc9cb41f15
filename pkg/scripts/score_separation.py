#!/usr/bin/env python3
"""Confidence separation study: true captions versus corrupted ones.

For each checkpoint of a finished pipeline run, scores every weak clip
against its true caption and against a corrupted variant, and reports the
fraction where the true caption wins. This is the mechanism the mu - sigma
filter leans on, so the stage-to-stage trend is the interesting part: the
stage-1 model sees only 16 clips and separates weakly, while stage 3 has
absorbed the kept weak data and separates well.

Run `confcap init && confcap pipeline` first, then:
    python scripts/score_separation.py --config path/to/config.yaml
"""

from __future__ import annotations

import argparse
import tempfile
from pathlib import Path

import torch

from confcap.captioner import confidence
from confcap.config import load_config
from confcap.corpus import clean_weak_captions, generate_toy_corpus
from confcap.evolve import artifact_paths
from confcap.tensorio import read_matrix
from confcap.tokenizer import TokenSequence
from confcap.training import load_captioner

CORRUPTIONS = ("substitution", "deletion", "reordering")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, required=True)
    args = ap.parse_args()

    torch.set_num_threads(1)
    cfg = load_config(args.config)
    paths = artifact_paths(cfg)
    clean = clean_weak_captions(cfg.seed, cfg.corpus.n_weak)

    checkpoints = [(tag, paths[tag]) for tag in ("stage1", "stage3", "stage4")]
    print(f"{'model':8s} " + " ".join(f"{c:>12s}" for c in CORRUPTIONS))
    for tag, ckpt_path in checkpoints:
        if not ckpt_path.exists():
            print(f"{tag:8s} (missing checkpoint, skipped)")
            continue
        model, _ = load_captioner(ckpt_path)
        model.eval()
        wins = []
        for corruption in CORRUPTIONS:
            tmp = Path(tempfile.mkdtemp(prefix=f"sep-{corruption}-"))
            _, weak = generate_toy_corpus(
                cfg.seed, cfg.corpus.n_well, cfg.corpus.n_weak,
                p_corrupt=1.0, corruption=corruption, out_dir=tmp,
            )
            n = w = 0
            with torch.no_grad():
                for rec in weak.records:
                    true_caption = clean[rec.id]
                    if rec.caption == true_caption:
                        continue  # reordering leaves some orders unchanged
                    feats = torch.from_numpy(read_matrix(tmp / rec.features_path))
                    c_true = confidence(model, feats, TokenSequence.from_caption(true_caption))
                    c_bad = confidence(model, feats, TokenSequence.from_caption(rec.caption))
                    n += 1
                    w += c_true > c_bad
            wins.append(f"{w}/{n} ({w / n:.2f})" if n else "n/a")
        print(f"{tag:8s} " + " ".join(f"{v:>12s}" for v in wins))


if __name__ == "__main__":
    main()
