#!/usr/bin/env python3
"""Stage-1 sanity experiment: drive the captioner onto the 16-clip corpus.

Trains a fresh model on the well-labeled split of a freshly generated toy
corpus and reports the per-token captioning loss plus how many captions
greedy decoding reproduces exactly. A healthy setup reaches loss < 0.1 and
16/16 within the default schedule.

Usage:
    python scripts/overfit_well.py [--epochs N] [--seed S] [--out DIR]
"""

from __future__ import annotations

import argparse
import tempfile
import time
from pathlib import Path

import torch

from confcap.captioner import CaptionScorer, generate_caption
from confcap.config import RunConfig, StageSettings
from confcap.corpus import generate_toy_corpus
from confcap.evolve import _model_config, _seeded_construct, _train_records
from confcap.objectives import Batch, BatchItem, loss_aac
from confcap.tokenizer import TokenSequence
from confcap.training import train_captioner


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=400)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", type=Path, default=None, help="corpus/checkpoint dir (default: temp)")
    args = ap.parse_args()

    torch.set_num_threads(max(1, torch.get_num_threads()))
    out = args.out or Path(tempfile.mkdtemp(prefix="overfit-"))
    cfg = RunConfig(seed=args.seed)
    well, _ = generate_toy_corpus(args.seed, cfg.corpus.n_well, 0, out_dir=out / "corpus")
    records = _train_records([well])

    schedule = StageSettings(epochs=args.epochs, lr=cfg.stage1.lr, batch_size=cfg.stage1.batch_size)
    model = _seeded_construct(args.seed, "stage1-init", lambda: CaptionScorer(_model_config(cfg)))
    t0 = time.time()
    train_captioner(
        model, records, schedule, seed=args.seed, stage=1,
        stage_tag="stage1", final_path=out / "stage1.ckpt",
    )
    elapsed = time.time() - t0

    model.eval()
    batch = Batch(
        items=[
            BatchItem(
                features=torch.from_numpy(r.features),
                caption=TokenSequence(ids=r.caption_ids),
                tags=r.tags,
            )
            for r in records
        ]
    )
    with torch.no_grad():
        per_token = loss_aac(model, batch).item()
        hits = 0
        for rec, item in zip(well.records, batch.items):
            decoded = generate_caption(model, item.features, "greedy")
            hits += decoded.text() == rec.caption

    print(f"trained {args.epochs} epochs in {elapsed:.1f}s")
    print(f"per-token loss: {per_token:.4f}")
    print(f"greedy exact matches: {hits}/{len(records)}")


if __name__ == "__main__":
    main()
