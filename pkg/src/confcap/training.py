"""Deterministic, resumable training loops and checkpoint plumbing.

Every random draw (batch order, pair subsets, noise) comes from a generator
seeded by (run seed, purpose, stage, epoch or global step), never from global
RNG state. Together with exact optimizer-state checkpointing this makes a
resumed run bit-identical to an uninterrupted one: the only trainer state is
(parameters, optimizer moments, global step), all of which the partial
checkpoint carries.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import tensorio
from .captioner import CaptionModelConfig, CaptionScorer
from .config import StageSettings
from .generator import GeneratorConfig, QualityDiffusion
from .objectives import Batch, BatchItem, DPOConfig, PairItem, loss_stage
from .rng import numpy_rng, torch_generator


# ---------------------------------------------------------------------------
# Checkpoints


def _module_tensors(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def _optimizer_tensors(opt: torch.optim.Adam) -> tuple[dict[str, np.ndarray], dict]:
    tensors: dict[str, np.ndarray] = {}
    steps: dict[str, float] = {}
    for idx, st in opt.state_dict()["state"].items():
        for key in ("exp_avg", "exp_avg_sq"):
            tensors[f"optim/{idx}/{key}"] = st[key].cpu().numpy().astype(np.float32)
        steps[str(idx)] = float(st["step"])
    return tensors, steps


def save_checkpoint(
    path,
    model: torch.nn.Module,
    *,
    kind: str,
    stage: str,
    params: dict,
    counters: dict | None = None,
    optimizer: torch.optim.Adam | None = None,
) -> None:
    tensors = {f"model/{k}": v for k, v in _module_tensors(model).items()}
    meta = {"kind": kind, "stage": stage, "params": params, "counters": counters or {}}
    if optimizer is not None:
        opt_tensors, steps = _optimizer_tensors(optimizer)
        tensors.update(opt_tensors)
        meta["optim_steps"] = steps
    tensorio.save_archive(path, tensors, meta)


def _load_into(module: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    state = {
        k[len("model/") :]: torch.from_numpy(v.copy())
        for k, v in tensors.items()
        if k.startswith("model/")
    }
    module.load_state_dict(state, strict=True)


def _restore_optimizer(opt: torch.optim.Adam, tensors: dict, meta: dict) -> None:
    if "optim_steps" not in meta:
        return
    state: dict[int, dict] = {}
    for key, step in meta["optim_steps"].items():
        idx = int(key)
        state[idx] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(tensors[f"optim/{idx}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(tensors[f"optim/{idx}/exp_avg_sq"].copy()),
        }
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)


def load_captioner(path) -> tuple[CaptionScorer, dict]:
    """Rebuild a caption model from a checkpoint archive."""
    tensors, meta = tensorio.load_archive(path)
    if meta.get("kind") != "captioner":
        raise ValueError(f"{path}: not a caption-model checkpoint")
    model = CaptionScorer(CaptionModelConfig(**meta["params"]))
    _load_into(model, tensors)
    model.eval()
    return model, meta


def load_generator(path) -> tuple[QualityDiffusion, dict]:
    tensors, meta = tensorio.load_archive(path)
    if meta.get("kind") != "generator":
        raise ValueError(f"{path}: not a generator checkpoint")
    gen = QualityDiffusion(GeneratorConfig(**meta["params"]))
    _load_into(gen, tensors)
    gen.eval()
    return gen, meta


def module_fingerprint(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().astype(np.float32).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Caption-model trainer


@dataclass
class TrainRecord:
    features: torch.Tensor
    caption_ids: tuple[int, ...]
    tags: frozenset[int] | None


def _batch_slices(n: int, batch_size: int) -> list[list[int]]:
    """Index chunks of (up to) batch_size; a trailing singleton borrows one."""
    bounds = list(range(0, n, batch_size)) + [n]
    chunks = [list(range(bounds[i], bounds[i + 1])) for i in range(len(bounds) - 1)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-1].insert(0, chunks[-2].pop())
    return chunks


def _make_batch(items, perm, idxs) -> Batch:
    from .tokenizer import TokenSequence

    picked = [items[perm[i]] for i in idxs]
    return Batch(
        items=[
            BatchItem(
                features=it.features,
                caption=TokenSequence(ids=it.caption_ids),
                tags=it.tags,
            )
            for it in picked
        ]
    )


def train_captioner(
    model: CaptionScorer,
    items: list[TrainRecord],
    schedule: StageSettings,
    *,
    seed: int,
    stage: int,
    stage_tag: str,
    final_path,
    pairs: list[PairItem] | None = None,
    reference: CaptionScorer | None = None,
    dpo: DPOConfig | None = None,
    resume: bool = True,
    stop_after_step: int | None = None,
    log=None,
) -> bool:
    """Train in place; returns True when the stage ran to completion.

    Writes ``<final_path>.partial`` at every epoch end (plus every
    ``checkpoint_every`` steps when set) and ``final_path`` on completion.
    ``stop_after_step`` halts after that many global steps for resume tests.
    """
    final_path = Path(final_path)
    partial_path = final_path.with_suffix(".partial")
    n = len(items)
    if n < 2:
        raise ValueError("training needs at least 2 records")
    spe = len(_batch_slices(n, schedule.batch_size))
    total_steps = schedule.epochs * spe
    params_meta = dataclasses.asdict(model.cfg)
    opt = torch.optim.Adam(model.parameters(), lr=schedule.lr)

    global_step = 0
    if resume and partial_path.exists():
        tensors, meta = tensorio.load_archive(partial_path)
        _load_into(model, tensors)
        _restore_optimizer(opt, tensors, meta)
        global_step = int(meta["counters"]["global_step"])

    ref_fingerprint = module_fingerprint(reference) if reference is not None else None
    model.train()
    start_epoch, start_off = divmod(global_step, spe)
    for epoch in range(start_epoch, schedule.epochs):
        perm = numpy_rng(seed, "perm", stage, epoch).permutation(n)
        slices = _batch_slices(n, schedule.batch_size)
        for off in range(start_off if epoch == start_epoch else 0, spe):
            batch = _make_batch(items, perm, slices[off])
            step_pairs = None
            if stage == 4:
                step_pairs = _pair_subset(pairs, schedule.batch_size, seed, global_step)
            opt.zero_grad()
            loss = loss_stage(
                model, batch, stage, pairs=step_pairs, reference=reference, dpo=dpo
            )
            loss.backward()
            opt.step()
            global_step += 1
            if (
                schedule.checkpoint_every
                and global_step % schedule.checkpoint_every == 0
                and global_step < total_steps
            ):
                _save_partial(partial_path, model, opt, stage_tag, params_meta, global_step)
            if stop_after_step is not None and global_step >= stop_after_step:
                _save_partial(partial_path, model, opt, stage_tag, params_meta, global_step)
                return False
        if log and (epoch % max(1, schedule.epochs // 10) == 0 or epoch == schedule.epochs - 1):
            log(f"[{stage_tag}] epoch {epoch + 1}/{schedule.epochs} loss {float(loss.detach()):.4f}")
        if epoch < schedule.epochs - 1:
            _save_partial(partial_path, model, opt, stage_tag, params_meta, global_step)

    if reference is not None and module_fingerprint(reference) != ref_fingerprint:
        raise RuntimeError("reference model changed during preference training")
    model.eval()
    save_checkpoint(
        final_path,
        model,
        kind="captioner",
        stage=stage_tag,
        params=params_meta,
        counters={"global_step": global_step},
    )
    partial_path.unlink(missing_ok=True)
    return True


def _pair_subset(pairs, batch_size, seed, global_step):
    if not pairs:
        return []
    k = min(batch_size, len(pairs))
    idx = numpy_rng(seed, "pair-subset", global_step).choice(len(pairs), size=k, replace=False)
    return [pairs[i] for i in sorted(idx)]


def _save_partial(path, model, opt, stage_tag, params_meta, global_step):
    save_checkpoint(
        path,
        model,
        kind="captioner",
        stage=stage_tag,
        params=params_meta,
        counters={"global_step": global_step},
        optimizer=opt,
    )


# ---------------------------------------------------------------------------
# Generator trainer


def train_generator(
    gen: QualityDiffusion,
    mels: torch.Tensor,
    captions: list,
    levels: torch.Tensor,
    *,
    vae_steps: int,
    vae_lr: float,
    ldm_steps: int,
    ldm_lr: float,
    batch_size: int,
    seed: int,
    final_path,
    resume: bool = True,
    log=None,
) -> None:
    """Two-phase generator training: VAE first, then denoiser + text encoder."""
    final_path = Path(final_path)
    partial_path = final_path.with_suffix(".partial")
    n = mels.shape[0]
    params_meta = dataclasses.asdict(gen.cfg)
    vae_params = list(gen.vae.parameters())
    ldm_params = list(gen.denoiser.parameters()) + list(gen.text.parameters())
    opt_vae = torch.optim.Adam(vae_params, lr=vae_lr)
    opt_ldm = torch.optim.Adam(ldm_params, lr=ldm_lr)

    global_step = 0
    if resume and partial_path.exists():
        tensors, meta = tensorio.load_archive(partial_path)
        _load_into(gen, tensors)
        global_step = int(meta["counters"]["global_step"])
        phase = meta["counters"]["phase"]
        if phase == "vae":
            _restore_optimizer(opt_vae, tensors, meta)
        else:
            _restore_optimizer(opt_ldm, tensors, meta)

    gen.train()
    checkpoint_every = 200
    while global_step < vae_steps + ldm_steps:
        in_vae = global_step < vae_steps
        phase = "vae" if in_vae else "ldm"
        rng = numpy_rng(seed, "gen-batch", phase, global_step)
        idx = torch.from_numpy(rng.choice(n, size=min(batch_size, n), replace=False))
        g = torch_generator(seed, "gen-noise", phase, global_step)
        if in_vae:
            opt_vae.zero_grad()
            loss, _, _ = gen.vae_loss(mels[idx], g)
            loss.backward()
            opt_vae.step()
        else:
            opt_ldm.zero_grad()
            loss = gen.diffusion_loss(
                mels[idx], [captions[int(i)] for i in idx], levels[idx], g
            )
            loss.backward()
            opt_ldm.step()
        global_step += 1
        if log and global_step % 200 == 0:
            log(
                f"[gen:{phase}] step {global_step}/{vae_steps + ldm_steps} "
                f"loss {float(loss.detach()):.5f}"
            )
        if global_step % checkpoint_every == 0 and global_step < vae_steps + ldm_steps:
            save_checkpoint(
                partial_path,
                gen,
                kind="generator",
                stage="gen",
                params=params_meta,
                counters={"global_step": global_step, "phase": phase},
                optimizer=opt_vae if in_vae else opt_ldm,
            )

    gen.eval()
    save_checkpoint(
        final_path,
        gen,
        kind="generator",
        stage="gen",
        params=params_meta,
        counters={"global_step": global_step},
    )
    partial_path.unlink(missing_ok=True)
