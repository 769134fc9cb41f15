"""Training objectives for the caption model.

Stage 1 and 3 optimize the unweighted sum of four losses: matching (binary
cross-entropy over positives and hardest in-batch negatives), contrastive
(symmetric InfoNCE over temperature-scaled max-query cosines), event
classification (masked multi-label BCE), and captioning (causal next-token
cross-entropy). Stage 4 adds the mean preference loss over caption pairs,
scored by the implicit reward log pi_policy(y|x) - log pi_ref(y|x) against a
frozen reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .captioner import CaptionScorer, cls_states, pad_feature_batch, pad_id_batch
from .tokenizer import PAD, TokenSequence


@dataclass
class BatchItem:
    features: torch.Tensor  # [T, d_audio] float
    caption: TokenSequence
    tags: frozenset[int] | None = None


@dataclass
class Batch:
    items: list[BatchItem]

    def __post_init__(self):
        if len(self.items) < 2:
            raise ValueError("contrastive batches need at least 2 items")

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class PairItem:
    """One preference comparison: same clip, a better and a worse caption."""

    features: torch.Tensor
    y_w: TokenSequence
    y_l: TokenSequence


@dataclass
class DPOConfig:
    beta: float = 0.05
    reference_tag: str = "stage3"


def _encode_batch(model: CaptionScorer, batch: Batch):
    feats, audio_valid = pad_feature_batch([it.features for it in batch.items], model.dtype)
    return feats, audio_valid


def _similarities(model: CaptionScorer, batch: Batch, feats, audio_valid) -> torch.Tensor:
    queries = model.encode_audio(feats, audio_valid)
    cls = cls_states(model, [it.caption for it in batch.items])
    return model.similarity_matrix(queries, cls)


def loss_atc(model: CaptionScorer, batch: Batch) -> torch.Tensor:
    """Symmetric InfoNCE; an all-equal similarity matrix gives ln B."""
    feats, audio_valid = _encode_batch(model, batch)
    sims = _similarities(model, batch, feats, audio_valid)
    logits = sims / model.tau()
    targets = torch.arange(len(batch))
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.t(), targets))


def loss_atm(model: CaptionScorer, batch: Batch) -> torch.Tensor:
    """Match BCE over B positives plus B hardest in-batch negatives.

    The negative caption for clip i is the non-matching caption with the
    highest contrastive similarity to clip i (selection is detached).
    """
    feats, audio_valid = _encode_batch(model, batch)
    with torch.no_grad():
        sims = _similarities(model, batch, feats, audio_valid)
        sims.fill_diagonal_(float("-inf"))
        hard = sims.argmax(dim=1)
    captions = [it.caption for it in batch.items]
    enc = [c.encoder_ids() for c in captions]
    neg = [enc[j] for j in hard.tolist()]
    ids, valid = pad_id_batch(enc + neg)
    feats2 = torch.cat([feats, feats], dim=0)
    valid2 = torch.cat([audio_valid, audio_valid], dim=0)
    logits = model.atm_logits(feats2, ids, valid, valid2)
    labels = torch.cat(
        [torch.ones(len(batch), dtype=torch.long), torch.zeros(len(batch), dtype=torch.long)]
    )
    return F.cross_entropy(logits, labels)


def loss_aec(model: CaptionScorer, batch: Batch) -> torch.Tensor:
    """Multi-label BCE over tagged items only; untagged items contribute zero."""
    feats, audio_valid = _encode_batch(model, batch)
    logits = model.aec_logits(feats, audio_valid)
    tagged = [i for i, it in enumerate(batch.items) if it.tags is not None]
    if not tagged:
        return logits.sum() * 0.0
    targets = torch.zeros(len(tagged), model.cfg.n_events, dtype=model.dtype)
    for row, i in enumerate(tagged):
        for t in batch.items[i].tags:
            if not 0 <= t < model.cfg.n_events:
                raise ValueError(f"tag id {t} outside 0..{model.cfg.n_events - 1}")
            targets[row, t] = 1.0
    return F.binary_cross_entropy_with_logits(logits[tagged], targets)


def loss_aac(model: CaptionScorer, batch: Batch) -> torch.Tensor:
    """Causal next-token cross-entropy, mean over non-PAD target positions."""
    feats, audio_valid = _encode_batch(model, batch)
    queries = model.encode_audio(feats, audio_valid)
    seqs = [it.caption.ids for it in batch.items]
    dec_ids, dec_valid = pad_id_batch([s[:-1] for s in seqs])
    tgt_ids, _ = pad_id_batch([s[1:] for s in seqs])
    logits = model.decode_logits(queries, dec_ids, dec_valid)
    return F.cross_entropy(
        logits.reshape(-1, model.cfg.vocab_size), tgt_ids.reshape(-1), ignore_index=PAD
    )


def sequence_log_prob(model: CaptionScorer, features, caption: TokenSequence) -> torch.Tensor:
    """Sum of token log-probabilities of the caption given the clip."""
    queries = model.encode_audio(model.as_features(features))
    ids = torch.tensor([caption.ids], dtype=torch.long)
    logits = model.decode_logits(queries, ids[:, :-1])
    logp = torch.log_softmax(logits, dim=-1)
    targets = ids[:, 1:]
    return logp.gather(-1, targets.unsqueeze(-1)).sum()


def implicit_reward(
    policy: CaptionScorer, reference: CaptionScorer, features, caption: TokenSequence
) -> torch.Tensor:
    """log pi_policy(y|x) - log pi_ref(y|x); exactly 0 when the models agree."""
    lp_policy = sequence_log_prob(policy, features, caption)
    with torch.no_grad():
        lp_ref = sequence_log_prob(reference, features, caption)
    return lp_policy - lp_ref


def loss_dpo(
    policy: CaptionScorer, reference: CaptionScorer, pair: PairItem, beta: float
) -> torch.Tensor:
    """-log sigmoid(beta * (reward_w - reward_l)); ln 2 when policy == reference."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    r_w = implicit_reward(policy, reference, pair.features, pair.y_w)
    r_l = implicit_reward(policy, reference, pair.features, pair.y_l)
    return -F.logsigmoid(beta * (r_w - r_l))


def loss_captioner(model: CaptionScorer, batch: Batch) -> torch.Tensor:
    """Unweighted sum of the four caption-model losses."""
    return loss_atm(model, batch) + loss_atc(model, batch) + loss_aec(model, batch) + loss_aac(
        model, batch
    )


def loss_stage(
    model: CaptionScorer,
    batch: Batch,
    stage: int,
    *,
    pairs: list[PairItem] | None = None,
    reference: CaptionScorer | None = None,
    dpo: DPOConfig | None = None,
) -> torch.Tensor:
    """Total objective for training stage 1, 3, or 4.

    Stages 1 and 3 reject preference pairs; stage 4 requires them (an empty
    list is allowed and contributes nothing) together with a reference model.
    """
    dpo = dpo or DPOConfig()
    if stage in (1, 3):
        if pairs is not None:
            raise ValueError(f"stage {stage} takes no preference pairs")
        return loss_captioner(model, batch)
    if stage == 4:
        if pairs is None or reference is None:
            raise ValueError("stage 4 needs preference pairs and a reference model")
        total = loss_captioner(model, batch)
        if pairs:
            dpo_terms = [loss_dpo(model, reference, p, dpo.beta) for p in pairs]
            total = total + torch.stack(dpo_terms).mean()
        return total
    raise ValueError(f"unknown training stage {stage!r}")
