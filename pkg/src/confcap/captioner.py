"""Caption model: learnable queries over audio features with a shared text
stack, four attention-mask modes, autoregressive decoding, and a cosine
confidence score.

One transformer trunk serves four tasks, distinguished only by how attention
is masked:

- matching (ATM): queries and text attend to each other bidirectionally;
- contrastive (ATC): queries and text are encoded in isolation, block
  diagonal masking, similarity is taken between the two encodings;
- event classification (AEC): queries only, no text at all;
- causal captioning (AAC): text token t attends to every encoded query plus
  text positions <= t.

The block-diagonal modes are implemented as separate single-segment passes,
which is exactly what the block-diagonal mask computes; the joint path with
an explicit mask is kept for the matching mode and for equivalence checks.
For decoding, the encoded query set acts as a static memory every text block
attends to. Confidence is the maximum over queries of the cosine between a
shared linear projection of each query and of the CLS text state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn

from .layers import FeedForward, MultiHeadAttention, sinusoidal_table
from .tokenizer import (
    BOS,
    CLS,
    EOS,
    MAX_CAPTION_TOKENS,
    MAX_SEQUENCE_LEN,
    PAD,
    UNK,
    VOCAB_SIZE,
    TokenSequence,
)


class MaskMode(Enum):
    ATM = "atm"
    ATC = "atc"
    AEC = "aec"
    AAC = "aac"


@dataclass
class CaptionModelConfig:
    n_queries: int = 8
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = VOCAB_SIZE
    d_proj: int = 32
    d_ff: int = 128
    n_events: int = 16
    d_audio: int = 32
    max_text_len: int = MAX_SEQUENCE_LEN
    max_audio_len: int = 128
    temperature_init: float = 0.07

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.temperature_init <= 0:
            raise ValueError("temperature_init must be positive")


class _Block(nn.Module):
    """Shared self-attention, query-only cross-attention, per-segment FFNs."""

    def __init__(self, cfg: CaptionModelConfig):
        super().__init__()
        d = cfg.d_model
        self.ln_attn = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.n_heads)
        self.ln_cross = nn.LayerNorm(d)
        self.cross = MultiHeadAttention(d, cfg.n_heads)
        self.ln_ffn_q = nn.LayerNorm(d)
        self.ffn_q = FeedForward(d, cfg.d_ff)
        self.ln_ffn_t = nn.LayerNorm(d)
        self.ffn_t = FeedForward(d, cfg.d_ff)


def build_mask(mode: MaskMode, n_queries: int, text_len: int) -> torch.Tensor:
    """Boolean attention pattern [S, S] over [queries | text], True = attend."""
    s = n_queries + text_len
    q_idx = torch.arange(s) < n_queries
    mask = torch.zeros(s, s, dtype=torch.bool)
    if mode is MaskMode.ATM:
        mask[:] = True
    elif mode in (MaskMode.ATC, MaskMode.AEC):
        mask[q_idx[:, None] & q_idx[None, :]] = True
        mask[~q_idx[:, None] & ~q_idx[None, :]] = True
    elif mode is MaskMode.AAC:
        mask[q_idx[:, None] & q_idx[None, :]] = True
        mask[~q_idx[:, None] & q_idx[None, :]] = True
        pos = torch.arange(text_len)
        causal = pos[:, None] >= pos[None, :]
        mask[n_queries:, n_queries:] = causal
    return mask


class CaptionScorer(nn.Module):
    def __init__(self, cfg: CaptionModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.query_table = nn.Parameter(torch.empty(cfg.n_queries, d).normal_(std=0.02))
        self.audio_in = nn.Linear(cfg.d_audio, d)
        self.ln_audio = nn.LayerNorm(d)
        self.register_buffer(
            "audio_pos", sinusoidal_table(cfg.max_audio_len, d), persistent=False
        )
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        self.pos_emb = nn.Embedding(cfg.max_text_len, d)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.ln_out_q = nn.LayerNorm(d)
        self.ln_out_t = nn.LayerNorm(d)
        self.atm_head = nn.Linear(d, 2)
        self.aec_head = nn.Sequential(
            nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d), nn.ReLU(), nn.Linear(d, cfg.n_events)
        )
        self.sim_proj = nn.Linear(d, cfg.d_proj, bias=False)
        self.lm_head = nn.Linear(d, cfg.vocab_size)
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.temperature_init)))

    # -- input plumbing ----------------------------------------------------

    @property
    def dtype(self) -> torch.dtype:
        return self.query_table.dtype

    def as_features(self, feats) -> torch.Tensor:
        """Coerce one [T, d_audio] feature matrix or a [B, T, d_audio] batch."""
        x = torch.as_tensor(feats, dtype=self.dtype)
        if x.dim() == 2:
            x = x.unsqueeze(0)
        if x.dim() != 3 or x.shape[-1] != self.cfg.d_audio:
            raise ValueError(f"features must be [T, {self.cfg.d_audio}], got {tuple(x.shape)}")
        if x.shape[1] > self.cfg.max_audio_len:
            raise ValueError(f"clip of {x.shape[1]} frames exceeds {self.cfg.max_audio_len}")
        return x

    def _audio_states(self, feats: torch.Tensor) -> torch.Tensor:
        h = self.audio_in(feats) + self.audio_pos[: feats.shape[1]]
        return self.ln_audio(h)

    # -- trunk passes --------------------------------------------------------

    def encode_audio(self, feats, audio_valid: torch.Tensor | None = None) -> torch.Tensor:
        """Queries after the full stack, text-free: [B, n_queries, d_model].

        ``audio_valid`` [B, T] marks real frames; padded frames are excluded
        from cross-attention, so their content cannot reach the queries.
        """
        raw = torch.as_tensor(feats, dtype=self.dtype)
        squeeze = raw.dim() == 2
        feats = self.as_features(raw)
        b, t, _ = feats.shape
        audio_h = self._audio_states(feats)
        cross_mask = None
        if audio_valid is not None:
            cross_mask = audio_valid[:, None, :].expand(b, self.cfg.n_queries, t)
        q = self.query_table.unsqueeze(0).expand(b, -1, -1)
        for blk in self.blocks:
            ln_q = blk.ln_attn(q)
            q = q + blk.attn(ln_q, ln_q)
            q = q + blk.cross(blk.ln_cross(q), audio_h, cross_mask)
            q = q + blk.ffn_q(blk.ln_ffn_q(q))
        q = self.ln_out_q(q)
        return q.squeeze(0) if squeeze else q

    def encode_text(
        self,
        ids: torch.Tensor,
        text_valid: torch.Tensor | None = None,
        *,
        causal: bool = False,
        memory: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Text stack [B, L, d_model]; bidirectional by default.

        With ``memory`` (an encoded query set [B, n_q, d]) every text position
        additionally attends to all memory slots, which together with
        ``causal=True`` realizes the captioning mask.
        """
        b, length = ids.shape
        if length > self.cfg.max_text_len:
            raise ValueError(f"text of {length} tokens exceeds {self.cfg.max_text_len}")
        pos = torch.arange(length, device=ids.device)
        t = self.tok_emb(ids) + self.pos_emb(pos)
        key_ok = (
            text_valid
            if text_valid is not None
            else torch.ones(b, length, dtype=torch.bool, device=ids.device)
        )
        mask = key_ok[:, None, :].expand(b, length, length)
        if causal:
            causal_mask = pos[:, None] >= pos[None, :]
            mask = mask & causal_mask
        # Padded rows keep a self-edge so softmax stays finite; their output
        # is never read and they are already excluded as keys.
        eye = torch.eye(length, dtype=torch.bool, device=ids.device)
        mask = mask | eye
        if memory is not None:
            mem_mask = torch.ones(
                b, length, memory.shape[1], dtype=torch.bool, device=ids.device
            )
            mask = torch.cat([mem_mask, mask], dim=-1)
        for blk in self.blocks:
            ln_t = blk.ln_attn(t)
            kv = ln_t if memory is None else torch.cat([blk.ln_attn(memory), ln_t], dim=1)
            t = t + blk.attn(ln_t, kv, mask)
            t = t + blk.ffn_t(blk.ln_ffn_t(t))
        return self.ln_out_t(t)

    def joint_forward(
        self,
        feats,
        ids: torch.Tensor,
        text_valid: torch.Tensor | None = None,
        audio_valid: torch.Tensor | None = None,
        mode: MaskMode = MaskMode.ATM,
        mask_override: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Evolve queries and text together under one attention pattern.

        Used for the matching task and for mask-equivalence checks via
        ``mask_override`` (an [S, S] boolean pattern).
        """
        feats = self.as_features(feats)
        b, t_frames, _ = feats.shape
        nq, length = self.cfg.n_queries, ids.shape[1]
        audio_h = self._audio_states(feats)
        cross_mask = None
        if audio_valid is not None:
            cross_mask = audio_valid[:, None, :].expand(b, nq, t_frames)
        pattern = mask_override if mask_override is not None else build_mask(mode, nq, length)
        pattern = pattern.to(ids.device)
        key_ok = torch.ones(b, nq + length, dtype=torch.bool, device=ids.device)
        if text_valid is not None:
            key_ok[:, nq:] = text_valid
        mask = pattern.unsqueeze(0) & key_ok[:, None, :]
        eye = torch.eye(nq + length, dtype=torch.bool, device=ids.device)
        mask = mask | eye
        pos = torch.arange(length, device=ids.device)
        q = self.query_table.unsqueeze(0).expand(b, -1, -1)
        t = self.tok_emb(ids) + self.pos_emb(pos)
        for blk in self.blocks:
            h = torch.cat([q, t], dim=1)
            ln_h = blk.ln_attn(h)
            out = blk.attn(ln_h, ln_h, mask)
            q = q + out[:, :nq]
            t = t + out[:, nq:]
            q = q + blk.cross(blk.ln_cross(q), audio_h, cross_mask)
            q = q + blk.ffn_q(blk.ln_ffn_q(q))
            t = t + blk.ffn_t(blk.ln_ffn_t(t))
        return self.ln_out_q(q), self.ln_out_t(t)

    # -- heads ---------------------------------------------------------------

    def atm_logits(
        self,
        feats,
        ids: torch.Tensor,
        text_valid: torch.Tensor | None = None,
        audio_valid: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Match/no-match logits [B, 2], mean-pooled over per-query logits."""
        q, _ = self.joint_forward(feats, ids, text_valid, audio_valid, mode=MaskMode.ATM)
        return self.atm_head(q).mean(dim=1)

    def aec_logits(self, feats, audio_valid: torch.Tensor | None = None) -> torch.Tensor:
        """Per-event presence logits [B, n_events] from pooled queries."""
        q = self.encode_audio(self.as_features(feats), audio_valid)
        return self.aec_head(q.mean(dim=1))

    def project(self, x: torch.Tensor) -> torch.Tensor:
        """Shared similarity projection, unit-normalized; rejects zero norms."""
        p = self.sim_proj(x)
        n = p.norm(dim=-1, keepdim=True)
        if bool((n < 1e-12).any()):
            raise ValueError("zero-norm projected vector; similarity undefined")
        return p / n

    def similarity_matrix(self, queries: torch.Tensor, cls_states: torch.Tensor) -> torch.Tensor:
        """Max-over-queries cosine similarity [B_audio, B_text]."""
        qp = self.project(queries)
        tp = self.project(cls_states)
        return torch.einsum("aqd,bd->aqb", qp, tp).max(dim=1).values

    def tau(self) -> torch.Tensor:
        # Positive by construction; floor keeps contrastive logits bounded.
        return self.log_tau.exp().clamp_min(0.01)

    # -- decoding -------------------------------------------------------------

    def decode_logits(
        self,
        queries: torch.Tensor,
        dec_ids: torch.Tensor,
        text_valid: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Teacher-forced next-token logits [B, L, vocab] under the causal mask."""
        states = self.encode_text(dec_ids, text_valid, causal=True, memory=queries)
        return self.lm_head(states)

    def decode_step(self, queries: torch.Tensor, prefix: TokenSequence) -> torch.Tensor:
        """Logits [vocab] for the continuation of ``prefix`` (BOS-led)."""
        if len(prefix.ids) > MAX_SEQUENCE_LEN - 1:
            raise ValueError(f"prefix of {len(prefix.ids)} tokens leaves no room to decode")
        if queries.dim() == 2:
            queries = queries.unsqueeze(0)
        ids = torch.tensor([prefix.ids], dtype=torch.long)
        return self.decode_logits(queries, ids)[0, -1]


# ---------------------------------------------------------------------------
# Sequence-level helpers


def pad_id_batch(seqs: list[tuple[int, ...]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad id tuples with PAD; returns (ids [B, L], valid [B, L])."""
    length = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), length), PAD, dtype=torch.long)
    valid = torch.zeros(len(seqs), length, dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        valid[i, : len(s)] = True
    return ids, valid


def pad_feature_batch(
    feats: list[torch.Tensor], dtype: torch.dtype
) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad feature matrices with zero frames; returns (batch, valid)."""
    tensors = [torch.as_tensor(f, dtype=dtype) for f in feats]
    t_max = max(f.shape[0] for f in tensors)
    batch = torch.zeros(len(tensors), t_max, tensors[0].shape[1], dtype=dtype)
    valid = torch.zeros(len(tensors), t_max, dtype=torch.bool)
    for i, f in enumerate(tensors):
        batch[i, : f.shape[0]] = f
        valid[i, : f.shape[0]] = True
    return batch, valid


def cls_states(model: CaptionScorer, captions: list[TokenSequence]) -> torch.Tensor:
    """CLS text embedding [B, d_model] for a batch of captions."""
    ids, valid = pad_id_batch([c.encoder_ids() for c in captions])
    return model.encode_text(ids, valid)[:, 0]


_GENERATION_BANNED = (PAD, BOS, CLS, UNK)


@torch.no_grad()
def generate_caption(
    model: CaptionScorer,
    feats,
    mode: str = "greedy",
    *,
    seed: int | None = None,
    beam_size: int = 3,
    top_p: float = 0.9,
    temperature: float = 1.0,
) -> TokenSequence:
    """Decode one caption; terminates at EOS or after 24 words.

    Reserved ids other than EOS are excluded from every step. ``seed`` is
    required for nucleus sampling and ignored otherwise.
    """
    queries = model.encode_audio(model.as_features(feats))
    if mode == "greedy":
        return _beam_decode(model, queries, 1)
    if mode == "beam":
        return _beam_decode(model, queries, beam_size)
    if mode == "nucleus":
        if seed is None:
            raise ValueError("nucleus sampling needs a seed")
        return _nucleus_decode(model, queries, top_p, temperature, seed)
    raise ValueError(f"unknown decode mode {mode!r}")


def _step_logits(model: CaptionScorer, queries: torch.Tensor, prefixes) -> torch.Tensor:
    ids, valid = pad_id_batch(prefixes)
    q = queries.expand(len(prefixes), -1, -1)
    logits = model.decode_logits(q, ids, valid)
    last = torch.tensor([len(p) - 1 for p in prefixes])
    out = logits[torch.arange(len(prefixes)), last]
    out[:, list(_GENERATION_BANNED)] = float("-inf")
    return out


def _beam_decode(model: CaptionScorer, queries: torch.Tensor, beam_size: int) -> TokenSequence:
    """Sum-logprob beam search, no length normalization; beam_size 1 is greedy."""
    if queries.dim() == 2:
        queries = queries.unsqueeze(0)
    beams: list[tuple[tuple[int, ...], float, bool]] = [((BOS,), 0.0, False)]
    for _ in range(MAX_CAPTION_TOKENS):
        live = [b for b in beams if not b[2]]
        if not live:
            break
        logits = _step_logits(model, queries, [b[0] for b in live])
        logp = torch.log_softmax(logits, dim=-1)
        top = torch.topk(logp, k=beam_size, dim=-1)
        candidates = [b for b in beams if b[2]]
        for (prefix, score, _), vals, idxs in zip(live, top.values, top.indices):
            for v, tok in zip(vals.tolist(), idxs.tolist()):
                seq = prefix + (tok,)
                # Word count is len(seq) - 1 (leading BOS, EOS not yet present).
                done = tok == EOS or len(seq) - 1 == MAX_CAPTION_TOKENS
                candidates.append((seq, score + v, done))
        # Ties broken by token ids so decoding is deterministic.
        candidates.sort(key=lambda b: (-b[1], b[0]))
        beams = candidates[:beam_size]
        if all(b[2] for b in beams):
            break
    return TokenSequence(ids=beams[0][0])


def _nucleus_decode(
    model: CaptionScorer, queries: torch.Tensor, top_p: float, temperature: float, seed: int
) -> TokenSequence:
    if queries.dim() == 2:
        queries = queries.unsqueeze(0)
    g = torch.Generator()
    g.manual_seed(seed)
    prefix: tuple[int, ...] = (BOS,)
    for _ in range(MAX_CAPTION_TOKENS):
        logits = _step_logits(model, queries, [prefix])[0]
        probs = torch.softmax(logits / temperature, dim=-1)
        sorted_probs, sorted_idx = torch.sort(probs, descending=True, stable=True)
        cum = torch.cumsum(sorted_probs, dim=0)
        keep = cum - sorted_probs < top_p  # smallest prefix reaching top_p
        kept = sorted_probs * keep
        kept = kept / kept.sum()
        choice = torch.multinomial(kept, 1, generator=g).item()
        tok = int(sorted_idx[choice])
        prefix = prefix + (tok,)
        if tok == EOS:
            break
    return TokenSequence(ids=prefix)


@torch.no_grad()
def confidence(model: CaptionScorer, feats, caption: TokenSequence) -> float:
    """Cosine confidence in [-1, 1] that ``caption`` describes the clip."""
    return confidence_batch(model, [feats], [caption])[0]


@torch.no_grad()
def confidence_batch(model: CaptionScorer, feats: list, captions: list[TokenSequence]) -> list[float]:
    batch, valid = pad_feature_batch(feats, model.dtype)
    queries = model.encode_audio(batch, valid)
    cls = cls_states(model, captions)
    qp = model.project(queries)
    tp = model.project(cls)
    sims = torch.einsum("bqd,bd->bq", qp, tp).max(dim=1).values
    return [float(s) for s in sims]
