import numpy as np
import pytest
import torch

from confcap.captioner import (
    CaptionModelConfig,
    CaptionScorer,
    MaskMode,
    build_mask,
    cls_states,
    confidence,
    confidence_batch,
    generate_caption,
    pad_feature_batch,
    pad_id_batch,
)
from confcap.tokenizer import (
    EOS,
    MAX_CAPTION_TOKENS,
    VOCAB_SIZE,
    TokenSequence,
    caption_for_events,
)

from conftest import make_model, rand_feats, seq_for


def test_mask_atm_all_attend():
    assert build_mask(MaskMode.ATM, 2, 3).all()


@pytest.mark.parametrize("mode", [MaskMode.ATC, MaskMode.AEC])
def test_mask_block_diagonal(mode):
    m = build_mask(mode, 2, 3)
    assert m[:2, :2].all() and m[2:, 2:].all()
    assert not m[:2, 2:].any() and not m[2:, :2].any()


def test_mask_aac_rows():
    m = build_mask(MaskMode.AAC, 2, 3)
    expect = torch.tensor(
        [
            [1, 1, 0, 0, 0],
            [1, 1, 0, 0, 0],
            [1, 1, 1, 0, 0],
            [1, 1, 1, 1, 0],
            [1, 1, 1, 1, 1],
        ],
        dtype=torch.bool,
    )
    assert torch.equal(m, expect)


def test_decode_is_causal(rng):
    """Perturbing tokens after position k never changes logits at or before k."""
    model = make_model()
    queries = model.encode_audio(rand_feats(rng)).unsqueeze(0)
    seq = seq_for([0, 3, 7])
    ids = torch.tensor([seq.ids], dtype=torch.long)
    base = model.decode_logits(queries, ids)
    for k in range(1, ids.shape[1] - 1):
        perturbed = ids.clone()
        perturbed[0, k + 1 :] = (perturbed[0, k + 1 :] + 7) % VOCAB_SIZE
        got = model.decode_logits(queries, perturbed)
        assert torch.equal(got[:, : k + 1], base[:, : k + 1])


def test_decode_step_matches_decode_logits(rng):
    model = make_model()
    queries = model.encode_audio(rand_feats(rng))
    prefix = TokenSequence(ids=tuple(seq_for([2, 5]).ids[:-1]))  # drop EOS
    step = model.decode_step(queries, prefix)
    ids = torch.tensor([prefix.ids], dtype=torch.long)
    full = model.decode_logits(queries.unsqueeze(0), ids)
    assert torch.equal(step, full[0, -1])


def test_decode_step_rejects_full_prefix(rng):
    model = make_model()
    queries = model.encode_audio(rand_feats(rng))
    words = caption_for_events([0, 1, 2, 3, 4, 5]).split()  # 23 words
    padded = words + ["a"] * (MAX_CAPTION_TOKENS - len(words))
    seq = TokenSequence.from_caption(" ".join(padded))
    assert len(seq.ids) == MAX_CAPTION_TOKENS + 2
    with pytest.raises(ValueError, match="no room"):
        model.decode_step(queries, seq)


def test_block_diagonal_isolates_text_from_audio(rng):
    """Under the matching-off mask, swapping the clip leaves text states bitwise intact."""
    model = make_model()
    ids = torch.tensor([seq_for([1, 4]).encoder_ids()], dtype=torch.long)
    _, t_a = model.joint_forward(rand_feats(rng), ids, mode=MaskMode.ATC)
    _, t_b = model.joint_forward(rand_feats(rng) * 3.0, ids, mode=MaskMode.ATC)
    assert torch.equal(t_a, t_b)


def test_block_diagonal_isolates_queries_from_text(rng):
    model = make_model()
    feats = rand_feats(rng)
    ids_a = torch.tensor([seq_for([1, 4]).encoder_ids()], dtype=torch.long)
    ids_b = torch.tensor([seq_for([9, 2]).encoder_ids()], dtype=torch.long)
    q_a, _ = model.joint_forward(feats, ids_a, mode=MaskMode.ATC)
    q_b, _ = model.joint_forward(feats, ids_b, mode=MaskMode.ATC)
    assert torch.equal(q_a, q_b)


def test_mask_override_reproduces_segment_passes(rng):
    """A block-diagonal override on the joint pass matches the separate encoders."""
    model = make_model()
    feats = rand_feats(rng)
    seq = seq_for([3, 8])
    ids = torch.tensor([seq.encoder_ids()], dtype=torch.long)
    override = build_mask(MaskMode.ATC, model.cfg.n_queries, ids.shape[1])
    q, t = model.joint_forward(feats, ids, mode=MaskMode.ATM, mask_override=override)
    q_solo = model.encode_audio(feats).unsqueeze(0)
    t_solo = model.encode_text(ids)
    assert torch.allclose(q, q_solo, atol=1e-5)
    assert torch.allclose(t, t_solo, atol=1e-5)


def test_text_padding_exact(rng):
    """Garbage ids under a False valid mask cannot leak into real positions."""
    model = make_model()
    short = seq_for([2]).encoder_ids()
    long = seq_for([5, 11, 14]).encoder_ids()
    ids, valid = pad_id_batch([short, long])
    base = model.encode_text(ids, valid)
    scrambled = ids.clone()
    scrambled[0, len(short) :] = 17
    got = model.encode_text(scrambled, valid)
    # Padded rows may move (they still see themselves); real rows must not.
    assert torch.equal(got[0, : len(short)], base[0, : len(short)])
    assert torch.equal(got[1], base[1])


def test_audio_padding_exact(rng):
    model = make_model()
    feats = [rand_feats(rng, t=10), rand_feats(rng, t=20)]
    batch, valid = pad_feature_batch(feats, model.dtype)
    base = model.encode_audio(batch, valid)
    noisy = batch.clone()
    noisy[0, 10:] = 99.0
    assert torch.equal(model.encode_audio(noisy, valid), base)


def test_audio_padding_matches_single_clip(rng):
    model = make_model()
    feats = [rand_feats(rng, t=10), rand_feats(rng, t=20)]
    batch, valid = pad_feature_batch(feats, model.dtype)
    stacked = model.encode_audio(batch, valid)
    solo = model.encode_audio(feats[0])
    assert torch.allclose(stacked[0], solo, atol=1e-5)


def test_default_shapes(rng):
    model = CaptionScorer(CaptionModelConfig())
    model.eval()
    feats = rand_feats(rng, t=12)
    assert model.encode_audio(feats).shape == (8, 64)
    batch = torch.stack([feats, feats])
    assert model.encode_audio(batch).shape == (2, 8, 64)
    ids = torch.tensor([seq_for([0]).encoder_ids()] * 2, dtype=torch.long)
    assert model.atm_logits(batch, ids).shape == (2, 2)
    assert model.aec_logits(batch).shape == (2, 16)
    queries = model.encode_audio(batch)
    logits = model.decode_logits(queries, ids)
    assert logits.shape == (2, ids.shape[1], VOCAB_SIZE)


def test_query_count_only_resizes_query_table():
    shapes8 = {n: tuple(p.shape) for n, p in make_model().named_parameters()}
    shapes16 = {n: tuple(p.shape) for n, p in make_model(n_queries=16).named_parameters()}
    assert set(shapes8) == set(shapes16)
    changed = {n for n in shapes8 if shapes8[n] != shapes16[n]}
    assert changed == {"query_table"}
    assert shapes16["query_table"][0] == 16


def test_similarity_matrix_is_max_over_queries(rng):
    model = make_model()
    feats = [rand_feats(rng), rand_feats(rng)]
    batch, valid = pad_feature_batch(feats, model.dtype)
    queries = model.encode_audio(batch, valid)
    cls = cls_states(model, [seq_for([1]), seq_for([6, 2])])
    sims = model.similarity_matrix(queries, cls)
    assert sims.shape == (2, 2)
    qp = model.project(queries)
    tp = model.project(cls)
    for a in range(2):
        for b in range(2):
            per_query = qp[a] @ tp[b]
            assert torch.isclose(sims[a, b], per_query.max())
    assert (sims <= 1.0 + 1e-6).all() and (sims >= -1.0 - 1e-6).all()


def test_project_rejects_zero_vector():
    model = make_model()
    with pytest.raises(ValueError, match="zero-norm"):
        model.project(torch.zeros(1, model.cfg.d_model))


def test_tau_positive_floor():
    model = make_model()
    assert float(model.tau().detach()) > 0
    with torch.no_grad():
        model.log_tau.fill_(-20.0)
    assert float(model.tau().detach()) == pytest.approx(0.01)


def test_as_features_validation(rng):
    model = make_model()
    with pytest.raises(ValueError, match="features"):
        model.as_features(np.zeros((4, 7), np.float32))
    with pytest.raises(ValueError, match="exceeds"):
        model.as_features(np.zeros((500, 32), np.float32))
    with pytest.raises(ValueError, match="exceeds"):
        model.encode_text(torch.zeros(1, 30, dtype=torch.long))


def test_greedy_equals_beam_one(rng):
    model = make_model()
    feats = rand_feats(rng)
    assert generate_caption(model, feats) == generate_caption(model, feats, "beam", beam_size=1)


def test_greedy_is_deterministic(rng):
    model = make_model()
    feats = rand_feats(rng)
    a = generate_caption(model, feats)
    b = generate_caption(model, feats)
    assert a == b
    assert len(a.words()) <= MAX_CAPTION_TOKENS


def test_generation_never_emits_reserved(rng):
    model = make_model(seed=5)
    for s in range(4):
        seq = generate_caption(model, rand_feats(rng), "nucleus", seed=s)
        interior = seq.ids[1:]
        assert all(t >= EOS for t in interior)


def test_nucleus_seed_contract(rng):
    model = make_model()
    feats = rand_feats(rng)
    a = generate_caption(model, feats, "nucleus", seed=11)
    b = generate_caption(model, feats, "nucleus", seed=11)
    assert a == b
    spread = {generate_caption(model, feats, "nucleus", seed=s).ids for s in range(6)}
    assert len(spread) > 1
    with pytest.raises(ValueError, match="seed"):
        generate_caption(model, feats, "nucleus")
    with pytest.raises(ValueError, match="decode mode"):
        generate_caption(model, feats, "teleport")


def test_confidence_bounds_and_spread(rng):
    model = make_model()
    feats = [rand_feats(rng) for _ in range(8)]
    caps = [seq_for([i % 16, (i + 3) % 16]) for i in range(8)]
    scores = confidence_batch(model, feats, caps)
    assert all(-1.0 <= s <= 1.0 for s in scores)
    # An untrained model must still spread scores, not collapse them.
    assert max(scores) - min(scores) > 1e-4


def test_confidence_single_matches_batch(rng):
    model = make_model()
    feats = rand_feats(rng)
    cap = seq_for([4])
    assert confidence(model, feats, cap) == pytest.approx(
        confidence_batch(model, [feats], [cap])[0], abs=1e-6
    )
