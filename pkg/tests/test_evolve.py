import dataclasses
import math
import statistics

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from confcap.captioner import confidence, confidence_batch, generate_caption
from confcap.corpus import CorpusRecord, Manifest, generate_toy_corpus
from confcap.evolve import (
    ConfidenceQuantizer,
    ConfidenceStats,
    PipelineError,
    PreferencePair,
    Stage,
    StageError,
    StageState,
    build_preference_pairs,
    build_quantizer,
    compute_stats,
    ensure_transition,
    filter_weak,
    initial_state,
    load_pairs,
    refine_corpus,
    save_pairs,
    score_manifest,
    threshold_keep,
)
from confcap.rng import derive_seed
from confcap.tensorio import read_matrix, write_matrix
from confcap.tokenizer import TokenSequence

from conftest import make_model, seq_for


@pytest.fixture
def toy(tmp_path):
    well, weak = generate_toy_corpus(21, 4, 6, out_dir=tmp_path)
    return well, weak


def test_stats_match_population_oracle(toy):
    model = make_model()
    well, _ = toy
    stats = compute_stats(model, well)
    scores = score_manifest(model, well)
    singles = [
        confidence(model, read_matrix(well.resolve_features(r)), TokenSequence.from_caption(r.caption))
        for r in well.records
    ]
    assert scores == pytest.approx(singles, abs=1e-5)
    assert stats.n == len(well) and stats.split == "train"
    assert stats.mean == pytest.approx(statistics.fmean(scores), abs=1e-12)
    assert stats.std == pytest.approx(statistics.pstdev(scores), abs=1e-12)


def test_stats_worked_examples():
    for scores, want_mean, want_std in [
        ([0.5, 0.5], 0.5, 0.0),
        ([0.2, 0.4, 0.6], 0.4, math.sqrt(0.08 / 3)),
    ]:
        assert statistics.pstdev(scores) == pytest.approx(want_std, abs=1e-12)
        assert statistics.fmean(scores) == pytest.approx(want_mean, abs=1e-12)
        # The filter threshold built from these stats is mean - std.
        stats = ConfidenceStats(mean=want_mean, std=want_std, n=len(scores))
        keep = threshold_keep(scores, stats)
        assert keep == [s > want_mean - want_std for s in scores]


def test_stats_need_two_records(toy):
    model = make_model()
    well, _ = toy
    single = dataclasses.replace(well, records=well.records[:1])
    with pytest.raises(PipelineError, match="at least 2"):
        compute_stats(model, single)


def test_threshold_is_strict():
    # mean - std is exactly 0.5 in binary floating point.
    stats = ConfidenceStats(mean=0.75, std=0.25, n=10)
    assert threshold_keep([0.9, 0.5, 0.5000001, 0.49], stats) == [True, False, True, False]


def test_zero_spread_sends_everything_low(tmp_path):
    """All-equal scores give std 0 and a strict cut at the mean: nothing passes."""
    model = make_model()
    write_matrix(tmp_path / "features" / "same.bin", np.zeros((32, 32), np.float32))
    records = [
        CorpusRecord(
            id=f"r{i}", features_path="features/same.bin",
            caption="a dog barks", source="weak_labeled",
        )
        for i in range(3)
    ]
    m = Manifest(records=records, split="train", stage_provenance="t", base_dir=tmp_path)
    stats = compute_stats(model, m)
    assert stats.std == 0.0
    high, low = filter_weak(model, m, stats)
    assert len(high) == 0 and len(low) == 3
    assert all(r.confidence == pytest.approx(stats.mean) for r in low.records)
    assert low.stage_provenance == "stage2-filter:low"


def test_filter_partitions_and_attaches_scores(toy):
    model = make_model()
    well, weak = toy
    stats = compute_stats(model, well)
    scores = score_manifest(model, weak)
    high, low = filter_weak(model, weak, stats)
    assert len(high) + len(low) == len(weak)
    assert {r.id for r in high.records}.isdisjoint(r.id for r in low.records)
    by_id = {r.id: s for r, s in zip(weak.records, scores)}
    cut = stats.mean - stats.std
    for r in high.records:
        assert r.confidence == pytest.approx(by_id[r.id]) and r.confidence > cut
    for r in low.records:
        assert r.confidence == pytest.approx(by_id[r.id]) and r.confidence <= cut


def test_gaussian_keep_fraction_matches_normal_cdf():
    rng = np.random.default_rng(8)
    scores = rng.normal(0.3, 0.11, size=10_000)
    stats = ConfidenceStats(mean=0.3, std=0.11, n=scores.size)
    frac = np.mean(threshold_keep(scores.tolist(), stats))
    phi_1 = 0.8413447460685429
    assert abs(frac - phi_1) < 0.02


def test_score_manifest_batching_invariant(toy):
    model = make_model()
    well, _ = toy
    a = score_manifest(model, well, batch_size=2)
    b = score_manifest(model, well, batch_size=32)
    assert a == pytest.approx(b, abs=1e-5)


def test_pairs_match_brute_force_rerank(toy):
    """Independently rebuild candidates, re-rank, and require identical pairs."""
    model = make_model()
    _, weak = toy
    manifest = dataclasses.replace(weak, records=weak.records[:3])
    stats = ConfidenceStats(mean=0.0, std=1e-4, n=4)
    got = build_preference_pairs(model, manifest, n_candidates=5, stats=stats, seed=3)

    want = []
    for rec in manifest.records:
        feats = read_matrix(manifest.resolve_features(rec))
        cands = [TokenSequence.from_caption(rec.caption)]
        for k in range(5):
            cands.append(
                generate_caption(model, feats, "nucleus", seed=derive_seed(3, rec.id, "cand", k))
            )
        scores = confidence_batch(model, [feats] * len(cands), cands)
        ranked = sorted(range(len(cands)), key=lambda i: (-scores[i], i))
        seen = set()
        for w in ranked[:2]:
            for lo in ranked[-2:]:
                if w == lo or cands[w].ids == cands[lo].ids:
                    continue
                if not (scores[w] > scores[lo] and scores[w] - scores[lo] >= 2.0 * stats.std):
                    continue
                if (cands[w].ids, cands[lo].ids) in seen:
                    continue
                seen.add((cands[w].ids, cands[lo].ids))
                want.append(PreferencePair(rec.id, cands[w], cands[lo], scores[w], scores[lo]))
    assert got == want
    assert got, "expected at least one pair from an untrained model"
    for p in got:
        assert p.conf_w > p.conf_l
        assert p.conf_w - p.conf_l >= 2.0 * stats.std


def test_wide_margin_filters_all_pairs(toy):
    model = make_model()
    _, weak = toy
    manifest = dataclasses.replace(weak, records=weak.records[:2])
    # Confidence is cosine-bounded, so a 2-sigma margin of 4 is unreachable.
    stats = ConfidenceStats(mean=0.0, std=2.0, n=4)
    assert build_preference_pairs(model, manifest, stats=stats, seed=3) == []


def test_pairs_reject_few_candidates(toy):
    model = make_model()
    _, weak = toy
    with pytest.raises(ValueError, match="at least 3"):
        build_preference_pairs(
            model, weak, n_candidates=2, stats=ConfidenceStats(0.0, 1.0, 2), seed=0
        )


def test_pairs_save_load_roundtrip(tmp_path):
    pairs = [
        PreferencePair("weak-0001", seq_for([0, 4]), seq_for([9]), 0.25, -0.125),
        PreferencePair("weak-0002", seq_for([3]), seq_for([7, 1]), 0.5, 0.0),
    ]
    path = tmp_path / "pairs.jsonl"
    save_pairs(pairs, path)
    assert load_pairs(path) == pairs
    header = path.read_text().splitlines()[0]
    assert "preference_pairs" in header
    with pytest.raises(PipelineError, match="not found"):
        load_pairs(tmp_path / "missing.jsonl")


def test_refine_keeps_the_better_caption(toy):
    model = make_model()
    well, weak = toy
    refined = refine_corpus(model, weak)
    assert refined.stage_provenance == "stage-refine"
    assert len(refined) == len(weak)
    for old, new in zip(weak.records, refined.records):
        arr = read_matrix(weak.resolve_features(old))
        orig = TokenSequence.from_caption(old.caption)
        syn = generate_caption(model, arr, "beam", beam_size=3)
        c_orig, c_syn = confidence_batch(model, [arr, arr], [orig, syn])
        assert new.confidence == pytest.approx(max(c_orig, c_syn), abs=1e-6)
        if new.caption != old.caption:
            assert new.source == "synthetic_caption"
            assert c_syn > c_orig
            assert new.caption == syn.text()
        else:
            # Ties and losses keep the original caption and source.
            assert new.source == old.source
            assert c_syn <= c_orig or syn.text() == old.caption


def test_quantizer_levels_and_boundaries():
    q = ConfidenceQuantizer(boundaries=(0.2, 0.4, 0.6, 0.8))
    # A boundary value belongs to the bucket below it.
    assert [q.level(s) for s in (0.1, 0.2, 0.3, 0.4, 0.5, 0.8, 0.9)] == [0, 0, 1, 1, 2, 3, 4]
    assert q.level(-5.0) == 0 and q.level(5.0) == 4


@given(
    s1=st.floats(-1, 1, allow_nan=False),
    s2=st.floats(-1, 1, allow_nan=False),
)
def test_quantizer_monotone(s1, s2):
    q = ConfidenceQuantizer(boundaries=(-0.5, 0.0, 0.25, 0.75))
    lo, hi = sorted([s1, s2])
    assert q.level(lo) <= q.level(hi)


def test_quantizer_rejects_bad_boundaries():
    with pytest.raises(ValueError, match="ascending"):
        ConfidenceQuantizer(boundaries=(0.4, 0.2, 0.6, 0.8))
    with pytest.raises(ValueError, match="ascending"):
        ConfidenceQuantizer(boundaries=(0.2, 0.2, 0.6, 0.8))


def quantizer_manifest(scores) -> Manifest:
    records = [
        CorpusRecord(
            id=f"r{i}", features_path="x.bin", caption="a dog barks",
            source="synthetic_caption", confidence=float(s),
        )
        for i, s in enumerate(scores)
    ]
    return Manifest(records=records, split="train", stage_provenance="t")


def test_build_quantizer_balances_levels():
    rng = np.random.default_rng(4)
    scores = rng.uniform(-1, 1, size=100)
    q = build_quantizer(quantizer_manifest(scores))
    counts = np.bincount([q.level(s) for s in scores], minlength=5)
    assert counts.sum() == 100
    for c in counts:
        assert 15 <= c <= 25  # 20% per level with 5-point slack


def test_build_quantizer_validations():
    with pytest.raises(PipelineError, match="refine first"):
        records = quantizer_manifest([0.1, 0.2, 0.3, 0.4, 0.5]).records
        broken = dataclasses.replace(records[2], confidence=None)
        m = Manifest(
            records=records[:2] + [broken] + records[3:], split="train", stage_provenance="t"
        )
        build_quantizer(m)
    with pytest.raises(PipelineError, match="5 distinct"):
        build_quantizer(quantizer_manifest([0.1, 0.1, 0.2, 0.2, 0.3, 0.3]))


def test_stage_chain_walks_in_order():
    state = initial_state()
    assert state.completed is None and state.next_stage is Stage.S1
    for stage in (Stage.S1, Stage.S2, Stage.S3, Stage.S4, Stage.REFINE, Stage.GEN_TRAIN):
        state = state.advance(stage)
        assert state.completed is stage
    assert state.next_stage is None


def test_illegal_transitions_name_both_ends():
    with pytest.raises(StageError, match=r"\(start\) -> S3"):
        ensure_transition(None, Stage.S3)
    with pytest.raises(StageError, match="S1 -> S1"):
        ensure_transition(Stage.S1, Stage.S1)
    with pytest.raises(StageError, match="S4 -> S2"):
        ensure_transition(Stage.S4, Stage.S2)
    state = initial_state().advance(Stage.S1)
    with pytest.raises(StageError):
        state.advance(Stage.S4)


def test_advance_copies_manifest_map():
    state = initial_state()
    advanced = state.advance(Stage.S1)
    advanced.manifests["well"] = "somewhere"
    assert "well" not in state.manifests
