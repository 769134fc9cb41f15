import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from confcap.config import StageSettings
from confcap.generator import GeneratorConfig, QualityDiffusion
from confcap.objectives import PairItem
from confcap.training import (
    TrainRecord,
    _batch_slices,
    load_captioner,
    load_generator,
    module_fingerprint,
    save_checkpoint,
    train_captioner,
    train_generator,
)

from conftest import make_model, rand_feats, seq_for


def make_records(rng, n: int) -> list[TrainRecord]:
    out = []
    for i in range(n):
        seq = seq_for([i % 16, (i + 5) % 16])
        out.append(
            TrainRecord(
                features=rand_feats(rng),
                caption_ids=seq.ids,
                tags=frozenset({i % 16}) if i % 2 == 0 else None,
            )
        )
    return out


@given(n=st.integers(1, 40), bs=st.integers(2, 9))
def test_batch_slices_partition(n, bs):
    chunks = _batch_slices(n, bs)
    flat = [i for c in chunks for i in c]
    assert sorted(flat) == list(range(n))
    assert all(chunks)
    # No chunk beyond the nominal size plus the borrowed element.
    assert all(len(c) <= bs + 1 for c in chunks)
    if len(chunks) > 1:
        assert len(chunks[-1]) >= 2


def test_checkpoint_roundtrip(tmp_path):
    model = make_model(seed=9)
    path = tmp_path / "model.ckpt"
    save_checkpoint(
        path,
        model,
        kind="captioner",
        stage="stage1",
        params={k: getattr(model.cfg, k) for k in vars(model.cfg)},
        counters={"global_step": 17},
    )
    back, meta = load_captioner(path)
    assert module_fingerprint(back) == module_fingerprint(model)
    assert meta["stage"] == "stage1"
    assert meta["counters"]["global_step"] == 17
    assert not back.training


def test_load_captioner_rejects_other_kind(tmp_path):
    model = make_model()
    path = tmp_path / "wrong.ckpt"
    save_checkpoint(path, model, kind="generator", stage="gen", params={})
    with pytest.raises(ValueError, match="not a caption-model"):
        load_captioner(path)


def test_fingerprint_tracks_parameters():
    model = make_model(seed=1)
    before = module_fingerprint(model)
    assert before == module_fingerprint(make_model(seed=1))
    with torch.no_grad():
        model.query_table[0, 0] += 1.0
    assert module_fingerprint(model) != before


def test_train_needs_two_records(rng, tmp_path):
    model = make_model()
    schedule = StageSettings(epochs=1, lr=1e-3, batch_size=2)
    with pytest.raises(ValueError, match="at least 2"):
        train_captioner(
            model,
            make_records(rng, 1),
            schedule,
            seed=0,
            stage=1,
            stage_tag="stage1",
            final_path=tmp_path / "m.ckpt",
        )


def test_interrupted_training_resumes_bitwise(rng, tmp_path):
    """Stop mid-run, resume from the partial, land on the uninterrupted result."""
    records = make_records(rng, 6)
    schedule = StageSettings(epochs=3, lr=1e-3, batch_size=2)

    straight = make_model(seed=42)
    done = train_captioner(
        straight, records, schedule, seed=5, stage=1, stage_tag="s1",
        final_path=tmp_path / "a.ckpt",
    )
    assert done

    resumed = make_model(seed=42)
    partial_run = train_captioner(
        resumed, records, schedule, seed=5, stage=1, stage_tag="s1",
        final_path=tmp_path / "b.ckpt", stop_after_step=4,
    )
    assert not partial_run
    assert (tmp_path / "b.partial").exists()
    done = train_captioner(
        resumed, records, schedule, seed=5, stage=1, stage_tag="s1",
        final_path=tmp_path / "b.ckpt",
    )
    assert done
    assert not (tmp_path / "b.partial").exists()
    assert module_fingerprint(resumed) == module_fingerprint(straight)
    assert (
        module_fingerprint(load_captioner(tmp_path / "b.ckpt")[0])
        == module_fingerprint(load_captioner(tmp_path / "a.ckpt")[0])
    )


def test_mid_epoch_checkpoints_leave_trajectory_unchanged(rng, tmp_path):
    records = make_records(rng, 6)
    quiet = StageSettings(epochs=2, lr=1e-3, batch_size=2, checkpoint_every=0)
    chatty = StageSettings(epochs=2, lr=1e-3, batch_size=2, checkpoint_every=2)
    a = make_model(seed=3)
    b = make_model(seed=3)
    train_captioner(a, records, quiet, seed=1, stage=1, stage_tag="s1", final_path=tmp_path / "q.ckpt")
    train_captioner(b, records, chatty, seed=1, stage=1, stage_tag="s1", final_path=tmp_path / "c.ckpt")
    assert module_fingerprint(a) == module_fingerprint(b)


def test_stage4_reference_mutation_raises(rng, tmp_path):
    model = make_model(seed=7)
    records = make_records(rng, 4)
    pair = PairItem(features=records[0].features, y_w=seq_for([1]), y_l=seq_for([2]))
    schedule = StageSettings(epochs=1, lr=1e-3, batch_size=2)
    # Passing the policy itself as reference guarantees the fingerprint moves.
    with pytest.raises(RuntimeError, match="reference model changed"):
        train_captioner(
            model, records, schedule, seed=0, stage=4, stage_tag="s4",
            final_path=tmp_path / "m.ckpt", pairs=[pair], reference=model,
        )


def test_generator_training_deterministic(rng, tmp_path):
    cfg = dict(base_channels=8, d_time=16, d_text=16, t_max=10, text_layers=1, text_heads=2)
    mels = torch.from_numpy(rng.standard_normal((3, 1, 16, 64)).astype("float32"))
    captions = [seq_for([0]), seq_for([4, 9]), seq_for([13])]
    levels = torch.tensor([0, 2, 4])

    prints = []
    for tag in ("a", "b"):
        torch.manual_seed(11)
        gen = QualityDiffusion(GeneratorConfig(**cfg))
        train_generator(
            gen, mels, captions, levels,
            vae_steps=3, vae_lr=1e-3, ldm_steps=2, ldm_lr=1e-3, batch_size=2,
            seed=6, final_path=tmp_path / f"{tag}.ckpt",
        )
        prints.append(module_fingerprint(gen))
    assert prints[0] == prints[1]
    back, meta = load_generator(tmp_path / "a.ckpt")
    assert module_fingerprint(back) == prints[0]
    assert meta["kind"] == "generator"
    with pytest.raises(ValueError, match="not a caption-model"):
        load_captioner(tmp_path / "a.ckpt")
