import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from confcap.captioner import CaptionModelConfig, CaptionScorer
from confcap.tokenizer import TokenSequence, caption_for_events

# Small enough to keep forward passes and finite differences fast on one core.
TINY = dict(n_queries=4, d_model=16, n_layers=2, n_heads=2, d_proj=8, d_ff=32)


def make_model(seed: int = 0, **overrides) -> CaptionScorer:
    cfg = CaptionModelConfig(**{**TINY, **overrides})
    torch.manual_seed(seed)
    model = CaptionScorer(cfg)
    model.eval()
    return model


def rand_feats(rng: np.random.Generator, t: int = 12, d: int = 32) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal((t, d)).astype(np.float32))


def seq_for(events) -> TokenSequence:
    return TokenSequence.from_caption(caption_for_events(events))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
