import numpy as np
import pytest
import torch

from prvr.encoders import EncoderConfig
from prvr.featurepack import SyntheticSpec, generate_synthetic
from prvr.model import PrvrModel


def small_encoder_config(D=16, T_m=4, heads=2, ff=32, dropout=0.0, **kw) -> EncoderConfig:
    return EncoderConfig(
        D=D, T_m=T_m, num_heads=heads, ff_dim=ff, dropout=dropout, max_positions=64, **kw
    )


def small_model(dv=12, dt=10, g=4, **kw) -> PrvrModel:
    torch.manual_seed(kw.pop("seed", 0))
    return PrvrModel(small_encoder_config(**kw), dv, dt, num_groups=g)


@pytest.fixture
def tiny_packs():
    spec = SyntheticSpec(
        num_concepts=12,
        num_videos=8,
        moments_per_video=3,
        frames_per_moment=4,
        queries_per_video=2,
        noise_scale=0.05,
        shared_concept_rate=0.25,
        redundant_moment_rate=1.0 / 3.0,
        seed=11,
        feature_dim_video=12,
        feature_dim_text=12,
    )
    return generate_synthetic(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
