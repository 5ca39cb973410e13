import numpy as np
import pytest

from cascade.toy_model import ModelConfig, new_model


def tiny_config(**kw) -> ModelConfig:
    base = dict(num_layers=2, d_emb=16, H=4, H_KV=2, d=4, V=16, mlp_hidden=32, max_seq=80)
    base.update(kw)
    return ModelConfig(**base)


def rel_err(a, b) -> float:
    return float(np.abs(np.asarray(a) - np.asarray(b)).max() / max(np.abs(b).max(), 1e-300))


@pytest.fixture(scope="session")
def model16():
    return new_model(tiny_config(), seed=11)


@pytest.fixture(scope="session")
def model32():
    return new_model(tiny_config(V=32), seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
