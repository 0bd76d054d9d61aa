import warnings

import numpy as np
import pytest

from fdcr.model import Allocation, ScenarioConfig, generate_scenario

warnings.filterwarnings("ignore", message="Solution may be inaccurate")


def desk_config(**overrides) -> ScenarioConfig:
    base = dict(n_t=4, m=4, i_pu=2, j_ul=2, k_dl=2)
    base.update(overrides)
    return ScenarioConfig(**base)


def tiny_config(**overrides) -> ScenarioConfig:
    base = dict(n_t=3, m=2, i_pu=1, j_ul=2, k_dl=2)
    base.update(overrides)
    return ScenarioConfig(**base)


@pytest.fixture
def desk_scenario():
    return generate_scenario(desk_config(), seed=7)


@pytest.fixture
def tiny_scenario():
    return generate_scenario(tiny_config(), seed=3)


def random_allocation(s, seed=0, power_scale=1.0) -> Allocation:
    """Random allocation within C1-C3 (leakage not enforced)."""
    rng = np.random.default_rng(seed)
    p = s.params
    w = (rng.standard_normal((p.k_dl, p.n_t)) + 1j * rng.standard_normal((p.k_dl, p.n_t)))
    total = np.sum(np.abs(w) ** 2)
    if total > 0:
        w *= np.sqrt(power_scale * p.p_max_dl / total)
    pw = rng.uniform(0.2, 1.0, size=p.j_ul) * p.p_max_ul * power_scale
    v = (rng.standard_normal((p.j_ul, p.n_t)) + 1j * rng.standard_normal((p.j_ul, p.n_t)))
    v = v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12) \
        if p.j_ul else v
    psi = rng.uniform(-np.pi, np.pi, size=p.m)
    return Allocation(w=w, p=pw, v=v, psi=psi)
