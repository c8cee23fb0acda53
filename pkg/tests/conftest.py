import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pgmel.corpus import Corpus
from pgmel.data import SyntheticSpec, generate_synthetic
from pgmel.encoders import EncoderConfig

settings.register_profile("pgmel", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pgmel")

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_encoder(**kw) -> EncoderConfig:
    base = dict(d1=3, d2=4, d3=5, feature_dim_in=8, dropout=0.3)
    return EncoderConfig(**{**base, **kw})


def small_dataset(**kw):
    base = dict(num_entities=40, num_clusters=10, mentions_per_entity=3, noise=0.5, token_count=3,
                feature_dim=8, seed=3, preset="tiny")
    return generate_synthetic(SyntheticSpec(**{**base, **kw}))


@pytest.fixture(scope="session")
def tiny_corpus():
    return Corpus(small_dataset(), candidate_size=8)
