import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mope import experiments
from mope.evaluation import PairedSplit
from mope.model import ModelConfig, init_model

settings.register_profile(
    "suite",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("suite")


def random_split(cfg: ModelConfig, n: int, seed: int = 0, name: str = "val") -> PairedSplit:
    rng = np.random.default_rng(seed)
    return PairedSplit(
        name,
        rng.integers(0, cfg.vocab_v, size=(n, cfg.seq_v)),
        rng.integers(0, cfg.vocab_t, size=(n, cfg.seq_t)),
    )


def jitter(model, scale: float = 0.3, seed: int = 1):
    """Break init symmetry (zero biases, unit gains) so every parameter matters."""
    rng = np.random.default_rng(seed)
    out = model.copy()
    for k, v in out.params.items():
        if k != "logit_scale":
            out.params[k] = v + scale * rng.standard_normal(v.shape)
    return out


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d=16, n_heads=2, d_ff=24, n_layers_v=2, n_layers_t=2, vocab_v=12, vocab_t=10, seq_v=5, seq_t=4, e=8)


@pytest.fixture
def tiny_model(tiny_cfg):
    return jitter(init_model(tiny_cfg))


@pytest.fixture
def toy_model():
    """The d=32, 4-head, 4-layer configuration used for accounting examples."""
    cfg = ModelConfig(d=32, n_heads=4, n_layers_v=4, n_layers_t=4, e=16, seed=42)
    return jitter(init_model(cfg), 0.1)


@pytest.fixture(scope="session")
def teacher_runs():
    """Seed-41/42/43 teachers, trained once per session (about 100 s)."""
    return {seed: experiments.train_teacher(seed) for seed in experiments.SEEDS}


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
