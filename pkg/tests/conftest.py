import numpy as np
import pytest

from hybridattn.linalg import DTYPE
from hybridattn.model import ModelConfig, init_model


def layer_dicts(model):
    return [dict(w_q=L.w_q, w_k=L.w_k, w_v=L.w_v, w_o=L.w_o, w_1=L.w_1, w_2=L.w_2)
            for L in model.layers]


def residual_model(n_layers=3, n_heads=2, head_dim=4, seed=0):
    """w_o = w_1 = w_2 = 0: every block returns its input unchanged."""
    model = init_model(ModelConfig(n_layers=n_layers, n_heads=n_heads, head_dim=head_dim, seed=seed))
    for L in model.layers:
        L.w_o[:] = 0
        L.w_1[:] = 0
        L.w_2[:] = 0
    return model


def random_prompt(rng, s, width):
    return rng.standard_normal((s, width)).astype(DTYPE)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
