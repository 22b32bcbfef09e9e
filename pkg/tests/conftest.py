import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qlora_cls.model import ModelConfig, TransformerModel

settings.register_profile(
    "repo",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("repo")

TINY = ModelConfig(vocab_size=258, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=64, block_size=16, init_seed=3)


def to_float64(model, head=None):
    """Promote every dense leaf to float64 so finite differences are clean."""
    for t in [model.tok_emb, model.pos_emb, model.final_norm]:
        t.data = t.data.astype(np.float64)
    for layer in model.layers:
        layer.attn_norm.data = layer.attn_norm.data.astype(np.float64)
        layer.ff_norm.data = layer.ff_norm.data.astype(np.float64)
    for p in model.trainable_parameters() + (head.parameters() if head is not None else []):
        p.data = p.data.astype(np.float64)
    return model


@pytest.fixture
def tiny_model():
    return TransformerModel(TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    n = marker.args[0]
    if n in _CRITERIA and _CRITERIA[n][0] != "passed":
        return
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _CRITERIA[n] = (rep.outcome, item.name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcome, name, detail = _CRITERIA[n]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2} {status}  {name}" + (f"  [{detail}]" if detail else ""))
