import numpy as np
import pytest

from streamwatch.clstm import ModelConfig, train
from streamwatch.stream import StreamConfig, build_sequences, synth_stream


@pytest.fixture(scope="session")
def history_windows():
    return build_sequences(synth_stream(StreamConfig(seed=0, anomaly_rate=0.0, n_segments=500)), 9)


@pytest.fixture(scope="session")
def small_model(history_windows):
    """A quickly trained desk-scale model shared by the drift and pipeline tests."""
    cfg = ModelConfig(d1=40, d2=11, h1=16, h2=16, lr=0.01, max_epoch=120, checkpoint_every=20, seed=0)
    params, _ = train(history_windows, cfg)
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def _verdict(n: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return _verdict


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
