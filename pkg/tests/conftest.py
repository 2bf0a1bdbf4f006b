import numpy as np
import pytest

ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_config(tmp_path):
    from dualguide.toy import make_toy_dataset

    return make_toy_dataset(tmp_path, n_synth_per_class=6, n_test=40, n_train=12, n_shots=4)
