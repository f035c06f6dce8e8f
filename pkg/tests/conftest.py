import numpy as np
import pytest

from maskrefine.network import HeadConfig, Model, ModelConfig, TrunkConfig
from maskrefine.synthdata import SynthConfig, make_dataset
from maskrefine.trainer import TrainConfig, train_stage1, train_stage2


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    """32-pixel patches keep training-loop tests fast."""
    return SynthConfig(patch=32, canvas=64, context=4)


@pytest.fixture(scope="session")
def small_model_config():
    return ModelConfig(trunk=TrunkConfig(W=32, P=3, D=5, F=16, base_width=4, max_width=16),
                       head=HeadConfig("C", reduce=4, vector=16, score_hidden=16), k=8)


@pytest.fixture(scope="session")
def small_data(small_synth):
    return make_dataset(small_synth, 5, 48, 16)


@pytest.fixture(scope="session")
def small_train_config():
    return TrainConfig(lr_stage1=0.03, lr_stage2=0.03, batch_size=16, epochs_stage1=2, epochs_stage2=1, seed=3)


@pytest.fixture(scope="session")
def trained_small(small_model_config, small_data, small_train_config):
    """(stage-1 state dict, model after stage 2) on the small config."""
    model = Model(small_model_config)
    train_stage1(model, small_data["train"], small_train_config)
    stage1 = model.state_dict()
    train_stage2(model, small_data["train"], small_train_config)
    return stage1, model


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record_criterion(capsys):
    """Print and remember one PASS/FAIL line; returns ``ok`` so callers can assert on it."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
