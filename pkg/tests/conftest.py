import json

import pytest

from dsdh.config import DataConfig, ExperimentConfig, ModelConfig, OptimizerConfig
from dsdh.heads import BranchSpec
from dsdh.scenes import SynthConfig

TINY_SYNTH = SynthConfig(
    num_classes=3, objects_per_scene=(1, 3), channels=6, image_size=(64, 64), train_scenes=6, test_scenes=3, seed=3
)


def tiny_config(**changes) -> ExperimentConfig:
    """A config that trains in well under a second."""
    base = ExperimentConfig(
        branch=BranchSpec(num_fc=1, fc_width=16),
        data=DataConfig(synth=TINY_SYNTH),
        model=ModelConfig(output_size=3, samples_per_bin=1),
        optimizer=OptimizerConfig(epochs=2),
        seed=5,
    )
    return base.replace(**changes)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_config().to_dict()))
    return path


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
