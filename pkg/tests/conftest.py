import sys

import numpy as np
import pytest

from gsrformer.config import load_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = (
    "model.dim=16", "model.heads=2", "model.verb_layers=1", "model.role_layers=1",
    "model.ffn_verb=16", "model.ffn_role=16", "model.ffn_decoder=16", "model.head_hidden=16",
    "model.box_hidden=16", "model.feature_channels=8", "model.iterations=2", "model.support_k=2",
    "train.encoder_epochs=2", "train.decoder_epochs=2", "train.batch_size=4",
    "data.synth.verbs=3", "data.synth.arities=[1, 2]", "data.synth.images_per_verb=4",
    "data.synth.eval_images_per_verb=2",
)


@pytest.fixture
def tiny_overrides():
    return list(TINY)


@pytest.fixture
def tiny_cfg(tmp_path):
    return load_config(None, [*TINY, f"paths.out_dir={tmp_path / 'run'}"], env={})


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance.RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
