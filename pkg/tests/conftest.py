import logging

import pytest
import torch

from promptcount.backbone import BackboneConfig
from promptcount.config import build_model, stub_config
from promptcount.data import make_toy_dataset


@pytest.fixture
def stub_backbone_cfg():
    return BackboneConfig.stub()


@pytest.fixture
def stub_run_cfg(tmp_path):
    return stub_config(output_dir=str(tmp_path / "run"))


@pytest.fixture
def stub_model():
    return build_model(stub_config()).double()


@pytest.fixture
def toy_root(tmp_path):
    return make_toy_dataset(tmp_path / "toy", n_images=4)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)
    torch.manual_seed(0)
    yield
