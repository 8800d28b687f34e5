# SPDX-License-Identifier: GPL-3.0-or-later
from pytest import fixture

from osclab.datasets import gen_blobs
from osclab.models.config import ExperimentConfig

from .factory import experiment_dict, tiny_model, write_config


@fixture
def blobs():
    return gen_blobs(
        seed=3, num_classes=3, dims=4, per_class=30, spread=0.3, center_scale=2.0
    )


@fixture
def model():
    return tiny_model((4, 6, 3))


@fixture
def config_dict(tmp_path):
    return experiment_dict(tmp_path)


@fixture
def config_file(tmp_path, config_dict):
    return write_config(tmp_path / "experiment.yaml", config_dict)


@fixture
def config(config_dict):
    return ExperimentConfig.model_validate(config_dict)


@fixture(autouse=True)
def mock_env(monkeypatch):
    monkeypatch.delenv("OSCLAB_LOGGING_CONFIG", raising=False)
    monkeypatch.delenv("OTEL_EXPORTER_OTLP_TRACES_ENDPOINT", raising=False)
