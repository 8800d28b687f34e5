# SPDX-License-Identifier: GPL-3.0-or-later
from pathlib import Path

from pytest import mark, raises

from osclab.models.config import BlobsDataset, IdxDataset
from osclab.models.parse_config import (
    ConfigError,
    apply_overrides,
    parse_config,
    parse_manifest,
    parse_sweep_config,
)
from osclab.models.regime import QAT, Baseline, OscReg
from osclab.oscillations import OscillationMode
from osclab.utils import deep_merge

from .factory import experiment_dict, write_config


def sweep_dict(tmp_path, **kwargs) -> dict:
    base = experiment_dict(tmp_path)
    return {
        "version": 1,
        "name": "lam",
        "base": base,
        "variants": {
            "qat": {},
            "oscreg": {"train": {"regime": {"kind": "oscreg", "width": 4}}},
            "lam10": {"train": {"regime": {"kind": "oscreg", "width": 4, "lam": 10}}},
        },
        "seeds": [0, 1],
        "comparisons": [["qat", "oscreg"]],
        **kwargs,
    }


def test_parse_config(config_file):
    config = parse_config(config_file)
    assert config.name == "tiny"
    assert config.train.regime == QAT(width=4)
    assert config.train.early_stop_patience == 10
    assert config.train.oscillation_mode == OscillationMode.BINS
    assert config.eval_widths == ["ternary", 4, "fp32"]
    assert isinstance(config.dataset, BlobsDataset)
    assert config.model.hidden == [6]


def test_parse_config_overrides_win(config_file):
    config = parse_config(
        config_file,
        {"train.seed": 7, "train.lr": 0.5, "train.regime.width": "ternary"},
    )
    assert config.train.seed == 7
    assert config.train.lr == 0.5
    assert config.train.regime == QAT(width="ternary")


def test_parse_config_override_regime_kind(config_file):
    config = parse_config(
        config_file, {"train.regime.kind": "oscreg", "train.regime.width": 3}
    )
    assert config.train.regime == OscReg(width=3, lam=1.0)

    config = parse_config(config_file, {"train.regime.kind": "baseline"})
    assert config.train.regime == Baseline()


def test_parse_config_same_regime_kind_keeps_fields(config_file):
    config = parse_config(config_file, {"train.regime.kind": "qat"})
    assert config.train.regime == QAT(width=4)


def test_apply_overrides_copies():
    data = {"train": {"lr": 1}}
    result = apply_overrides(data, {"train.lr": 2, "output_dir": "x"})
    assert data == {"train": {"lr": 1}}
    assert result == {"train": {"lr": 2}, "output_dir": "x"}


@mark.parametrize(
    ("change", "keys"),
    (
        ({"train": {"lr": -1}}, ["train.lr"]),
        ({"train": {"regime": {"kind": "qat", "width": 1}}}, ["train.regime.width"]),
        ({"train": {"bogus": 1}}, ["train.bogus"]),
        ({"eval_widths": ["ternary", "ternary"]}, ["eval_widths"]),
        ({"version": 2}, ["version"]),
        (
            {"train": {"lr": 0}, "dataset": {"kind": "blobs", "spread": 0}},
            ["dataset.spread", "train.lr"],
        ),
    ),
)
def test_parse_config_offending_keys(tmp_path, change, keys):
    data = deep_merge(experiment_dict(tmp_path), change)
    path = write_config(tmp_path / "bad.yaml", data)
    with raises(ConfigError, match="offending keys") as e:
        parse_config(path)
    assert sorted(e.value.keys) == keys


def test_parse_config_missing_file(tmp_path):
    with raises(ConfigError, match="Cannot read config"):
        parse_config(tmp_path / "missing.yaml")


def test_parse_config_not_a_mapping(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with raises(ConfigError, match="must be a mapping"):
        parse_config(path)


def test_parse_config_invalid_yaml(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("train: [\n")
    with raises(ConfigError, match="Cannot read config"):
        parse_config(path)


def test_parse_config_idx_dataset(tmp_path):
    data = experiment_dict(tmp_path)
    data["dataset"] = {"kind": "idx", "manifest": "data/manifest.yaml"}
    config = parse_config(write_config(tmp_path / "idx.yaml", data))
    assert config.dataset == IdxDataset(manifest=Path("data/manifest.yaml"))


def test_parse_sweep_config(tmp_path):
    path = write_config(tmp_path / "sweep.yaml", sweep_dict(tmp_path))
    sweep, variants = parse_sweep_config(path, {"workers": 3})
    assert sweep.workers == 3
    assert sweep.seeds == [0, 1]
    assert sweep.comparisons == [("qat", "oscreg")]
    assert list(variants) == ["qat", "oscreg", "lam10"]
    assert variants["qat"].train.regime == QAT(width=4)
    assert variants["oscreg"].train.regime == OscReg(width=4)
    assert variants["lam10"].train.regime == OscReg(width=4, lam=10.0)
    assert variants["lam10"].name == "lam10"
    assert variants["lam10"].train.lr == 0.01


def test_parse_sweep_config_unknown_comparison(tmp_path):
    data = sweep_dict(tmp_path, comparisons=[["qat", "nope"]])
    path = write_config(tmp_path / "sweep.yaml", data)
    with raises(ConfigError, match="unknown variants: 'nope'"):
        parse_sweep_config(path)


def test_parse_sweep_config_invalid_variant(tmp_path):
    data = sweep_dict(tmp_path)
    data["variants"]["broken"] = {"train": {"max_epochs": 0}}
    path = write_config(tmp_path / "sweep.yaml", data)
    with raises(ConfigError) as e:
        parse_sweep_config(path)
    assert e.value.keys == ["variants.broken.train.max_epochs"]


def test_parse_manifest_relative_paths(tmp_path):
    path = write_config(
        tmp_path / "manifest.yaml", {"images": "a.idx", "labels": "sub/b.idx"}
    )
    manifest = parse_manifest(path)
    assert manifest.images == tmp_path / "a.idx"
    assert manifest.labels == tmp_path / "sub" / "b.idx"
    assert manifest.split_seed == 0


def test_parse_manifest_missing_labels(tmp_path):
    path = write_config(tmp_path / "manifest.yaml", {"images": "a.idx"})
    with raises(ConfigError) as e:
        parse_manifest(path)
    assert e.value.keys == ["labels"]
