# SPDX-License-Identifier: GPL-3.0-or-later
import copy
import logging
import re
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path

from pydantic import BaseModel, ValidationError
from ruamel.yaml.error import YAMLError

from osclab.models.config import ExperimentConfig, IdxManifest, SweepConfig
from osclab.utils import deep_merge, to_comma_separated
from osclab.yaml import load_document

logger = logging.getLogger(__name__)

DISCRIMINATOR_TAGS = frozenset(("baseline", "qat", "oscreg", "blobs", "idx"))
UNION_MEMBER_TAG = re.compile(r"literal\[.*\]|(constrained-)?(int|str|float)")


class ConfigError(RuntimeError):
    def __init__(self, message: str, keys: list[str] | None = None):
        super().__init__(message)
        self.keys = keys or []


def error_key(loc: tuple) -> str:
    # Drop the tags pydantic inserts into union locations.
    parts = [
        str(x)
        for x in loc
        if x not in DISCRIMINATOR_TAGS and not UNION_MEMBER_TAG.fullmatch(str(x))
    ]
    return ".".join(parts) or "<root>"


@dataclass
class ParseState:
    """Collects validation failures of one config file."""

    path: str
    errors: list[str] = field(default_factory=list)
    keys: list[str] = field(default_factory=list)

    def add_validation_error(self, e: ValidationError, prefix: str = "") -> None:
        for error in e.errors():
            key = f"{prefix}{error_key(error['loc'])}"
            self.keys.append(key)
            self.errors.append(f"{key}: {error['msg']}")

    def validate[ModelT: BaseModel](
        self, cls: type[ModelT], data, prefix: str = ""
    ) -> ModelT | None:
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            self.add_validation_error(e, prefix)
            return None

    def raise_errors(self) -> None:
        if self.errors:
            error_list = "\n  ".join(self.errors)
            raise ConfigError(
                f"Invalid config {self.path!r}; offending keys:"
                f" {to_comma_separated(dict.fromkeys(self.keys))}\n  {error_list}",
                keys=list(dict.fromkeys(self.keys)),
            )


def load_data(path: Path | str) -> dict:
    try:
        data = load_document(path)
    except (OSError, YAMLError) as e:
        raise ConfigError(f"Cannot read config {str(path)!r}: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"Config {str(path)!r} must be a mapping")
    return data


def set_path(data: dict, dotted: str, value) -> None:
    *parents, last = dotted.split(".")
    node = data
    for key in parents:
        if not isinstance(node.get(key), dict):
            node[key] = {}
        node = node[key]
    node[last] = value


def apply_overrides(data: dict, overrides: dict[str, object]) -> dict:
    """
    Applies dotted-path overrides (command line flags) on top of config data.
    Overrides always win over the file.
    """
    data = copy.deepcopy(data)
    kind = overrides.get("train.regime.kind")
    train = data.get("train")
    regime = train.get("regime") if isinstance(train, dict) else None
    same_kind = isinstance(regime, dict) and regime.get("kind") == kind
    if kind is not None and not same_kind:
        # Switching kinds drops the regime fields of the file.
        set_path(data, "train.regime", {})
    for dotted, value in overrides.items():
        set_path(data, dotted, value)
    return data


def parse_config(
    path: Path | str, overrides: dict[str, object] | None = None
) -> ExperimentConfig:
    logger.info("Parsing %s", path)
    data = apply_overrides(load_data(path), overrides or {})
    state = ParseState(path=str(path))
    config = state.validate(ExperimentConfig, data)
    state.raise_errors()
    assert config is not None
    return config


def variant_configs(
    sweep: SweepConfig, state: ParseState
) -> Iterator[tuple[str, ExperimentConfig]]:
    for name, overrides in sweep.variants.items():
        data = deep_merge(sweep.base, overrides)
        data.setdefault("name", name)
        config = state.validate(ExperimentConfig, data, prefix=f"variants.{name}.")
        if config is not None:
            yield name, config.model_copy(update={"name": name})


def parse_sweep_config(
    path: Path | str, overrides: dict[str, object] | None = None
) -> tuple[SweepConfig, dict[str, ExperimentConfig]]:
    """
    Parses a sweep config and validates every variant merged into the base
    experiment config.
    """
    logger.info("Parsing sweep %s", path)
    data = load_data(path)
    for dotted, value in (overrides or {}).items():
        set_path(data, dotted, value)
    state = ParseState(path=str(path))
    sweep = state.validate(SweepConfig, data)
    variants = dict(variant_configs(sweep, state)) if sweep is not None else {}
    state.raise_errors()
    assert sweep is not None
    return sweep, variants


def parse_manifest(path: Path | str) -> IdxManifest:
    state = ParseState(path=str(path))
    manifest = state.validate(IdxManifest, load_data(path))
    state.raise_errors()
    assert manifest is not None
    root = Path(path).parent
    return manifest.model_copy(
        update={"images": root / manifest.images, "labels": root / manifest.labels}
    )
