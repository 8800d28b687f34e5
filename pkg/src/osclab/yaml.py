# SPDX-License-Identifier: GPL-3.0-or-later
from functools import cache
from pathlib import Path

from ruamel.yaml import YAML


@cache
def yaml() -> YAML:
    """Safe YAML 1.2 loader; every JSON document is accepted as well."""
    yaml = YAML(typ="safe")
    yaml.indent(sequence=4, offset=2)
    yaml.default_flow_style = False
    yaml.sort_base_mapping_type_on_output = False
    return yaml


def load_document(path: Path | str):
    with open(path) as f:
        return yaml().load(f)
