# SPDX-License-Identifier: GPL-3.0-or-later
import copy
from collections.abc import Iterable


def to_comma_separated(items: Iterable) -> str:
    return ", ".join(sorted(repr(str(x)) for x in items))


def deep_merge(base: dict, overrides: dict) -> dict:
    """
    Returns a copy of ``base`` with ``overrides`` merged in recursively.

    A mapping that changes its "kind" replaces the base mapping instead of
    being merged into it.
    """
    result = copy.deepcopy(base)
    for key, value in overrides.items():
        current = result.get(key)
        if (
            isinstance(current, dict)
            and isinstance(value, dict)
            and value.get("kind", current.get("kind")) == current.get("kind")
        ):
            result[key] = deep_merge(current, value)
        else:
            result[key] = copy.deepcopy(value)
    return result
