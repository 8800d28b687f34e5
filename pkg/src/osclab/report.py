# SPDX-License-Identifier: GPL-3.0-or-later
import sys
from contextlib import contextmanager
from copy import deepcopy
from dataclasses import dataclass, field
from typing import TextIO


def format_value(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, dict):
        items = (f"{k}: {format_value(v)}" for k, v in value.items())
        return "{" + ", ".join(items) + "}"
    if isinstance(value, list | tuple):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    return str(value)


@dataclass
class Report:
    """Nested sections of values, printed indented as they are set."""

    data: dict = field(default_factory=dict)
    current_sections: list = field(default_factory=list)
    current_data: dict = field(default_factory=dict)
    file: TextIO | None = None

    def __post_init__(self):
        self.current_data = self.data

    def print(self, text: str):
        indent = "  " * len(self.current_sections)
        print(f"{indent}{text}", file=self.file or sys.stdout)

    @contextmanager
    def section(self, name: str):
        self.print(f"{name}:")
        self.current_sections.append(name)
        prev_data = self.current_data
        self.current_data = self.current_data.setdefault(name, {})

        yield

        self.current_data = prev_data
        self.current_sections.pop()

    def set(self, key: str, value):
        self.print(f"{key}: {format_value(value)}")
        self.current_data[key] = deepcopy(value)
