# SPDX-License-Identifier: GPL-3.0-or-later
from jinja2 import Environment

from . import formatting

EXTENSIONS = (formatting,)


def update_environment(env: Environment) -> None:
    """Registers the filters report templates use."""
    for extension in EXTENSIONS:
        extension.update_environment(env)
