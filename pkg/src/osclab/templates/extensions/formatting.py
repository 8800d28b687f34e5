# SPDX-License-Identifier: GPL-3.0-or-later
from jinja2 import Environment


def percent(value: float, digits: int = 2) -> str:
    return f"{100.0 * value:.{digits}f}"


def mean_std(summary, digits: int = 2) -> str:
    """Formats a Summary in percent as "mean ± std", or the mean for one seed."""
    if summary is None:
        return "-"
    mean = percent(summary.mean, digits)
    if summary.std is None:
        return mean
    return f"{mean} ± {percent(summary.std, digits)}"


def pvalue(value: float) -> str:
    if value < 0.001:
        return "< 0.001"
    return f"{value:.3f}"


FILTERS = {
    "mean_std": mean_std,
    "pvalue": pvalue,
}


def update_environment(env: Environment):
    env.filters.update(FILTERS)
