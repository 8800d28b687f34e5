# SPDX-License-Identifier: GPL-3.0-or-later
"""
osclab trains small quantized networks and measures how their weights
oscillate around quantization thresholds, with and without a regularizer
that induces such oscillations.
"""

import importlib.metadata as importlib_metadata

__version__ = importlib_metadata.version(__name__)
