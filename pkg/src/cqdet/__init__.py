"""cqdet: a center-query transformer detector for synthetic LiDAR scenes.

Every learned layer carries an explicit forward and backward pass over dense
f64 grids; rotated-box geometry runs on a compiled kernel core with a numpy
fallback selected at import time.
"""

__version__ = "0.1.0"
