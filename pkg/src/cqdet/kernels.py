"""Backend dispatch for the rotated-rectangle geometry kernels.

The compiled extension (cqdet._fastgeom) is preferred when it imported
successfully; the numpy backend (cqdet._puregeom) is the fallback and the
reference for semantics. Set CQDET_PURE_PYTHON=1 to force the fallback.
"""

import os

import numpy as np

from . import _puregeom

try:
    from . import _fastgeom
except ImportError:
    _fastgeom = None

_FORCED_PURE = os.environ.get("CQDET_PURE_PYTHON", "0") not in ("", "0")

box_corners = _puregeom.box_corners


def available_backends():
    return ("compiled", "pure") if _fastgeom is not None else ("pure",)


def backend_name():
    return "pure" if (_fastgeom is None or _FORCED_PURE) else "compiled"


def _impl(backend):
    name = backend_name() if backend is None else backend
    if name == "compiled":
        if _fastgeom is None:
            raise RuntimeError("compiled geometry backend is not available")
        return _fastgeom
    if name == "pure":
        return _puregeom
    raise ValueError(f"unknown backend {name!r}")


def _boxes(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 5:
        raise ValueError("boxes must be (n,5) [cx, cy, l, w, yaw]")
    return a


def overlap_area_pairs(boxes_a, boxes_b, backend=None):
    """Intersection areas of corresponding rotated BEV rectangles."""
    return np.asarray(_impl(backend).overlap_area_pairs(_boxes(boxes_a), _boxes(boxes_b)))


def iou_pairs(boxes_a, boxes_b, backend=None):
    """IoU of corresponding rotated BEV rectangles, (n,)."""
    return np.asarray(_impl(backend).iou_pairs(_boxes(boxes_a), _boxes(boxes_b)))


def iou_matrix(boxes_a, boxes_b, backend=None):
    """Pairwise rotated-rectangle IoU, (n, m)."""
    return np.asarray(_impl(backend).iou_matrix(_boxes(boxes_a), _boxes(boxes_b)))
