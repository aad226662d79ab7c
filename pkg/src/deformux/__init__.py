"""Volumetric depthwise deformable convolution with tri-planar offsets.

Numba reads ``NUMBA_NUM_THREADS`` once, at import, and never lets
``set_num_threads`` exceed it. The ceiling is raised here so that ``--threads``
can request more worker threads than the host has cores. ``DEFORMUX_THREADS``
overrides the number of threads actually used.
"""

import os

__version__ = "0.1.0"

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
_requested = int(os.environ.get("DEFORMUX_THREADS", "0") or 0)
os.environ.setdefault("NUMBA_NUM_THREADS", str(max(os.cpu_count() or 1, 8, _requested)))
