"""Shared test configuration.

BLAS threading is pinned to one thread before numpy loads: the matrices in
this package are small enough that OpenBLAS spin-wait synchronization
costs far more than it saves (an order of magnitude on a two-core box).
"""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
