"""Kinetic phase-space simulation, low-rank factorization, and evaluation.

Everything lives in the compiled extension; this package just re-exports it.
"""

from ._lrmf import *  # noqa: F401,F403
from ._lrmf import __version__  # noqa: F401
