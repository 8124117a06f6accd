"""Desk-scale tomographic reconstruction toolkit.

Core pieces: a Siddon-traced parallel-beam system model, Poisson scan
simulation, classic EM-family solvers, a small reverse-mode autodiff engine,
a windowed-attention image regularizer, and the unrolled reconstructor that
ties them together with end-to-end training and evaluation.
"""

from . import autodiff, formats, metrics, recon, rstr, simulation, system, unrolled
from .system import ScannerGeometry2D, SystemModel

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "formats",
    "metrics",
    "recon",
    "rstr",
    "simulation",
    "system",
    "unrolled",
    "ScannerGeometry2D",
    "SystemModel",
    "__version__",
]
