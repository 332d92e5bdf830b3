"""Distributed multi-agent collision avoidance toolkit.

Learns a graph-attention barrier certificate jointly with a distributed
controller, runs it through a detector/switching scheme with online
refinement, and benchmarks against handcrafted CBF quadratic-program
safety filters.
"""

from . import autodiff, dynamics, world, nets, qp, runtime, training, evaluation

__all__ = [
    "autodiff",
    "dynamics",
    "world",
    "nets",
    "qp",
    "runtime",
    "training",
    "evaluation",
]

__version__ = "0.1.0"
