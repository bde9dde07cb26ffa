"""Inverter voltage-control workbench.

dq-frame VSI simulation, Lyapunov-shaped SAC training, teacher->student
policy distillation and PI / FCS-MPC baselines with a benchmarking CLI.
"""

from ._accel import BACKEND_NAME

__version__ = "0.1.0"

__all__ = ["BACKEND_NAME", "__version__"]
