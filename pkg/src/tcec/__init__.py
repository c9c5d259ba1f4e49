"""Timestep-aware correction of quantization error in diffusion samplers.

Toy-scale numpy implementation: schedules, denoisers, fake quantization,
error propagation, channel-wise scaling calibration, DDIM / DPM-Solver++
samplers with correction, and a deterministic experiment harness.
"""

__version__ = "0.1.0"
