"""voltsim: resilience and energy co-simulation for undervolted agent pipelines.

Simulates voltage-underscaling timing faults as bit flips in the outputs of
INT8 GEMM/conv layers of a planner/controller agent stack, together with the
mitigation stack (anomaly clamping, offline Hadamard weight rotation,
entropy-adaptive voltage scaling) and full energy accounting.
"""

__version__ = "0.1.0"
