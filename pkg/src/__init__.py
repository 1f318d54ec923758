"""
CubeFlow - A desk-scale Building-Cube incompressible flow framework.

Cube-partitioned Cartesian meshes, immersed-boundary forcing on Lagrangian surface
particles, overlapped halo exchange over in-process ranks, predictive load balancing
and wavelet-compressed restartable checkpoints.

Current version: v0.3
"""
__version__ = "0.3.0"
