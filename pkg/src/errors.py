"""
Exception hierarchy

Every error raised on purpose by CubeFlow derives from CubeFlowError and from the
builtin family it refines, so callers may catch either. The CLI maps the families
to exit codes (configuration 1, numerics 2, I/O 3).
"""


class CubeFlowError(Exception):
    """Root of all CubeFlow errors"""


class ConfigError(CubeFlowError, ValueError):
    """Case configuration is invalid or references missing files"""


class MeshGenerationError(CubeFlowError, ValueError):
    """Refinement input rejected (outside domain, level above the configured maximum)"""


class MeshStructureError(CubeFlowError, ValueError):
    """Cube adjacency violates 2:1 grading"""


class ParticleError(CubeFlowError, ValueError):
    """Lagrangian particles or surfaces outside the mesh"""


class PartitionError(CubeFlowError, ValueError):
    """Infeasible partition request (more parts than graph nodes)"""


class TransportError(CubeFlowError, RuntimeError):
    """Transport closed or aborted by a failing rank"""


class HaloContractError(CubeFlowError, RuntimeError):
    """Exchange misuse: overlapping exchanges of one field, or stencil support past the halo"""


class NumericsError(CubeFlowError, ArithmeticError):
    """Non-finite flow state"""


class SolverConvergenceError(NumericsError):
    """An iteration that must converge hit its cap"""


class CheckpointError(CubeFlowError, OSError):
    """Checkpoint container unreadable: bad magic, version, checksum or truncation"""
