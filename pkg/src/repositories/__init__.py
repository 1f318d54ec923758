"""
Repositories
"""
from .base import CaseRepository
from .json_repo import JsonCaseRepository
from .checkpoint_repo import CheckpointState, read_checkpoint, verify_checkpoint, write_checkpoint

__all__ = [
    "CaseRepository", "JsonCaseRepository",
    "CheckpointState", "read_checkpoint", "verify_checkpoint", "write_checkpoint",
]
