"""
Case storage shared by every file format.

A repository owns the file handling and the model validation; subclasses supply only the
text codec for their format.
"""
from __future__ import annotations
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict

from pydantic import ValidationError

from ..errors import ConfigError
from ..models.case import CaseConfig


class CaseRepository(ABC):
    """Reads and writes CaseConfig files; formats differ only in ``decode``/``encode``"""

    format_name: str = "case"

    @abstractmethod
    def decode(self, text: str) -> Dict[str, Any]:
        """Raw mapping from file text; raise ValueError on malformed text"""

    @abstractmethod
    def encode(self, data: Dict[str, Any]) -> str:
        ...

    def load(self, path: str) -> CaseConfig:
        """
        Load and validate a case file.

        Raises:
            FileNotFoundError: no file at ``path``
            ConfigError: malformed text or a value rejected by the case models
        """
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"Case file not found: {path}")
        try:
            data = self.decode(p.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ConfigError(f"Case file {path} is not valid {self.format_name}: {exc}") from exc
        try:
            return CaseConfig.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(f"Invalid case file {path}:\n{exc}") from exc

    def save(self, case: CaseConfig, path: str) -> None:
        """Write a case, creating parent directories; face conditions keep their x-/x+/... names"""
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.encode(case.model_dump(mode="json", by_alias=True)), encoding="utf-8")
