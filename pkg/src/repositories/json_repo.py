"""
JSON case files
"""
from __future__ import annotations
import json
from typing import Any, Dict

from .base import CaseRepository


class JsonCaseRepository(CaseRepository):
    """Case files as indented JSON"""

    format_name = "JSON"

    def decode(self, text: str) -> Dict[str, Any]:
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ValueError(f"top level must be an object, got {type(data).__name__}")
        return data

    def encode(self, data: Dict[str, Any]) -> str:
        return json.dumps(data, indent=2) + "\n"
