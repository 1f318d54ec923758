"""
Load-balance report model
"""
from typing import List

from pydantic import BaseModel, Field

BALANCE_CSV_COLUMNS = (
    "step", "rebalanced", "ratio_pre", "ratio_post", "cubes_moved", "bytes_moved", "edge_cut", "workloads",
)


class BalanceReport(BaseModel):
    """Outcome of one imbalance check"""
    step: int = 0
    rebalanced: bool = False
    workloads: List[float] = Field(default_factory=list)
    ratio_pre: float = 1.0
    ratio_post: float = 1.0
    cubes_moved: int = 0
    bytes_moved: int = 0
    edge_cut: float = 0.0

    def csv_row(self) -> List[str]:
        return [
            str(self.step), str(int(self.rebalanced)), f"{self.ratio_pre:.6f}", f"{self.ratio_post:.6f}",
            str(self.cubes_moved), str(self.bytes_moved), f"{self.edge_cut:.1f}",
            ";".join(f"{w:.1f}" for w in self.workloads),
        ]
