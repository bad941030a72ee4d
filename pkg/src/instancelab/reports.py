"""Result records emitted by oracles and verification routines."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional


@dataclass
class ValueReport:
    """Value of the empty history plus solver/evaluator metadata."""

    value_at_empty: float
    stderr: Optional[float] = None
    nodes_expanded: int = 0
    depth: int = 0
    truncated_mass: float = 0.0
    per_node_values: Optional[dict] = None
    seed: Optional[int] = None

    def to_json_dict(self) -> dict:
        d = {
            "value": self.value_at_empty,
            "stderr": self.stderr,
            "nodes_expanded": self.nodes_expanded,
            "depth": self.depth,
            "truncated_mass": self.truncated_mass,
            "seed": self.seed,
        }
        if self.per_node_values is not None:
            d["per_node_values"] = {str(k): v for k, v in self.per_node_values.items()}
        return d


@dataclass
class VerificationReport:
    """Outcome of one quantitative check against an exact reference."""

    name: str
    value: float
    tolerance: float
    passed: bool
    stderr: Optional[float] = None
    nodes_expanded: int = 0
    seed: Optional[int] = None
    details: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "stderr": self.stderr,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "nodes_expanded": self.nodes_expanded,
            "seed": self.seed,
            "details": self.details,
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
