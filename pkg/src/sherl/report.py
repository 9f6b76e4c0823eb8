"""Run reports: JSON serialization and schema validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

SCHEMA_VERSION = 1


def schema() -> dict:
    text = resources.files("sherl").joinpath("schema/run_report.schema.json").read_text("utf-8")
    return json.loads(text)


@dataclass
class RunReport:
    config: dict
    epochs: list[dict]
    final: dict
    memory: dict
    audit: dict
    flops: dict | None
    seed: int
    n_trainable_params: int
    wall_time: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def metrics(self) -> dict:
        """Everything except wall time; identical across reruns of one seed."""
        return {"epochs": self.epochs, "final": self.final, "memory": self.memory,
                "audit": self.audit, "flops": self.flops,
                "n_trainable_params": self.n_trainable_params, "extras": self.extras}

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "seed": self.seed, "config": self.config,
                "metrics": self.metrics, "wall_time": self.wall_time}

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        validate(data)
        m = data["metrics"]
        return cls(data["config"], m["epochs"], m["final"], m["memory"], m["audit"], m["flops"],
                   data["seed"], m["n_trainable_params"], data["wall_time"], m.get("extras", {}))

    def metrics_json(self) -> str:
        return dumps(self.metrics)


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False)


def validate(data: dict) -> None:
    jsonschema.validate(data, schema())


def write_report(report: RunReport, path: str | Path) -> Path:
    path = Path(path)
    data = report.to_dict()
    validate(data)
    path.write_text(dumps(data) + "\n", encoding="utf-8")
    return path


def read_report(path: str | Path) -> RunReport:
    return RunReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
