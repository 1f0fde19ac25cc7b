"""MetricReport container and its JSON form.

One record per (metric, boundary, probe). Derived continual-learning scalars
(forgetting, forward transfer, exclusion difference) carry their input
accuracies so they can be re-derived from the report alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..exceptions import MissingMetric
from .metrics import exclusion_difference, forgetting, forward_transfer

DERIVED = {
    "forgetting": (forgetting, ("acc_after_own_task", "acc_after_final")),
    "forward_transfer": (forward_transfer, ("acc_with_pretraining", "acc_from_scratch")),
    "exclusion_difference": (exclusion_difference, ("acc_with_task", "acc_without_task")),
}

SCHEMA_VERSION = 1


def _clean(value):
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite metric value {value}")
        return value
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, "item"):
        return _clean(value.item())
    return value


@dataclass
class MetricReport:
    run_id: str = ""
    meta: dict = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)

    def add(self, metric: str, value, boundary: int | None = None, probe: str | None = None, **extra) -> dict:
        rec = {"metric": metric, "boundary": boundary, "probe": probe, "value": _clean(value)}
        rec.update(_clean(extra))
        self.records.append(rec)
        return rec

    def add_derived(self, metric: str, probe: str | None = None, boundary: int | None = None, **inputs) -> dict:
        fn, names = DERIVED[metric]
        missing = set(names) - set(inputs)
        if missing:
            raise MissingMetric(f"{metric} needs inputs {sorted(missing)}")
        value = fn(*(inputs[n] for n in names))
        return self.add(metric, value, boundary=boundary, probe=probe, inputs={n: inputs[n] for n in names})

    def find(self, metric: str, boundary=..., probe=...) -> list[dict]:
        out = [r for r in self.records if r["metric"] == metric]
        if boundary is not ...:
            out = [r for r in out if r["boundary"] == boundary]
        if probe is not ...:
            out = [r for r in out if r["probe"] == probe]
        return out

    def get(self, metric: str, boundary=..., probe=...):
        found = self.find(metric, boundary, probe)
        if not found:
            raise MissingMetric(f"no {metric!r} record for boundary={boundary!r} probe={probe!r}")
        return found[-1]["value"]

    @property
    def boundaries(self) -> list[int]:
        return sorted({r["boundary"] for r in self.records if r["boundary"] is not None})

    def verify_identities(self) -> list[dict]:
        """Return derived records whose stored value does not re-derive exactly."""
        bad = []
        for rec in self.records:
            if rec["metric"] in DERIVED:
                fn, names = DERIVED[rec["metric"]]
                if fn(*(rec["inputs"][n] for n in names)) != rec["value"]:
                    bad.append(rec)
        return bad

    def to_dict(self) -> dict:
        return {"schema": SCHEMA_VERSION, "run_id": self.run_id, "meta": _clean(self.meta),
                "records": self.records}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        if d.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        return cls(run_id=d.get("run_id", ""), meta=d.get("meta", {}), records=list(d["records"]))

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
