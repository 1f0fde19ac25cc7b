"""Markdown result tables: method x strategy rows, one column per sequence."""

from __future__ import annotations

from dataclasses import dataclass

from .runner import RunManifest
from .figures import METHOD_LABELS, STRATEGY_LABELS


@dataclass(frozen=True)
class TableSchema:
    rows: tuple[tuple[str, str], ...]  # (objective, strategy)
    columns: tuple[str, ...]  # sequence strings
    metric: str = "knn"


MAIN_ROWS = (
    ("sl", "finetune"), ("sl", "lwf"), ("sl", "pfr"),
    ("sl_mlp", "finetune"), ("sl_mlp", "lwf"), ("sl_mlp", "pfr"),
    ("trex", "finetune"), ("trex", "lwf"), ("trex", "pfr"),
    ("supcon", "finetune"), ("supcon", "cassle"), ("supcon", "pfr"),
    ("barlow", "finetune"), ("barlow", "cassle"), ("barlow", "pfr"),
    ("simclr", "finetune"), ("simclr", "cassle"), ("simclr", "pfr"),
)
MAIN_GRID = TableSchema(MAIN_ROWS, ("C100/5", "C100/20", "IN100/5"))


def final_value(manifest: RunManifest, metric: str = "knn") -> tuple[float, float]:
    """(mean, std) of ``metric`` at the last boundary on the sequence's first dataset."""
    rep = manifest.aggregate()
    probe = manifest.config["sequence"].split("->")[0].split("/")[0].strip()
    recs = [r for r in rep.find(metric, probe=probe) if r["boundary"] is not None]
    if not recs:
        raise KeyError(f"{manifest.name}: no {metric} records")
    last = max(recs, key=lambda r: r["boundary"])
    return last["mean"], last["std"]


def table_report(manifests: list[RunManifest], schema: TableSchema = MAIN_GRID) -> str:
    """Format ``mean±std`` per cell, best **bold**, second best <u>underlined</u>.

    Ranking uses the displayed (one-decimal) means, so every cell tied for
    best is bolded and second best is the next distinct value. Cells without
    a completed run stay blank and are listed below the table.
    """
    index = {}
    for man in manifests:
        key = (man.config["objective"]["name"], man.config["strategy"]["name"], man.config["sequence"])
        index[key] = man
    cells: dict[tuple[int, int], tuple[float, float]] = {}
    missing = []
    for i, (obj, strat) in enumerate(schema.rows):
        for j, seq in enumerate(schema.columns):
            man = index.get((obj, strat, seq))
            if man is None or man.status != "complete":
                missing.append(f"{METHOD_LABELS.get(obj, obj)} / {STRATEGY_LABELS.get(strat, strat)} / {seq}")
                continue
            mean, std = final_value(man, schema.metric)
            cells[(i, j)] = (round(mean, 1), round(std, 1))

    emphasis = {}
    for j in range(len(schema.columns)):
        ranked = sorted({cells[(i, j)][0] for i in range(len(schema.rows)) if (i, j) in cells}, reverse=True)
        for i in range(len(schema.rows)):
            if (i, j) not in cells:
                continue
            v = cells[(i, j)][0]
            if ranked and v == ranked[0]:
                emphasis[(i, j)] = "best"
            elif len(ranked) > 1 and v == ranked[1]:
                emphasis[(i, j)] = "second"

    lines = ["| Method | CL strategy | " + " | ".join(schema.columns) + " |",
             "|---|---|" + "---|" * len(schema.columns)]
    prev_obj = None
    for i, (obj, strat) in enumerate(schema.rows):
        row = [METHOD_LABELS.get(obj, obj) if obj != prev_obj else "", STRATEGY_LABELS.get(strat, strat)]
        prev_obj = obj
        for j in range(len(schema.columns)):
            if (i, j) not in cells:
                row.append("")
                continue
            mean, std = cells[(i, j)]
            text = f"{mean:.1f}±{std:.1f}"
            if emphasis.get((i, j)) == "best":
                text = f"**{text}**"
            elif emphasis.get((i, j)) == "second":
                text = f"<u>{text}</u>"
            row.append(text)
        lines.append("| " + " | ".join(row) + " |")
    if missing:
        lines.append("")
        lines.append("Missing runs: " + "; ".join(missing))
    return "\n".join(lines) + "\n"
