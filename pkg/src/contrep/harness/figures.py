"""Figure emission from experiment manifests (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..evaluation.metrics import SpectrumRecord  # noqa: E402
from ..exceptions import MissingMetric  # noqa: E402
from .runner import RunManifest  # noqa: E402

METHOD_LABELS = {"sl": "SL", "sl_mlp": "SL+MLP", "trex": "t-ReX", "supcon": "SupCon",
                 "barlow": "BarlowTwins", "simclr": "SimCLR"}
STRATEGY_LABELS = {"finetune": "Finetune", "lwf": "LwF", "cassle": "CaSSLe", "pfr": "PFR"}


def method_label(manifest: RunManifest) -> str:
    cfg = manifest.config
    obj = METHOD_LABELS.get(cfg["objective"]["name"], cfg["objective"]["name"])
    strat = cfg["strategy"]["name"]
    return obj if strat == "finetune" else f"{obj} + {STRATEGY_LABELS.get(strat, strat)}"


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() else "-" for c in text).strip("-")


def _primary_probe(manifest: RunManifest) -> str:
    seq = manifest.config["sequence"]
    return seq.split("->")[0].split("/")[0].strip()


def accumulation_figure(manifests: list[RunManifest], probe: str | None = None):
    """Task-agnostic k-NN accuracy after each task, one curve per method."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for man in manifests:
        rep = man.aggregate()
        p = probe or _primary_probe(man)
        recs = sorted((r for r in rep.find("knn", probe=p) if r["boundary"] is not None),
                      key=lambda r: r["boundary"])
        if not recs:
            raise MissingMetric(f"{man.name}: no k-NN records for probe {p}")
        x = np.array([r["boundary"] + 1 for r in recs])
        y = np.array([r["mean"] for r in recs])
        err = np.array([r["std"] for r in recs])
        line, = ax.plot(x, y, marker="o", label=method_label(man))
        ax.fill_between(x, y - err, y + err, alpha=0.2, color=line.get_color())
    ax.set_xlabel("tasks learned")
    ax.set_ylabel("k-NN accuracy (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def spectra_figure(manifest: RunManifest, probe: str | None = None, seed_index: int = 0):
    """Cumulative explained variance per boundary, dashed lines at the 95% index."""
    reports = manifest.seed_reports()
    if not reports:
        raise MissingMetric(f"{manifest.name}: no per-seed reports")
    rep = reports[seed_index]
    p = probe or _primary_probe(manifest)
    recs = sorted(rep.find("var95_index", probe=p), key=lambda r: r["boundary"])
    if not recs:
        raise MissingMetric(f"{manifest.name}: no spectrum records for probe {p}")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for r in recs:
        spec = SpectrumRecord.from_dict(r["spectrum"])
        k = np.arange(1, len(spec.cumulative) + 1)
        line, = ax.plot(k, spec.cumulative, label=f"after task {r['boundary'] + 1}")
        ax.axvline(spec.var95_index, linestyle="--", color=line.get_color(), linewidth=1)
    ax.set_xscale("log")
    ax.set_xlabel("dimension")
    ax.set_ylabel("cumulative explained variance")
    ax.set_title(method_label(manifest))
    ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def nmc_figure(manifests: list[RunManifest], boundary: int = 1):
    """Grouped bars: NMC after task 1, with stale prototypes, with recomputed prototypes."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = ("nmc_after_t1", "nmc_stale", "nmc_upper")
    labels = ("after T1", "T2, old prototypes", "T2, recomputed (upper bound)")
    width = 0.25
    chance = None
    for i, man in enumerate(manifests):
        rep = man.aggregate()
        vals = []
        for j, metric in enumerate(names):
            b = 0 if metric == "nmc_after_t1" else boundary
            recs = rep.find(metric, boundary=b)
            if not recs:
                raise MissingMetric(f"{man.name}: no {metric} at boundary {b}")
            vals.append(recs[0]["mean"])
        for j, v in enumerate(vals):
            ax.bar(i + (j - 1) * width, v, width, color=f"C{j}", label=labels[j] if i == 0 else None)
        seed_recs = man.seed_reports()[0].find("nmc_after_t1", boundary=0)
        chance = seed_recs[0].get("chance") if seed_recs else chance
    if chance is not None:
        ax.axhline(chance, linestyle=":", color="gray")
    ax.set_xticks(range(len(manifests)), [method_label(m) for m in manifests], fontsize=7)
    ax.set_ylabel("task-aware NMC accuracy (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def emit_figures(manifests: list[RunManifest], out_dir) -> list[Path]:
    """Write accumulation, spectra and NMC figures; file names depend only on the inputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    by_sequence: dict[str, list[RunManifest]] = {}
    for man in manifests:
        by_sequence.setdefault(man.config["sequence"], []).append(man)
    for seq, group in sorted(by_sequence.items()):
        fig = accumulation_figure(group)
        path = out / f"accumulation_{_slug(seq)}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
        if all(len(m.aggregate().find("nmc_stale")) for m in group):
            fig = nmc_figure(group)
            path = out / f"nmc_{_slug(seq)}.png"
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)
    for man in manifests:
        fig = spectra_figure(man)
        path = out / f"spectra_{_slug(man.name)}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
