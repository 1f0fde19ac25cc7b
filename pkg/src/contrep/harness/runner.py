"""Run execution, boundary evaluation, persistence and cross-run comparison.

Artifacts of one experiment live under ``{output_dir}``::

    {name}/manifest.json          experiment manifest (all seeds)
    {name}/report.json            mean/std over seeds
    {name}-seed{s}/task{t}.ckpt   per-boundary checkpoints
    {name}-seed{s}/report.json    per-seed MetricReport
    {name}-seed{s}/train_log.jsonl
    {name}-seed{s}/embeddings/    embedding dumps
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..data.registry import get_dataset_info, load_split
from ..data.streams import CLASS_INCREMENTAL, TaskSequence
from ..evaluation.embeddings import compute_embeddings, save_embeddings
from ..evaluation.metrics import (EmbeddingMatrix, knn_accuracy, linear_cka, nmc_accuracy, compute_prototypes,
                                  nmc_stability_protocol, spectrum)
from ..evaluation.report import MetricReport
from ..exceptions import MissingMetric, MissingRun
from ..models.encoder import FrozenSnapshot, load_checkpoint, snapshot
from ..training import StopRun, run_sequence
from .config import ExperimentConfig, config_from_dict

logger = logging.getLogger(__name__)

PCT = 100.0


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class SeedRun:
    seed: int
    run_id: str
    directory: str
    checkpoints: list[str] = field(default_factory=list)
    embeddings: list[str] = field(default_factory=list)
    report: str | None = None
    log: str | None = None
    wall_clock: dict[str, float] = field(default_factory=dict)
    digests: dict[str, str] = field(default_factory=dict)
    status: str = "pending"
    error: str | None = None


@dataclass
class RunManifest:
    name: str
    config: dict
    code_version: str
    output_dir: str
    runs: list[SeedRun] = field(default_factory=list)
    report: str | None = None
    status: str = "pending"

    @property
    def path(self) -> Path:
        return Path(self.output_dir) / self.name / "manifest.json"

    def experiment_config(self) -> ExperimentConfig:
        return config_from_dict(self.config)

    def seed_reports(self) -> list[MetricReport]:
        return [MetricReport.load(r.report) for r in self.runs if r.report and Path(r.report).exists()]

    def aggregate(self) -> MetricReport:
        if not self.report or not Path(self.report).exists():
            raise MissingRun(f"experiment {self.name!r} has no aggregate report")
        return MetricReport.load(self.report)

    def save(self) -> Path:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        payload = asdict(self)
        self.path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return self.path

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        if not path.exists():
            raise MissingRun(f"no manifest at {path}")
        d = json.loads(path.read_text(encoding="utf-8"))
        runs = [SeedRun(**r) for r in d.pop("runs")]
        return cls(runs=runs, **d)

    def verify(self) -> list[str]:
        """Paths that are missing or whose digest no longer matches."""
        problems = []
        for run in self.runs:
            for p, digest in run.digests.items():
                if not Path(p).exists():
                    problems.append(f"missing: {p}")
                elif sha256_file(p) != digest:
                    problems.append(f"digest mismatch: {p}")
        return problems


# -- probe data -------------------------------------------------------------------

class ProbeData:
    """Cached train/test arrays for the evaluation datasets of an experiment."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self._cache = {}

    def split(self, name: str, split: str):
        key = (name, split)
        if key not in self._cache:
            per_class = self.config.data.train_per_class if split == "train" else self.config.data.test_per_class
            self._cache[key] = load_split(name, split, root=self.config.data.root, per_class=per_class,
                                          seed=self.config.data.subsample_seed)
        return self._cache[key]

    def embed(self, snap: FrozenSnapshot, name: str, split: str, source: dict) -> EmbeddingMatrix:
        data = self.split(name, split)
        info = get_dataset_info(name)
        return compute_embeddings(snap, data.images, data.labels, info.mean, info.std,
                                  batch_size=self.config.eval.batch_size,
                                  source={**source, "probe": name, "split": split})


def _cka_subsample(n: int, cap: int, seed: int) -> np.ndarray:
    if n <= cap:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=cap, replace=False))


class BoundaryEvaluator:
    """Boundary hook computing every per-run metric.

    Probe labels stay in each dataset's local label space; class-split task
    classes are mapped back through the task's label offset.
    """

    def __init__(self, config: ExperimentConfig, sequence: TaskSequence, probes: ProbeData, run_dir: Path | None,
                 run_id: str):
        self.config = config
        self.sequence = sequence
        self.probes = probes
        self.run_dir = run_dir
        self.run_id = run_id
        self.first_embeddings: dict[tuple[str, str], EmbeddingMatrix] = {}
        self.dumps: list[Path] = []

    def _local_classes(self, task_index: int) -> np.ndarray:
        return self.sequence[task_index].local_class_ids()

    def __call__(self, report: MetricReport, boundary: int, snap: FrozenSnapshot, first: FrozenSnapshot) -> None:
        ev = self.config.eval
        source = {"run_id": self.run_id, "boundary": boundary}
        for probe in self.config.probe_datasets:
            train = self.probes.embed(snap, probe, "train", source)
            test = self.probes.embed(snap, probe, "test", source)
            if boundary == 0:
                self.first_embeddings[(probe, "train")] = train
                self.first_embeddings[(probe, "test")] = test
            report.add("knn", PCT * knn_accuracy(train, test, ev.k, ev.temperature), boundary, probe)

            if ev.task_aware and self.sequence.kind == CLASS_INCREMENTAL and probe == self.sequence[0].dataset_name:
                for j in range(len(self.sequence)):
                    cls = self._local_classes(j)
                    tr, te = train.restrict_to(cls), test.restrict_to(cls)
                    acc = knn_accuracy(tr, te, min(ev.k, len(tr)), ev.temperature)
                    report.add("knn_task", PCT * acc, boundary, probe, task=j)

            spec_emb = test if ev.spectra_split == "test" else train
            rec = spectrum(spec_emb)
            report.add("var95_index", rec.var95_index, boundary, probe, spectrum=rec.to_dict(),
                       split=ev.spectra_split)

            first_test = self.first_embeddings[(probe, "test")]
            idx = _cka_subsample(len(test), ev.cka_max_samples, ev.cka_seed)
            report.add("cka_vs_first", linear_cka(first_test.features[idx], test.features[idx]), boundary, probe)

            if ev.dump_embeddings != "none" and self.run_dir is not None:
                todo = [("test", test)] + ([("train", train)] if ev.dump_embeddings == "all" else [])
                for split, emb in todo:
                    stem = self.run_dir / "embeddings" / f"b{boundary}_{probe}_{split}"
                    npz, side = save_embeddings(stem, emb, {"backbone_config_hash": self._backbone_hash(snap)})
                    self.dumps.extend([npz, side])

        if ev.nmc:
            self._nmc(report, boundary, snap)

    def _backbone_hash(self, snap: FrozenSnapshot) -> str:
        from ..evaluation.embeddings import config_hash

        return config_hash(snap.model.describe()["encoder"])

    def _nmc(self, report: MetricReport, boundary: int, snap: FrozenSnapshot) -> None:
        first_task = self.sequence[0]
        probe = first_task.dataset_name
        cls = self._local_classes(0)
        t1_train = self.first_embeddings[(probe, "train")].restrict_to(cls)
        t1_test = self.first_embeddings[(probe, "test")].restrict_to(cls)
        if boundary == 0:
            acc = nmc_accuracy(t1_test, compute_prototypes(t1_train))
            report.add("nmc_after_t1", PCT * acc, boundary, probe, chance=PCT / len(cls))
            return
        source = {"run_id": self.run_id, "boundary": boundary}
        t2_train = self.probes.embed(snap, probe, "train", source).restrict_to(cls)
        t2_test = self.probes.embed(snap, probe, "test", source).restrict_to(cls)
        res = nmc_stability_protocol(t1_train, t1_test, t2_train, t2_test)
        report.add("nmc_after_t1", PCT * res.acc_after_t1, boundary, probe, chance=PCT / len(cls))
        report.add("nmc_stale", PCT * res.acc_stale, boundary, probe, chance=PCT / len(cls))
        report.add("nmc_upper", PCT * res.acc_upper, boundary, probe, chance=PCT / len(cls),
                   ordering_violated=bool(res.ordering_violated))


def add_forgetting(report: MetricReport, sequence: TaskSequence) -> None:
    """Forgetting per task (class split) or per dataset (shift) from stored accuracies."""
    final = len(sequence) - 1
    if final == 0:
        return
    if sequence.kind == CLASS_INCREMENTAL:
        probe = sequence[0].dataset_name
        for j in range(final):
            recs_own = [r for r in report.find("knn_task", j, probe) if r.get("task") == j]
            recs_end = [r for r in report.find("knn_task", final, probe) if r.get("task") == j]
            if recs_own and recs_end:
                report.add_derived("forgetting", probe=probe, boundary=final, task=j,
                                   acc_after_own_task=recs_own[-1]["value"],
                                   acc_after_final=recs_end[-1]["value"])
    else:
        for j in range(final):
            probe = sequence[j].dataset_name
            report.add_derived("forgetting", probe=probe, boundary=final, task=j,
                               acc_after_own_task=report.get("knn", j, probe),
                               acc_after_final=report.get("knn", final, probe))


def aggregate_reports(name: str, reports: list[MetricReport], meta: dict) -> MetricReport:
    """Mean and std over seeds for every scalar (metric, boundary, probe, task) record."""
    groups: dict[tuple, list[float]] = {}
    for rep in reports:
        for rec in rep.records:
            if isinstance(rec["value"], (int, float)) and not isinstance(rec["value"], bool):
                key = (rec["metric"], rec["boundary"], rec["probe"], rec.get("task"))
                groups.setdefault(key, []).append(float(rec["value"]))
    out = MetricReport(run_id=name, meta=meta)
    for (metric, boundary, probe, task), values in groups.items():
        arr = np.asarray(values)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        extra = {"task": task} if task is not None else {}
        out.add(metric, float(arr.mean()), boundary, probe, mean=float(arr.mean()), std=std, n=len(arr),
                values=values, **extra)
    return out


def _run_seed(config: ExperimentConfig, seed: int, run: SeedRun, resume: bool, stop_after: int | None,
              probes: ProbeData) -> MetricReport:
    run_dir = Path(run.directory)
    run_dir.mkdir(parents=True, exist_ok=True)
    sequence = config.task_sequence()
    evaluator = BoundaryEvaluator(config, sequence, probes, run_dir, run.run_id)
    timer = {"last": time.perf_counter()}

    def clock(report, boundary, snap, first):
        now = time.perf_counter()
        run.wall_clock[f"task{boundary}"] = round(now - timer["last"], 3)
        timer["last"] = now

    log_path = run_dir / "train_log.jsonl"
    result = run_sequence(
        sequence, config.objective, config.strategy, config.loop_for_seed(seed),
        encoder=config.encoder, projector=config.projector, hooks=[clock, evaluator],
        data_root=config.data.root, per_class=config.data.train_per_class,
        checkpoint_dir=run_dir, resume=resume, log_path=log_path, run_id=run.run_id,
        config_echo=config.to_dict(), stop_after=stop_after,
    )
    report = result.report
    report.meta = {"config_digest": config.digest(), "seed": seed, "sequence": config.sequence,
                   "objective": config.objective.name, "strategy": config.strategy.name,
                   "num_boundaries": len(sequence)}
    add_forgetting(report, sequence)
    report_path = report.save(run_dir / "report.json")
    run.checkpoints = [str(p) for p in result.checkpoints]
    run.embeddings = [str(p) for p in evaluator.dumps]
    run.report = str(report_path)
    run.log = str(log_path)
    run.digests = {p: sha256_file(p) for p in [*run.checkpoints, *run.embeddings, run.report, run.log]}
    run.status = "complete"
    return report


def run(config: ExperimentConfig, resume: bool = True, stop_after: int | None = None) -> RunManifest:
    """Execute every seed of ``config``; persist checkpoints, reports and the manifest.

    On failure the manifest is still written (status ``failed``) with whatever
    completed, then the exception propagates.
    """
    out = Path(config.output_dir)
    name = config.run_name
    manifest = RunManifest(name=name, config=config.to_dict(), code_version=__version__, output_dir=str(out))
    probes = ProbeData(config)
    reports = []
    try:
        for seed in config.seeds:
            run_id = f"{name}-seed{seed}"
            seed_run = SeedRun(seed=seed, run_id=run_id, directory=str(out / run_id))
            manifest.runs.append(seed_run)
            try:
                reports.append(_run_seed(config, seed, seed_run, resume, stop_after, probes))
            except BaseException as exc:
                seed_run.status = "failed"
                seed_run.error = "".join(traceback.format_exception_only(type(exc), exc)).strip()
                seed_run.checkpoints = sorted(str(p) for p in Path(seed_run.directory).glob("task*.ckpt"))
                raise
        agg = aggregate_reports(name, reports, {"config_digest": config.digest(), "seeds": list(config.seeds)})
        manifest.report = str(agg.save(out / name / "report.json"))
        manifest.status = "complete"
    except StopRun:
        manifest.status = "interrupted"
        raise
    except BaseException:
        manifest.status = "failed"
        raise
    finally:
        manifest.save()
    return manifest


# -- standalone evaluation ----------------------------------------------------------

def evaluate_checkpoint(ckpt, config: ExperimentConfig, probes: list[str] | None = None) -> MetricReport:
    """k-NN and spectrum of one checkpoint on the given probe datasets."""
    model, meta = load_checkpoint(ckpt)
    snap = snapshot(model)
    data = ProbeData(config)
    report = MetricReport(run_id=str(meta.get("run_id", "")), meta={"checkpoint": str(ckpt)})
    boundary = meta.get("task")
    for probe in probes or config.probe_datasets:
        train = data.embed(snap, probe, "train", {})
        test = data.embed(snap, probe, "test", {})
        report.add("knn", PCT * knn_accuracy(train, test, config.eval.k, config.eval.temperature), boundary, probe)
        rec = spectrum(test if config.eval.spectra_split == "test" else train)
        report.add("var95_index", rec.var95_index, boundary, probe, spectrum=rec.to_dict())
    return report


def _final_knn(report: MetricReport, probe: str) -> float:
    final = max(r["boundary"] for r in report.find("knn") if r["boundary"] is not None)
    return report.get("knn", final, probe)


def compare_runs(run_a: RunManifest, run_b: RunManifest, probe: str, kinds=("cka", "ft", "exc")) -> MetricReport:
    """Cross-run metrics on ``probe`` between final checkpoints, paired by seed order.

    ``ft``: run A is pretrain-then-task, run B trains the task from scratch.
    ``exc``: run A includes the task in its sequence, run B excludes it.
    ``cka``: linear CKA of final backbones on the probe's test split.
    """
    out = MetricReport(run_id=f"{run_a.name}__vs__{run_b.name}",
                       meta={"run_a": run_a.name, "run_b": run_b.name, "probe": probe})
    reps_a, reps_b = run_a.seed_reports(), run_b.seed_reports()
    if not reps_a or not reps_b:
        raise MissingRun("both runs need completed per-seed reports")
    cfg_a = run_a.experiment_config()
    data = ProbeData(cfg_a)
    for i, (ra, rb) in enumerate(zip(reps_a, reps_b)):
        if "ft" in kinds:
            out.add_derived("forward_transfer", probe=probe, pair=i,
                            acc_with_pretraining=_final_knn(ra, probe), acc_from_scratch=_final_knn(rb, probe))
        if "exc" in kinds:
            out.add_derived("exclusion_difference", probe=probe, pair=i,
                            acc_with_task=_final_knn(ra, probe), acc_without_task=_final_knn(rb, probe))
        if "cka" in kinds:
            snaps = []
            for man in (run_a, run_b):
                if not man.runs[i].checkpoints:
                    raise MissingRun(f"{man.name} seed run {i} has no checkpoints")
                model, _ = load_checkpoint(man.runs[i].checkpoints[-1])
                snaps.append(snapshot(model))
            ea = data.embed(snaps[0], probe, "test", {})
            eb = data.embed(snaps[1], probe, "test", {})
            idx = _cka_subsample(len(ea), cfg_a.eval.cka_max_samples, cfg_a.eval.cka_seed)
            out.add("cka", linear_cka(ea.features[idx], eb.features[idx]), None, probe, pair=i)
    return out


def require_metric(report: MetricReport, metric: str) -> list[dict]:
    recs = report.find(metric)
    if not recs:
        raise MissingMetric(f"report {report.run_id!r} has no {metric!r} records")
    return recs
