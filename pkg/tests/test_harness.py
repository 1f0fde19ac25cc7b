import json
from pathlib import Path

import pytest
import yaml

from contrep.exceptions import MissingMetric, ValidationError
from contrep.harness import PROFILES, RunManifest, config_from_dict, load_config, run, save_config
from contrep.harness.cli import main
from contrep.harness.figures import emit_figures, spectra_figure
from contrep.harness.runner import compare_runs
from contrep.harness.tables import MAIN_GRID, TableSchema, table_report
from contrep.training import StopRun

from conftest import tiny_run_config


# -- config --------------------------------------------------------------------

def test_table_cell_config_is_valid():
    cfg = config_from_dict({"sequence": "C100/5", "objective": "sl_mlp", "strategy": "pfr"})
    assert cfg.profile == "desk" and cfg.loop.epochs_first == 30 and cfg.loop.epochs_rest == 20
    assert cfg.data.train_per_class == 200
    assert cfg.seeds == (0, 1, 2)
    assert cfg.encoder.input_size == 32 and cfg.encoder.feature_dim == 512


def test_full_profile_defaults():
    cfg = config_from_dict({"sequence": "C100/5", "objective": "sl", "profile": "full"})
    assert (cfg.loop.epochs_first, cfg.loop.epochs_rest) == (200, 100)
    assert cfg.data.train_per_class is None
    assert set(PROFILES) == {"full", "desk", "custom"}


@pytest.mark.parametrize("raw,field", [
    ({"sequence": "C100/5", "objective": "barlow", "strategy": "lwf"}, "strategy.name"),
    ({"sequence": "C100/5", "objective": "sl", "strategy": "cassle"}, "strategy.name"),
    ({"sequence": "C10/3"}, "sequence"),
    ({"sequence": "C10->IN100"}, "sequence"),
    ({"objective": "sl"}, "sequence"),
    ({"sequence": "C10/2", "colour": 1}, "colour"),
    ({"sequence": "C10/2", "loop": {"epochz": 3}}, "loop.epochz"),
    ({"sequence": "C10/2", "loop": {"epochs_first": -1}}, "loop"),
    ({"sequence": "C10/2", "eval": {"probes": ["MNIST"]}}, "eval.probes"),
    ({"sequence": "C10/2", "seeds": [1, 1]}, "seeds"),
    ({"sequence": "C10/2", "profile": "huge"}, "profile"),
    ({"sequence": "C10/2", "objective": {"name": "simclr", "temperature": -1}}, "objective"),
])
def test_validation_errors(raw, field):
    with pytest.raises(ValidationError) as info:
        config_from_dict(raw)
    assert field in info.value.errors


def test_validation_lists_every_field():
    with pytest.raises(ValidationError) as info:
        config_from_dict({"sequence": "C10/3", "objective": "barlow", "strategy": "lwf", "extra": 1})
    assert {"sequence", "strategy.name", "extra"} <= set(info.value.errors)


def test_round_trip(tmp_path):
    cfg = config_from_dict({"sequence": "C10->SVHN", "objective": {"name": "supcon", "temperature": 0.1},
                            "strategy": {"name": "cassle"}, "seeds": [4, 5], "eval": {"probes": ["C100"]}})
    again = config_from_dict(yaml.safe_load(cfg.to_yaml()))
    assert again == cfg
    assert load_config(save_config(cfg, tmp_path / "c.yaml")) == cfg
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.json") == cfg
    assert cfg.probe_datasets == ["C10", "SVHN", "C100"]


def test_digest_ignores_output_location():
    a = config_from_dict({"sequence": "C10/2", "output_dir": "a"})
    b = config_from_dict({"sequence": "C10/2", "output_dir": "b"})
    c = config_from_dict({"sequence": "C10/2", "objective": "trex"})
    assert a.digest() == b.digest() != c.digest()


def test_load_config_errors(tmp_path):
    with pytest.raises(ValidationError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("sequence: [unclosed")
    with pytest.raises(ValidationError):
        load_config(tmp_path / "bad.yaml")


# -- run ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("finished")
    cfg = config_from_dict(tiny_run_config(tmp, name="tiny"))
    return cfg, run(cfg)


def test_manifest_counts(finished):
    cfg, man = finished
    assert man.status == "complete" and len(man.runs) == 2
    for seed_run in man.runs:
        assert [Path(p).name for p in seed_run.checkpoints] == ["task0.ckpt", "task1.ckpt"]
        assert len(seed_run.embeddings) == 4  # npz + sidecar per boundary
        assert set(seed_run.wall_clock) == {"task0", "task1"}
    assert man.verify() == []
    assert Path(man.path).exists() and RunManifest.load(man.path).config == man.config


def test_aggregate_has_mean_and_std(finished):
    _, man = finished
    agg = man.aggregate()
    for rec in agg.find("knn"):
        assert {"mean", "std", "n", "values"} <= set(rec) and rec["n"] == 2
        assert 0.0 <= rec["mean"] <= 100.0
    assert agg.boundaries == [0, 1]


def test_seed_report_contents(finished):
    _, man = finished
    rep = man.seed_reports()[0]
    assert len(rep.find("knn", probe="DIGITS")) == 2
    assert len(rep.find("knn_task", boundary=1)) == 2
    assert rep.get("cka_vs_first", boundary=0) == pytest.approx(1.0)
    assert {"nmc_after_t1", "nmc_stale", "nmc_upper"} <= {r["metric"] for r in rep.records}
    assert rep.find("forgetting") and rep.verify_identities() == []


def test_manifest_verify_detects_tampering(tmp_path):
    cfg = config_from_dict(tiny_run_config(tmp_path, seeds=[0], loop={"epochs_first": 0, "epochs_rest": 0}))
    man = run(cfg)
    Path(man.runs[0].report).write_text("{}")
    Path(man.runs[0].checkpoints[0]).unlink()
    problems = man.verify()
    assert any(p.startswith("digest mismatch") for p in problems)
    assert any(p.startswith("missing") for p in problems)


def test_rerun_is_byte_identical(finished, tmp_path):
    cfg, man = finished
    raw = tiny_run_config(tmp_path, name="tiny")
    again = run(config_from_dict(raw), resume=False)
    assert Path(again.report).read_bytes() == Path(man.report).read_bytes()
    for a, b in zip(man.runs, again.runs):
        assert Path(a.report).read_bytes() == Path(b.report).read_bytes()


def test_interrupt_and_resume(finished, tmp_path):
    _, man = finished
    cfg = config_from_dict(tiny_run_config(tmp_path, name="tiny"))
    with pytest.raises(StopRun):
        run(cfg, stop_after=0)
    partial = RunManifest.load(tmp_path / "runs" / "tiny")
    assert partial.status == "interrupted"
    assert [Path(p).name for p in partial.runs[0].checkpoints] == ["task0.ckpt"]
    resumed = run(cfg)
    assert resumed.status == "complete"
    assert Path(resumed.report).read_bytes() == Path(man.report).read_bytes()
    log = Path(resumed.runs[0].log).read_text().splitlines()
    assert log == Path(man.runs[0].log).read_text().splitlines()


def test_failed_run_salvages_manifest(tmp_path):
    cfg = config_from_dict(tiny_run_config(tmp_path, sequence="C10/2", seeds=[0],
                                           data={"root": str(tmp_path / "nothing")}))
    with pytest.raises(FileNotFoundError):
        run(cfg)
    man = RunManifest.load(Path(cfg.output_dir) / cfg.run_name)
    assert man.status == "failed" and "FileNotFoundError" in man.runs[0].error


# -- figures / tables / comparisons -----------------------------------------------

def test_emit_figures(finished, tmp_path):
    _, man = finished
    paths = emit_figures([man], tmp_path / "figs")
    names = sorted(p.name for p in paths)
    assert names == ["accumulation_DIGITS-2.png", "nmc_DIGITS-2.png", "spectra_tiny.png"]
    assert all(p.stat().st_size > 0 for p in paths)


def test_accumulation_has_one_point_per_boundary(finished):
    from contrep.harness.figures import accumulation_figure
    _, man = finished
    fig = accumulation_figure([man])
    (line,) = fig.axes[0].get_lines()
    assert list(line.get_xdata()) == [1, 2]


def test_spectra_dashed_line_at_var95(finished):
    _, man = finished
    fig = spectra_figure(man)
    ax = fig.axes[0]
    expected = [r["value"] for r in man.seed_reports()[0].find("var95_index", probe="DIGITS")]
    dashed = [ln for ln in ax.get_lines() if ln.get_linestyle() == "--"]
    assert sorted(ln.get_xdata()[0] for ln in dashed) == sorted(expected)


def test_nmc_figure_bars_and_chance(finished):
    from contrep.harness.figures import nmc_figure
    _, man = finished
    fig = nmc_figure([man])
    ax = fig.axes[0]
    assert len(ax.patches) == 3
    assert any(ln.get_linestyle() == ":" for ln in ax.get_lines())


def test_figures_missing_metric(tmp_path, finished):
    _, man = finished
    broken = RunManifest.load(man.path)
    broken.report = str(tmp_path / "empty.json")
    Path(broken.report).write_text(json.dumps({"schema": 1, "run_id": "x", "meta": {}, "records": []}))
    with pytest.raises(MissingMetric):
        emit_figures([broken], tmp_path / "f")


def _fake_manifest(tmp_path, objective, strategy, value, sequence="C100/5"):
    name = f"{objective}-{strategy}"
    report = {"schema": 1, "run_id": name, "meta": {}, "records": [
        {"metric": "knn", "boundary": 4, "probe": "C100", "value": value, "mean": value, "std": 0.25, "n": 3}]}
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(report))
    return RunManifest(name=name, config={"sequence": sequence, "objective": {"name": objective},
                                          "strategy": {"name": strategy}},
                       code_version="0", output_dir=str(tmp_path), report=str(path), status="complete")


def test_table_bold_and_underline(tmp_path):
    mans = [_fake_manifest(tmp_path, "sl", "finetune", 38.5), _fake_manifest(tmp_path, "sl_mlp", "finetune", 61.9),
            _fake_manifest(tmp_path, "sl_mlp", "pfr", 63.6)]
    text = table_report(mans, TableSchema(MAIN_GRID.rows, ("C100/5",)))
    assert "**63.6±0.2**" in text
    assert "<u>61.9±" in text
    assert "38.5±" in text and "**38.5" not in text
    assert len([ln for ln in text.splitlines() if ln.startswith("| ") and "---" not in ln]) == 19
    assert "Missing runs:" in text and "SL / LwF / C100/5" in text


def test_table_ties_all_bold(tmp_path):
    mans = [_fake_manifest(tmp_path, "sl", "finetune", 50.0), _fake_manifest(tmp_path, "sl", "lwf", 50.04)]
    schema = TableSchema((("sl", "finetune"), ("sl", "lwf")), ("C100/5",))
    text = table_report(mans, schema)
    assert text.count("**50.0±") == 2 and "<u>" not in text
    assert "Missing" not in text


def test_compare_runs(finished, tmp_path):
    _, man = finished
    rep = compare_runs(man, man, "DIGITS")
    assert {r["metric"] for r in rep.records} == {"forward_transfer", "exclusion_difference", "cka"}
    assert all(r["value"] == 0.0 for r in rep.find("forward_transfer"))
    assert all(r["value"] == pytest.approx(1.0) for r in rep.find("cka"))
    assert rep.verify_identities() == []


# -- CLI ------------------------------------------------------------------------------

def test_cli_validate_ok(capsys):
    assert main(["validate", "--sequence", "C100/5", "--objective", "sl_mlp", "--strategy", "pfr"]) == 0
    out = yaml.safe_load(capsys.readouterr().out)
    assert out["strategy"]["name"] == "pfr" and out["loop"]["epochs_first"] == 30


def test_cli_validation_exit_code(capsys):
    assert main(["validate", "--sequence", "C100/5", "--objective", "barlow", "--strategy", "lwf"]) == 1
    assert "strategy.name" in capsys.readouterr().err


def test_cli_runtime_exit_code(tmp_path, capsys):
    code = main(["run", "--sequence", "C10/2", "--profile", "custom", "--set", f"data.root={tmp_path}",
                 "--set", "loop.epochs_first=0", "--set", "loop.epochs_rest=0", "--seeds", "0",
                 "--output-dir", str(tmp_path / "runs")])
    assert code == 2 and "FileNotFoundError" in capsys.readouterr().err


def test_cli_end_to_end(tmp_path, capsys):
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text(yaml.safe_dump(tiny_run_config(tmp_path, seeds=[0], name="cli")))
    assert main(["run", str(cfg_path)]) == 0
    manifest = capsys.readouterr().out.strip()
    assert Path(manifest).name == "manifest.json"
    assert main(["figures", manifest, "--out", str(tmp_path / "figs")]) == 0
    assert main(["table", manifest, "--columns", "DIGITS/2", "--out", str(tmp_path / "t.md")]) == 0
    assert "SL+MLP" in (tmp_path / "t.md").read_text()
    ckpt = tmp_path / "runs" / "cli-seed0" / "task1.ckpt"
    assert main(["eval", "--checkpoint", str(ckpt), "--config", str(cfg_path), "--out",
                 str(tmp_path / "e.json")]) == 0
    assert json.loads((tmp_path / "e.json").read_text())["records"][0]["metric"] == "knn"
    assert main(["eval", "--run", manifest, "--against", manifest, "--probe", "DIGITS", "--kinds", "ft"]) == 0
    assert main(["eval"]) == 1
