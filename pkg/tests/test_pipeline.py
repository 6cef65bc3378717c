import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

import skyforge.pipeline as pl
from skyforge.cli import main
from skyforge.dataset import BoxScene, DatasetManifest, Ground, TrajectorySpec, export_dataset, load_png
from skyforge.sugar import init_from_depth

from _helpers import tiny_pipeline_config

REPO = Path(__file__).resolve().parents[1]


def _write_cfg(path, cfg):
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "run"
    cfg = pl.PipelineConfig.from_dict(tiny_pipeline_config(root))
    results = pl.run_all(cfg)
    return cfg, results


def _copy_run(cfg, dst):
    shutil.copytree(cfg.root, dst)
    d = cfg.to_dict()
    d["root"] = str(dst)
    return pl.PipelineConfig.from_dict(d)


# -- config ------------------------------------------------------------------------


def test_config_defaults_and_relative_root(tmp_path):
    path = _write_cfg(tmp_path / "p.json", {"schema_version": 1, "root": "out"})
    cfg = pl.PipelineConfig.load(path)
    assert cfg.root == (tmp_path / "out").resolve()
    assert cfg.sections["vcm"]["frames"] == 12
    assert set(cfg.sections) == set(pl.DEFAULTS)


@pytest.mark.parametrize("bad", [
    {"root": "x"},
    {"schema_version": 2, "root": "x"},
    {"schema_version": 1},
    {"schema_version": 1, "root": "x", "bogus": {}},
    {"schema_version": 1, "root": "x", "fit": {"config": {"iterations": 0}}},
    {"schema_version": 1, "root": "x", "codec": {"nope": 1}},
    {"schema_version": 1, "root": "x", "data": {"scenes": 1}},
])  # fmt: skip
def test_config_errors(tmp_path, bad):
    with pytest.raises(pl.ConfigError):
        pl.PipelineConfig.from_dict(bad, base_dir=tmp_path)


def test_stage_seeds_are_derived_and_distinct():
    seeds = [pl.stage_seed(7, s) for s in pl.STAGES]
    assert len(set(seeds)) == len(seeds)
    assert seeds == [pl.stage_seed(7, s) for s in pl.STAGES]
    assert pl.stage_seed(8, "infer") != pl.stage_seed(7, "infer")


def test_stage_graph_is_linear_and_backward_only():
    assert len(pl.STAGES) == 9
    for i, s in enumerate(pl.STAGES):
        assert all(pl.STAGES.index(d) < i for d in pl.STAGE_INPUTS[s])
    assert set(pl.STAGE_DIRS.values()) == {"dataset", "scene", "priors", "codec", "ldm", "acm", "vcm", "outputs",
                                            "reports"}


# -- run_stage -----------------------------------------------------------------------


def test_missing_prerequisite_names_stage(tmp_path):
    cfg = pl.PipelineConfig.from_dict(tiny_pipeline_config(tmp_path / "run"))
    with pytest.raises(pl.MissingInputError, match="train-vcm"):
        pl.run_stage("infer", cfg)


def test_infer_before_train_vcm_names_train_vcm(tiny_run, tmp_path):
    cfg = _copy_run(tiny_run[0], tmp_path / "run")
    shutil.rmtree(cfg.stage_dir("train-vcm"))
    with pytest.raises(pl.MissingInputError) as e:
        pl.run_stage("infer", cfg)
    assert "train-vcm" in str(e.value) and "gen-data" not in str(e.value)


def test_run_all_writes_layout_and_ledger(tiny_run):
    cfg, results = tiny_run
    assert [r.stage for r in results] == pl.STAGES
    assert all(r.status == "ok" for r in results)
    for d in pl.STAGE_DIRS.values():
        assert (cfg.root / d).is_dir()
    entries = pl.RunLedger(cfg.root / "ledger.jsonl").entries()
    for e in entries[: len(pl.STAGES)]:
        assert {"stage", "status", "config_hash", "input_hashes", "output_hash", "seed", "wall_time_s"} <= set(e)
        assert e["output_hash"] == pl.hash_dir(cfg.stage_dir(e["stage"]))
        assert set(e["input_hashes"]) == set(pl.STAGE_INPUTS[e["stage"]])
    report = json.loads((cfg.root / "reports" / "report.json").read_text())
    assert set(report["methods"]) == {"vcm", "acm"}
    assert set(report["methods"]["vcm"]) == {"seed_0", "seed_1"}


def test_stage_run_restores_float_state(tiny_run):
    # flushing denormals is process-wide; it must not leak past a stage
    assert sys.float_info.min / 2 > 0.0
    assert torch.are_deterministic_algorithms_enabled() is False


def test_rerun_is_up_to_date_and_ledger_appends(tiny_run, tmp_path):
    cfg = _copy_run(tiny_run[0], tmp_path / "run")
    ledger = pl.RunLedger(cfg.root / "ledger.jsonl")
    before = ledger.path.read_text()
    r = pl.run_stage("gen-data", cfg)
    assert r.status == "up-to-date"
    after = ledger.path.read_text()
    assert after.startswith(before) and len(after.splitlines()) == len(before.splitlines()) + 1


def test_config_change_reruns_stage(tiny_run, tmp_path):
    cfg = _copy_run(tiny_run[0], tmp_path / "run")
    cfg.sections["evaluate"]["extractor_seed"] = 5
    assert pl.run_stage("evaluate", cfg).status == "ok"
    assert json.loads((cfg.root / "reports" / "report.json").read_text())["extractor_seed"] == 5


def test_changed_input_is_stale(tiny_run, tmp_path):
    cfg = _copy_run(tiny_run[0], tmp_path / "run")
    img = next((cfg.root / "dataset").rglob("*.png"))
    img.write_bytes(img.read_bytes() + b"\0")
    with pytest.raises(pl.StaleInputError, match="gen-data"):
        pl.run_stage("fit-scene", cfg)


def test_undeclared_read_is_rejected(tiny_run, tmp_path, monkeypatch):
    cfg = _copy_run(tiny_run[0], tmp_path / "run")

    def sneaky(ctx):
        (ctx.cfg.root / "scene" / "scene_000.bin").read_bytes()

    monkeypatch.setitem(pl.STAGE_FUNCS, "train-codec", sneaky)
    with pytest.raises(pl.AuditError):
        pl.run_stage("train-codec", cfg, force=True)
    # the failed stage leaves the previous outputs in place
    assert (cfg.root / "codec" / "codec.skyw").exists()


def test_declared_reads_pass_audit(tiny_run, tmp_path, monkeypatch):
    cfg = _copy_run(tiny_run[0], tmp_path / "run")
    seen = []

    def honest(ctx):
        seen.append(len((ctx.input_dir("gen-data") / "manifest.json").read_bytes()))
        (ctx.out / "x").write_text("1")

    monkeypatch.setitem(pl.STAGE_FUNCS, "train-codec", honest)
    assert pl.run_stage("train-codec", cfg, force=True).status == "ok"
    assert seen and seen[0] > 0


# -- CLI -----------------------------------------------------------------------------


def test_cli_exit_codes(tiny_run, tmp_path, monkeypatch, capsys):
    cfg_path = _write_cfg(tmp_path / "fresh.json", tiny_pipeline_config(tmp_path / "fresh"))
    assert main(["infer", "--config", str(cfg_path)]) == 3
    assert "train-vcm" in capsys.readouterr().err
    bad = _write_cfg(tmp_path / "bad.json", {"schema_version": 9, "root": "x"})
    assert main(["run-all", "--config", str(bad)]) == 2
    assert main(["fit-scene"]) == 2

    def boom(ctx):
        raise FloatingPointError("loss is nan")

    monkeypatch.setitem(pl.STAGE_FUNCS, "gen-data", boom)
    assert main(["gen-data", "--config", str(cfg_path)]) == 4
    monkeypatch.undo()

    ok = _copy_run(tiny_run[0], tmp_path / "copy")
    ok_path = _write_cfg(tmp_path / "ok.json", ok.to_dict())
    assert main(["run-stage", "gen-data", "--config", str(ok_path)]) == 0
    assert "up-to-date" in capsys.readouterr().out


def test_cli_entry_point_lists_stages():
    out = subprocess.run([sys.executable, "-m", "skyforge.cli", "--help"], capture_output=True, text=True, check=True)
    for stage in pl.STAGES + ["run-stage", "run-all"]:
        assert stage in out.stdout


def test_cli_standalone_gen_data(tmp_path):
    code = subprocess.run([sys.executable, "-m", "skyforge.cli", "gen-data", "--seed", "1", "--scenes", "2",
                           "--buildings", "3", "--width", "16", "--height", "16", "--out", str(tmp_path / "ds")])
    assert code.returncode == 0
    m = DatasetManifest.load(tmp_path / "ds")
    assert len(m.scene_ids("test")) == 1


# -- priors ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def short_lane(tmp_path_factory):
    d = tmp_path_factory.mktemp("short")
    ground = Ground((-30, 30, -30, 30), checker_seed=1, checker_cell_m=4.0)
    scenes = [BoxScene((), ground, ((-30, -30, 0), (30, 30, 20)), s) for s in (0, 1)]
    lanes = [{"short": np.array([[0.0, 0.0], [10.0, 0.0]])}] * 2
    m = export_dataset(scenes, lanes, TrajectorySpec(aerial_altitude_m=20, width=32, height=32), d / "ds")
    return m, init_from_depth(m, 200, seed=0)


def test_render_priors_count_and_alignment(short_lane, tmp_path):
    m, scene = short_lane
    entries = pl.render_priors(scene, m, "scene_000", tmp_path / "p")
    recs = m.records("scene_000", "short")
    assert len(recs) == 6
    assert len(entries) == 6 and len(list((tmp_path / "p" / "short").glob("*.png"))) == 6
    for e, r in zip(entries, recs):
        assert e["index"] == r.index
        assert e["ground_image"] == r.ground_image
        assert e["ground_pose"] == r.ground_pose.to_dict()
        assert Path(e["prior"]).name == Path(r.ground_image).name
        assert load_png(tmp_path / "p" / e["prior"]).shape == (32, 32, 3)


def test_render_priors_byte_identical(short_lane, tmp_path):
    m, scene = short_lane
    pl.render_priors(scene, m, "scene_000", tmp_path / "a")
    pl.render_priors(scene, m, "scene_000", tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*.png")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_load_priors_rejects_count_mismatch(short_lane, tmp_path):
    m, scene = short_lane
    entries = pl.render_priors(scene, m, "scene_000", tmp_path / "scene_000")
    (tmp_path / "scene_000" / "index.json").write_text(json.dumps(entries))
    assert pl.load_priors(tmp_path, m, "scene_000", "short").shape == (6, 32, 32, 3)
    (tmp_path / "scene_000" / "index.json").write_text(json.dumps(entries[:-1]))
    with pytest.raises(ValueError, match="5 priors for 6"):
        pl.load_priors(tmp_path, m, "scene_000", "short")


# -- smoke -------------------------------------------------------------------------------


def test_smoke_config_run_all(tmp_path):
    d = json.loads((REPO / "configs" / "smoke.json").read_text())
    d["root"] = str(tmp_path / "smoke")
    cfg = pl.PipelineConfig.from_dict(d)
    assert cfg.sections["fit"]["config"]["iterations"] == 200
    assert cfg.sections["data"]["trajectory"] == {"width": 64, "height": 64}
    assert len(cfg.sections["data"]["lanes"]) == 1 and len(cfg.sections["fit"]["scenes"]) == 1
    results = pl.run_all(cfg)
    assert [r.status for r in results] == ["ok"] * len(pl.STAGES)
    report = json.loads((cfg.root / "reports" / "report.json").read_text())
    agg = report["methods"]["vcm"]["seed_0"]["aggregate"]
    assert {"psnr_db", "ssim", "fid_proxy", "fvd_proxy", "kvd_proxy"} <= set(agg)
    assert all(np.isfinite(v) for v in agg.values())
