"""Staged pipeline, configuration resolution and the command-line interface."""

import json
import logging

import numpy as np
import pytest
from PIL import Image

from ucf import cli, pipeline
from ucf.errors import MissingStageError, NumericError, ValidationError

SMALL = {
    "data": {"toy": {"n_train": 6, "n_test_good": 2, "n_test_defect": 1}, "categories": ["disc", "checker"]},
    "synth": {"per_image": 1},
    "loss": {"epochs": 2},
    "monitor_every": 1,
}


def small_cfg(out, **extra):
    return pipeline.resolve_config(overrides={**SMALL, "out": str(out), "seed": 3, "deterministic": True, **extra},
                                   environ={})


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    pipeline.Pipeline(small_cfg(out)).run("all")
    return out


class TestConfig:
    def test_defaults_resolve(self):
        cfg = pipeline.resolve_config(environ={})
        assert cfg["scenario"] == "rgb" and cfg["infer"]["lam"] == 0.5 and cfg["infer"]["k"] == 250
        assert cfg["templates"]["n"] == 3 and cfg["loss"]["alpha"] == 0.1 and cfg["loss"]["gamma0"] == 3.0

    def test_precedence(self, tmp_path):
        f = tmp_path / "c.json"
        f.write_text(json.dumps({"seed": 1, "loss": {"epochs": 3, "lr": 0.5}}))
        env = {"UCF_LOSS__EPOCHS": "4", "UCF_INFER__LAM": "0.25", "OTHER": "x"}
        cfg = pipeline.resolve_config(f, {"seed": 9}, environ=env)
        assert cfg["seed"] == 9 and cfg["loss"]["epochs"] == 4 and cfg["loss"]["lr"] == 0.5
        assert cfg["infer"]["lam"] == 0.25

    def test_env_parsing(self):
        env = {"UCF_SCENARIO": "rgb_text", "UCF_EVAL__CAPS": "[0.3]", "UCF_DETERMINISTIC": "true"}
        assert pipeline.env_overrides(env) == {"scenario": "rgb_text", "eval": {"caps": [0.3]}, "deterministic": True}

    @pytest.mark.parametrize("bad", [
        {"nonsense": 1}, {"loss": {"bogus": 1}}, {"scenario": "video"}, {"infer": {"lam": 2.0}},
        {"text": {"prompts": "both"}}, {"templates": {"n": 0}}, {"loss": {"gamma0": 0.2}},
    ])
    def test_validation(self, bad):
        with pytest.raises(ValidationError):
            pipeline.resolve_config(overrides=bad, environ={})

    def test_scenario_policies(self):
        c = pipeline.resolve_config(overrides={"scenario": "rgb_3d"}, environ={})
        assert pipeline.scenario_pairings(c) == [("rgb", "rgb"), ("d3", "d3"), ("fused", "fused")]
        assert pipeline.pooling_mode(c) == "avg"
        t = pipeline.resolve_config(overrides={"scenario": "rgb_text"}, environ={})
        assert pipeline.scenario_pairings(t) == [("rgb", "text_abnormal"), ("rgb", "text_normal")]
        assert pipeline.pooling_mode(pipeline.resolve_config(environ={})) == "min"


class TestRun:
    def test_artifacts(self, run_dir):
        resolved = json.loads((run_dir / "config.resolved.json").read_text())
        assert resolved["seed"] == 3 and "net" in resolved
        result = json.loads((run_dir / "eval" / "metrics.json").read_text())
        assert set(result["methods"]) == set(pipeline.METHODS)
        assert set(result["methods"]["filtered"]) == {"all", "disc", "checker"}
        caps = [result["methods"]["fused"]["all"][f"AUPRO@{c}%"] for c in (1, 5, 10, 30)]
        assert caps == sorted(caps)
        for stage in pipeline.STAGES:
            assert (run_dir / stage / "stage.json").exists()
        header = (run_dir / "train" / "history.csv").read_text().splitlines()[0]
        assert "val P-AUROC" in header and "val I-AUROC" in header

    def test_maps_written(self, run_dir):
        pngs = sorted((run_dir / "infer" / "maps").glob("*.png"))
        assert pngs
        with Image.open(pngs[0]) as im:
            assert im.mode.startswith("I;16") and im.size == (32, 32)
        assert pngs[0].with_suffix(".f32").exists()
        scores = (run_dir / "infer" / "scores.csv").read_text().splitlines()
        assert scores[0].startswith("category,defect,image,label,filtered,baseline,fused,gaussian")

    def test_sweep_table(self, run_dir):
        rows = json.loads((run_dir / "sweep-lambda" / "lambda_sweep.json").read_text())
        assert [r["lambda"] for r in rows] == [0, 0.2, 0.4, 0.6, 0.8, 1]
        assert rows[0]["gain P-AUROC"] == 0.0
        fused = json.loads((run_dir / "eval" / "metrics.json").read_text())["methods"]
        assert rows[0]["P-AUROC"] == fused["baseline"]["all"]["P-AUROC"]
        assert rows[-1]["P-AUROC"] == fused["filtered"]["all"]["P-AUROC"]
        assert (run_dir / "sweep-lambda" / "lambda_sweep.png").stat().st_size > 0

    def test_report_files(self, run_dir):
        rep = run_dir / "report"
        for name in ("metrics_table.csv", "metrics.png", "kde_image_scores.csv", "kde_image_scores.png",
                     "history.png", "heatmaps.png"):
            assert (rep / name).stat().st_size > 0
        assert len(list((rep / "heatmaps").glob("*.png"))) > 0

    def test_rerun_is_cache_hit(self, run_dir, caplog):
        before = (run_dir / "eval" / "metrics.json").stat().st_mtime_ns
        with caplog.at_level(logging.INFO, logger="ucf.pipeline"):
            pipeline.Pipeline(small_cfg(run_dir)).run("all")
        hits = [r.getMessage() for r in caplog.records if r.getMessage().startswith("cache hit")]
        assert len(hits) == len(pipeline.STAGES)
        assert not any(r.getMessage().startswith("running") for r in caplog.records)
        assert (run_dir / "eval" / "metrics.json").stat().st_mtime_ns == before

    def test_config_change_invalidates_downstream(self, run_dir, tmp_path, caplog):
        import shutil
        out = tmp_path / "copy"
        shutil.copytree(run_dir, out)
        with caplog.at_level(logging.INFO, logger="ucf.pipeline"):
            pipeline.Pipeline(small_cfg(out, infer={"lam": 0.3})).run("all")
        ran = [r.getMessage().split()[2] for r in caplog.records if r.getMessage().startswith("running")]
        assert ran == ["infer", "eval", "sweep-lambda", "report"]

    def test_missing_stage(self, tmp_path):
        p = pipeline.Pipeline(small_cfg(tmp_path))
        with pytest.raises(MissingStageError, match="ucf volume"):
            p.run("train")

    def test_unwritable_out(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(ValidationError, match="not writable"):
            pipeline.Pipeline(small_cfg(blocker / "sub")).run("synth")

    def test_deterministic_rerun_from_resolved_config(self, run_dir, tmp_path):
        cfg = json.loads((run_dir / "config.resolved.json").read_text())
        cfg["out"] = str(tmp_path / "again")
        cfg["data"]["root"] = str(run_dir / "dataset")
        pipeline.Pipeline(cfg).run("all")
        assert (tmp_path / "again" / "eval" / "metrics.json").read_bytes() == \
            (run_dir / "eval" / "metrics.json").read_bytes()


@pytest.mark.parametrize("scenario", ["rgb_3d", "rgb_text"])
def test_other_scenarios(tmp_path, scenario):
    cfg = small_cfg(tmp_path, scenario=scenario, monitor_every=0)
    cfg["data"]["categories"] = ["stripes"]
    pipeline.Pipeline(cfg).run("all")
    result = json.loads((tmp_path / "eval" / "metrics.json").read_text())
    assert result["scenario"] == scenario and 0 <= result["methods"]["filtered"]["all"]["P-AUROC"] <= 1
    vol = json.loads((tmp_path / "volume" / "test_vol.f32.json").read_text())
    if scenario == "rgb_3d":
        assert vol["shape"][1] == 3 * 64 * 3
    else:
        assert vol["shape"][1] == 2 * 3


def test_image_label_only_dataset(tmp_path, run_dir):
    import shutil
    root = tmp_path / "ds"
    shutil.copytree(run_dir / "dataset", root)
    shutil.rmtree(root / "disc" / "ground_truth")
    shutil.rmtree(root / "checker" / "ground_truth")
    meta = json.loads((root / "dataset.json").read_text())
    (root / "dataset.json").write_text(json.dumps({**meta, "image_label_only": True}))
    cfg = small_cfg(tmp_path / "out", monitor_every=0)
    cfg["data"]["root"] = str(root)
    pipeline.Pipeline(cfg).run("all")
    result = json.loads((tmp_path / "out" / "eval" / "metrics.json").read_text())
    assert set(result["methods"]["filtered"]["all"]) == {"I-AUROC", "I-AP", "I-F1-max"}


class TestCLI:
    def _args(self, out, *extra):
        return ["--out", str(out), "--seed", "3", "--deterministic", *extra]

    def test_exit_validation(self, tmp_path, caplog):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"loss": {"epochz": 1}}))
        assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == 2
        assert "epochz" in caplog.text

    def test_exit_missing_stage(self, tmp_path, caplog):
        assert cli.main(["train", *self._args(tmp_path)]) == 4
        assert "ucf volume" in caplog.text

    def test_exit_numeric(self, tmp_path, monkeypatch):
        def boom(self, stage):
            raise NumericError("non-finite loss")
        monkeypatch.setattr(pipeline.Pipeline, "run", boom)
        assert cli.main(["train", *self._args(tmp_path)]) == 3

    def test_success_and_stage_chain(self, tmp_path):
        cfg = tmp_path / "small.json"
        cfg.write_text(json.dumps(SMALL))
        assert cli.main(["synth", "--config", str(cfg), *self._args(tmp_path / "o")]) == 0
        assert cli.main(["encode", "--config", str(cfg), *self._args(tmp_path / "o")]) == 0
        assert (tmp_path / "o" / "encode" / "stage.json").exists()

    def test_env_override_reaches_run(self, tmp_path, monkeypatch):
        monkeypatch.setenv("UCF_SYNTH__PER_IMAGE", "2")
        cfg = tmp_path / "small.json"
        cfg.write_text(json.dumps(SMALL))
        assert cli.main(["synth", "--config", str(cfg), *self._args(tmp_path / "o")]) == 0
        resolved = json.loads((tmp_path / "o" / "config.resolved.json").read_text())
        assert resolved["synth"]["per_image"] == 2

    def test_entry_point_stderr(self, tmp_path):
        import subprocess
        import sys
        proc = subprocess.run([sys.executable, "-m", "ucf", "infer", "--out", str(tmp_path)],
                              capture_output=True, text=True)
        assert proc.returncode == 4 and "ucf train" in proc.stderr and proc.stdout == ""

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["fly"])
        assert exc.value.code == 2


def test_ablation_prompts(tmp_path):
    cfg = small_cfg(tmp_path, monitor_every=0)
    cfg["data"]["categories"] = ["disc"]
    csv_path, json_path = pipeline.run_ablation(cfg, "prompts")
    rows = json.loads(json_path.read_text())
    assert {r["variant"] for r in rows} == {"normal-only", "abnormal-only", "joint"}
    assert csv_path.read_text().splitlines()[0].startswith("variant,method,I-AUROC")
    with pytest.raises(ValidationError):
        pipeline.run_ablation(cfg, "backbones")


def test_write_map(tmp_path):
    amap = np.linspace(0, 3, 64).reshape(8, 8)
    png, raw, _ = pipeline.write_map(tmp_path / "m", amap)
    with Image.open(png) as im:
        v = np.asarray(im)
    assert v.min() == 0 and v.max() == 65535
    from ucf.features import load_array
    assert np.allclose(load_array(raw)[0], amap, atol=1e-6)
