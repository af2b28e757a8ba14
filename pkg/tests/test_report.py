"""Heatmap overlays, KDE curve files and metric tables."""

import json
from pathlib import Path

import numpy as np
import pytest

from ucf import report
from ucf.errors import ValidationError

FIXTURES = Path(__file__).parent / "fixtures"


class TestOverlay:
    def test_constant_map_uniform_colour(self, rng):
        img = np.full((3, 8, 8), 0.4)
        out = report.heatmap_overlay(img, np.full((8, 8), 3.0), alpha=0.5)
        assert out.shape == (8, 8, 3) and out.dtype == np.uint8
        assert np.all(out == out[0, 0])

    def test_alpha_endpoints(self, rng):
        img = rng.uniform(size=(3, 6, 6))
        amap = rng.uniform(size=(6, 6))
        assert np.array_equal(report.heatmap_overlay(img, amap, alpha=0.0),
                              np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8))
        hot = report.heatmap_overlay(img, amap, alpha=1.0)
        peak = np.unravel_index(np.argmax(amap), amap.shape)
        # the jet colour map ends in dark red
        assert hot[peak][0] > hot[peak][2]

    def test_errors(self):
        with pytest.raises(ValidationError):
            report.heatmap_overlay(np.zeros((3, 4, 4)), np.zeros((5, 5)))
        with pytest.raises(ValidationError):
            report.heatmap_overlay(np.zeros((3, 4, 4)), np.zeros((4, 4)), alpha=1.5)

    def test_save(self, rng, tmp_path):
        p = report.save_overlay(tmp_path / "a" / "o.png", rng.uniform(size=(3, 4, 4)), rng.uniform(size=(4, 4)))
        assert p.stat().st_size > 0


class TestKDEFiles:
    def test_round_trip_and_integral(self, rng, tmp_path):
        curves = report.kde_curves({"normal": rng.normal(0, 1, 40), "anomalous": rng.normal(3, 0.5, 10),
                                    "single": [1.0]}, grid_size=256)
        assert set(curves) == {"normal", "anomalous"}
        path = report.write_kde_csv(tmp_path / "k.csv", curves)
        back = report.read_kde_csv(path)
        for name, (x, d) in curves.items():
            assert np.array_equal(back[name][0], x) and np.array_equal(back[name][1], d)
            assert np.trapezoid(back[name][1], back[name][0]) == pytest.approx(1.0, abs=1e-3)
        assert path.read_text().splitlines()[0] == "curve,x,density"
        assert report.plot_kde(tmp_path / "k.png", curves).stat().st_size > 0


class TestTables:
    def test_golden_metrics_table(self, tmp_path):
        result = json.loads((FIXTURES / "eval_metrics.json").read_text())
        rows = report.metric_rows(result)
        out = report.write_table(tmp_path / "t.csv", rows, report.table_columns(rows, ("method", "category")))
        assert out.read_bytes() == (FIXTURES / "metrics_table_golden.csv").read_bytes()

    def test_column_order(self):
        rows = [{"lambda": 0.0, "gain P-AUROC": 0.0, "P-AUROC": 0.5, "I-AUROC": 0.6}]
        assert report.table_columns(rows, ("lambda",)) == ["lambda", "I-AUROC", "P-AUROC", "gain P-AUROC"]

    def test_ablation_table(self, tmp_path):
        result = json.loads((FIXTURES / "eval_metrics.json").read_text())
        result["methods"]["fused"] = result["methods"]["filtered"]
        csv_path, json_path = report.ablation_table(tmp_path / "ab", {"a": result, "b": result})
        lines = csv_path.read_text().splitlines()
        assert lines[0].startswith("variant,method,I-AUROC") and len(lines) == 7
        assert len(json.loads(json_path.read_text())) == 6

    def test_plots(self, tmp_path):
        result = json.loads((FIXTURES / "eval_metrics.json").read_text())
        assert report.plot_metrics(tmp_path / "m.png", result).stat().st_size > 0
        hist = [{"epoch": e, "loss": 1.0 / e, "focal": 0.5 / e} for e in range(1, 4)]
        assert report.plot_history(tmp_path / "h.png", hist).stat().st_size > 0
        rows = [{"lambda": lam, "I-AUROC": 0.5 + lam / 4, "P-AUROC": 0.6} for lam in (0.0, 0.5, 1.0)]
        assert report.plot_lambda_sweep(tmp_path / "s.png", rows).stat().st_size > 0


def test_pick_examples_round_robin():
    meta = [{"defect": d, "label": int(d != "good")} for d in ["good"] * 4 + ["blob"] * 2 + ["hole"] * 2]
    picked = report._pick_examples(list(range(8)), meta, 4)
    assert [meta[i]["defect"] for i in picked] == ["blob", "hole", "good", "blob"]
