import csv
import json

import numpy as np
import pytest

from motionlab import report as R
from motionlab.evalkit import MetricReport
from motionlab.world import ObstacleField


def make_report(rate=0.9):
    return MetricReport(
        execution_rate=rate, success_rate=0.8, pen=0.001, float_=0.002,
        skate=0.003, pj=0.04, auj=0.5,
        weighted={"pen": 0.001 / rate, "float": 0.002 / rate,
                  "skate": 0.003 / rate, "pj": 0.04 / rate, "auj": 0.5 / rate},
        excluded=1,
    )


def make_history(n=5):
    return [
        {"mean_tracking_error": 0.2 - 0.01 * i, "exec_rate": 0.5 + 0.05 * i,
         "policy_loss": -0.01 * i, "value_loss": 1.0 / (i + 1),
         "cf_loss": 0.1, "robust_loss": 0.2, "beta": i / n,
         "failures": i, "goal_distance": 3.0 - 0.3 * i}
        for i in range(n)
    ]


class TestDelimited:
    def test_metrics_csv_round_trips(self, tmp_path):
        path = tmp_path / "m.csv"
        R.write_metrics_csv(path, {"full": make_report(), "baseline": make_report(0.5)})
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert [r["label"] for r in rows] == ["full", "baseline"]
        # repr round-trips floats exactly
        assert float(rows[0]["execution_rate"]) == 0.9
        assert float(rows[1]["weighted_pen"]) == 0.001 / 0.5

    def test_history_csv(self, tmp_path):
        path = tmp_path / "h.csv"
        hist = make_history()
        R.write_history_csv(path, hist)
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == len(hist)
        assert [int(r["epoch"]) for r in rows] == list(range(len(hist)))
        assert float(rows[3]["exec_rate"]) == hist[3]["exec_rate"]

    def test_history_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            R.write_history_csv(tmp_path / "h.csv", [])

    def test_summary_json(self, tmp_path):
        path = tmp_path / "s.json"
        R.write_summary_json(path, {"full": make_report()}, extra={"seed": 3})
        doc = json.loads(path.read_text())
        assert doc["full"]["success_rate"] == 0.8
        assert doc["run"]["seed"] == 3

    def test_text_report_mentions_metrics(self, tmp_path):
        path = tmp_path / "r.txt"
        R.write_text_report(path, {"full": make_report()}, extra={"seed": 3})
        text = path.read_text()
        for key in ("execution_rate", "pen", "weighted_skate", "seed"):
            assert key in text


class TestFigures:
    def test_history_figure(self, tmp_path):
        p = tmp_path / "a.png"
        R.plot_history(make_history(), p)
        assert p.stat().st_size > 0

    def test_ablation_figure(self, tmp_path):
        p = tmp_path / "b.png"
        R.plot_ablation({"full": 0.9, "no-cf": 0.8, "baseline": 0.6}, p)
        assert p.stat().st_size > 0

    def test_scaling_figure(self, tmp_path):
        p = tmp_path / "c.png"
        R.plot_scaling([1, 10, 30], [0.9, 0.8, 0.7], [0.6, 0.5, 0.3], p)
        assert p.stat().st_size > 0

    def test_trajectory_figure(self, tmp_path):
        p = tmp_path / "d.png"
        field = ObstacleField(np.array([[1.0, 1.0, 0.3, 0.3]]),
                              np.array([-5.0, -5.0, 5.0, 5.0]))
        xy = np.stack([np.linspace(0, 2, 30), np.linspace(0, 1, 30)], axis=1)
        R.plot_trajectory(xy, field, p, target=(2.0, 1.0))
        assert p.stat().st_size > 0

    def test_empty_inputs_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            R.plot_history([], tmp_path / "x.png")
        with pytest.raises(ValueError):
            R.plot_ablation({}, tmp_path / "y.png")


class TestBundle:
    def test_write_report_produces_all_outputs(self, tmp_path):
        field = ObstacleField.empty()
        xy = np.zeros((10, 2))
        paths = R.write_report(
            tmp_path / "out",
            {"full": make_report()},
            history=make_history(),
            ablation={"full": 0.9, "baseline": 0.5},
            scaling=([1, 10], [0.9, 0.8], [0.5, 0.4]),
            trajectory=(xy, field, (1.0, 0.0)),
            extra={"seed": 0},
        )
        names = {p.name for p in paths}
        assert names == {"metrics.csv", "summary.json", "report.txt",
                         "history.csv", "adaptation.png", "ablation.png",
                         "scaling.png", "trajectory.png"}
        for p in paths:
            assert p.exists() and p.stat().st_size > 0

    def test_minimal_bundle(self, tmp_path):
        paths = R.write_report(tmp_path / "out", {"eval": make_report()})
        assert {p.name for p in paths} == {"metrics.csv", "summary.json", "report.txt"}
