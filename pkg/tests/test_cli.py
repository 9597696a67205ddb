"""End-to-end command line checks: exit codes, files on disk, summaries."""
import csv
import json
import os

import pytest

from servobot import cli
from servobot import reports


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("runs") / "vosvs")
    code = run_cli("run", "--scenario", "vosvs_bench", "--trials", "1",
                   "--seed", "0", "--out-dir", out, "--ci")
    assert code == 0
    return out


class TestRun:
    def test_writes_reports_and_meets_ci_thresholds(self, finished_run,
                                                    capsys):
        out = finished_run
        assert os.path.isfile(os.path.join(out, "report.json"))
        assert os.path.isfile(os.path.join(out, "report.csv"))
        series = os.listdir(os.path.join(out, "depth_series"))
        assert series and all(f.endswith(".csv") for f in series)
        doc = json.loads(reports.read_report_json(out))
        assert doc["scenario"] == "vosvs_bench"
        assert doc["aggregates"]["vs_rate"] == 100.0

    def test_json_only_format_skips_the_csv(self, tmp_path):
        out = str(tmp_path / "json-only")
        code = run_cli("run", "--scenario", "vosvs_bench", "--trials", "1",
                       "--out-dir", out, "--format", "json")
        assert code == 0
        assert os.path.isfile(os.path.join(out, "report.json"))
        assert not os.path.exists(os.path.join(out, "report.csv"))

    def test_unknown_scenario_exits_two(self, tmp_path, capsys):
        code = run_cli("run", "--scenario", "flying_toasters",
                       "--out-dir", str(tmp_path / "x"))
        assert code == 2
        err = capsys.readouterr().err
        assert "scenario error" in err
        assert "vosvs_bench" in err

    def test_zero_trials_exits_two(self, tmp_path):
        code = run_cli("run", "--scenario", "vosvs_bench", "--trials", "0",
                       "--out-dir", str(tmp_path / "x"))
        assert code == 2

    def test_human_annotator_points_at_serve(self, tmp_path, capsys):
        code = run_cli("run", "--scenario", "vosvs_bench",
                       "--annotator", "human",
                       "--out-dir", str(tmp_path / "x"))
        assert code == 2
        assert "servobot serve" in capsys.readouterr().err

    def test_ci_miss_exits_three(self, tmp_path, capsys):
        scenario = tmp_path / "starved.json"
        scenario.write_text(json.dumps({
            "name": "starved", "protocol": "vs_learning",
            "formulation": "masked", "trials": 1, "noise": {},
            "max_updates": 5}))
        code = run_cli("run", "--scenario", str(scenario),
                       "--out-dir", str(tmp_path / "out"), "--ci")
        assert code == 3
        assert "acceptance miss" in capsys.readouterr().err


class TestCompare:
    def test_writes_formulation_table(self, tmp_path, capsys):
        out = str(tmp_path / "cmp")
        code = run_cli("compare", "--trials", "2", "--out-dir", out)
        assert code == 0
        with open(os.path.join(out, "report.csv"), newline="") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == reports.COMPARISON_HEADER
        assert [r[0] for r in rows[1:]] == ["masked", "vosvs",
                                            "broyden_bad", "broyden_good"]
        assert "masked" in capsys.readouterr().out


class TestReplay:
    def test_reproduces_a_recorded_run(self, finished_run, capsys):
        code = run_cli("replay", "--out-dir", finished_run)
        assert code == 0
        assert "byte-for-byte" in capsys.readouterr().out

    def test_flags_a_tampered_report(self, finished_run, tmp_path, capsys):
        tampered = tmp_path / "tampered"
        tampered.mkdir()
        doc = json.loads(reports.read_report_json(finished_run))
        doc["aggregates"]["vs_rate"] = 0.0
        (tampered / "report.json").write_text(reports.dumps(doc))
        code = run_cli("replay", "--out-dir", str(tampered))
        assert code == 3
        assert "MISMATCH" in capsys.readouterr().err

    def test_missing_report_exits_two(self, tmp_path, capsys):
        code = run_cli("replay", "--out-dir", str(tmp_path / "empty"))
        assert code == 2
        assert "report.json" in capsys.readouterr().err
