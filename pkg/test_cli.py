import csv
import io
import json
import shlex

import pytest

from conftest import echo_command
from fusioncert.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, run
from fusioncert.defaults import REPORT_HEADER
from fusioncert.errors import InputError
from fusioncert.report import metric_name, metric_threshold
from fusioncert.scene import load


def rows_of(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture
def scene_file(tmp_path):
    path = tmp_path / "scene_a.json"
    code = run(["gen-scene", "--out", str(path), "--seed", "1",
                "--vehicle-points", "200", "--background-points", "300", "--quiet"])
    assert code == EXIT_OK
    return path


@pytest.fixture
def echo_cmd():
    return shlex.join(echo_command("ok"))


def shifting_args(scene, *extra):
    return ["--scene", str(scene), "--transform", "shifting", "--range", "0:0.02",
            "--samples", "20", "--quiet", *extra]


class TestGenScene:
    def test_writes_scene(self, scene_file):
        scene = load(scene_file)
        assert scene.points.shape == (500, 3)
        assert scene.gt is not None

    def test_heading_in_degrees(self, tmp_path):
        path = tmp_path / "turned.json"
        assert run(["gen-scene", "--out", str(path), "--heading", "90", "--quiet"]) == EXIT_OK
        assert load(path).gt.r == pytest.approx(1.5707963267948966)

    def test_out_required(self, capsys):
        assert run(["gen-scene"]) == EXIT_CONFIG
        assert "out: required" in capsys.readouterr().err


class TestCertify:
    def test_missing_scene(self, capsys):
        assert run(["certify-detection", "--quiet"]) == EXIT_CONFIG
        assert "error: scene: required" in capsys.readouterr().err

    def test_no_subcommand(self, capsys):
        assert run([]) == EXIT_CONFIG
        assert "subcommand" in capsys.readouterr().err

    def test_bad_transform(self, scene_file):
        assert run(["certify-detection", "--scene", str(scene_file), "--transform", "scaling"]) == EXIT_CONFIG

    def test_unreadable_scene(self, tmp_path, capsys):
        broken = tmp_path / "broken.json"
        broken.write_text("{", encoding="utf-8")
        assert run(["certify-detection", "--scene", str(broken), "--quiet"]) == EXIT_CONFIG
        assert "error:" in capsys.readouterr().err

    def test_scene_with_invalid_bytes(self, tmp_path, capsys):
        broken = tmp_path / "binary.json"
        broken.write_bytes(b"\xff\xfe\x00")
        assert run(["certify-detection", "--scene", str(broken), "--quiet"]) == EXIT_CONFIG
        assert "not UTF-8" in capsys.readouterr().err

    def test_external_detector_rows(self, scene_file, echo_cmd, capsys):
        code = run(["certify-detection", *shifting_args(scene_file, "--sigma-x", "100", "--sigma-p", "100",
                                                        "--eta", "0.8", "0.95", "--detector-cmd", echo_cmd)])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert out.splitlines()[0] == ",".join(REPORT_HEADER)
        rows = rows_of(out)
        assert [r["metric"] for r in rows] == ["Det@80", "Det@95"]
        for row in rows:
            assert row["scene"] == "scene_a"
            assert row["transform"] == "shifting"
            assert row["radius"] == "0.020000"
            assert row["certified"] == "0.900000"
            assert row["clean"] == "0.900000"
            assert row["empirical"] == ""
            assert row["runtime_s"] == "0.000000"
            assert row["cells"] == "2"
            assert row["n"] == "20"

    def test_iou_rows(self, scene_file, tmp_path, capsys):
        box = [0.0, 1.65, 10.0, 1.8, 1.5, 4.0, 0.0]
        cmd = shlex.join(echo_command("ok", box))
        out = tmp_path / "iou.csv"
        code = run(["certify-iou", *shifting_args(scene_file, "--sigma-x", "100", "--sigma-p", "100",
                                                  "--detector-cmd", cmd, "--out", str(out))])
        assert code == EXIT_OK
        rows = rows_of(out.read_text(encoding="utf-8"))
        assert rows[0]["metric"] == "AP@50"
        assert 0.0 <= float(rows[0]["certified"]) <= float(rows[0]["clean"]) <= 1.0

    def test_negative_range(self, scene_file, echo_cmd, capsys):
        code = run(["certify-detection", "--scene", str(scene_file), "--range", "-1:1", "--grid", "2",
                    "--samples", "20", "--detector-cmd", echo_cmd, "--quiet"])
        assert code == EXIT_OK
        assert rows_of(capsys.readouterr().out)[0]["radius"] == "1.000000"

    def test_attack_step_fills_empirical(self, scene_file, echo_cmd, capsys):
        code = run(["certify-detection", *shifting_args(scene_file, "--detector-cmd", echo_cmd,
                                                        "--attack-step", "0.01")])
        assert code == EXIT_OK
        assert rows_of(capsys.readouterr().out)[0]["empirical"] == "0.900000"

    def test_vanilla_rows(self, scene_file, echo_cmd, capsys):
        code = run(["certify-detection", *shifting_args(scene_file, "--detector-cmd", echo_cmd,
                                                        "--attack-step", "0.01", "--vanilla")])
        assert code == EXIT_OK
        rows = rows_of(capsys.readouterr().out)
        assert [r["metric"] for r in rows] == ["Det@80", "VanillaDet@80"]
        vanilla = rows[1]
        assert vanilla["certified"] == ""
        assert vanilla["empirical"] == "0.900000"
        assert vanilla["clean"] == "0.900000"
        assert (vanilla["cells"], vanilla["n"]) == ("3", "1")

    def test_vanilla_needs_attack_step(self, scene_file, echo_cmd, capsys):
        code = run(["certify-detection", *shifting_args(scene_file, "--detector-cmd", echo_cmd, "--vanilla")])
        assert code == EXIT_CONFIG
        assert "vanilla: needs an attack step" in capsys.readouterr().err

    def test_modality_in_metric_label(self, scene_file, capsys):
        code = run(["certify-detection", *shifting_args(scene_file, "--grid", "2", "--modality", "lidar")])
        assert code == EXIT_OK
        assert rows_of(capsys.readouterr().out)[0]["metric"] == "Det@80:lidar"

    def test_deterministic_output(self, scene_file, tmp_path):
        first, second = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (first, second):
            assert run(["certify-detection", *shifting_args(scene_file, "--grid", "2", "--seed", "5",
                                                            "--out", str(out))]) == EXIT_OK
        assert first.read_bytes() == second.read_bytes()

    def test_dead_detector(self, scene_file, capsys):
        cmd = shlex.join(echo_command("die"))
        assert run(["certify-detection", *shifting_args(scene_file, "--detector-cmd", cmd)]) == EXIT_RUNTIME
        assert "error:" in capsys.readouterr().err


class TestConfigFile:
    def write(self, tmp_path, scene_file, **extra):
        path = tmp_path / "run.json"
        data = {"scene": str(scene_file), "transform": "shifting", "ranges": [[0.0, 0.02]],
                "grid": [2], "samples": 30, **extra}
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    def test_config_values(self, tmp_path, scene_file, echo_cmd, capsys):
        config = self.write(tmp_path, scene_file)
        assert run(["certify-detection", "--config", str(config), "--detector-cmd", echo_cmd, "--quiet"]) == EXIT_OK
        row = rows_of(capsys.readouterr().out)[0]
        assert (row["n"], row["cells"]) == ("30", "2")

    def test_flags_override_config(self, tmp_path, scene_file, echo_cmd, capsys):
        config = self.write(tmp_path, scene_file)
        assert run(["certify-detection", "--config", str(config), "--samples", "20",
                    "--detector-cmd", echo_cmd, "--quiet"]) == EXIT_OK
        assert rows_of(capsys.readouterr().out)[0]["n"] == "20"

    def test_invalid_json(self, tmp_path, capsys):
        path = tmp_path / "run.json"
        path.write_text('{"samples": ', encoding="utf-8")
        assert run(["certify-detection", "--config", str(path)]) == EXIT_CONFIG
        assert "invalid JSON" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, scene_file, capsys):
        config = self.write(tmp_path, scene_file, budget=3)
        assert run(["certify-detection", "--config", str(config)]) == EXIT_CONFIG
        assert "budget" in capsys.readouterr().err

    def test_bad_alpha(self, tmp_path, scene_file, capsys):
        config = self.write(tmp_path, scene_file, alpha=1.5)
        assert run(["certify-detection", "--config", str(config)]) == EXIT_CONFIG
        assert "alpha" in capsys.readouterr().err


class TestAttack:
    def test_sweep(self, scene_file, echo_cmd, capsys):
        code = run(["attack", *shifting_args(scene_file, "--step", "0.01", "--detector-cmd", echo_cmd)])
        assert code == EXIT_OK
        row = rows_of(capsys.readouterr().out)[0]
        assert row["certified"] == ""
        assert row["empirical"] == "0.900000"
        assert row["cells"] == "3"

    def test_vanilla_sweep(self, scene_file, echo_cmd, capsys):
        code = run(["attack", *shifting_args(scene_file, "--step", "0.01", "--vanilla", "--detector-cmd", echo_cmd)])
        assert code == EXIT_OK
        rows = rows_of(capsys.readouterr().out)
        assert [r["metric"] for r in rows] == ["Det@80", "VanillaDet@80"]
        assert rows[1]["empirical"] == "0.900000"
        assert rows[1]["alpha"] == "0.000000"

    def test_step_required(self, scene_file, echo_cmd, capsys):
        assert run(["attack", *shifting_args(scene_file, "--detector-cmd", echo_cmd)]) == EXIT_CONFIG
        assert "step: required" in capsys.readouterr().err


class TestCheckPartition:
    def test_json_report(self, scene_file, capsys):
        code = run(["check-partition", "--scene", str(scene_file), "--transform", "shifting",
                    "--range", "0:1", "--sizes", "0.01", "0.05", "--pairs", "5", "--intervals", "2", "--quiet"])
        assert code == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert report["transform"] == "shifting"
        assert report["tau"] == pytest.approx(0.07)
        assert [s["size"] for s in report["sizes"]] == [0.01, 0.05]
        assert all(s["pairs"] == 10 for s in report["sizes"])
        assert all(s["violation_rate_points"] == 0.0 for s in report["sizes"])

    def test_joint_transform_rejected(self, scene_file, capsys):
        code = run(["check-partition", "--scene", str(scene_file), "--transform", "rotation_shifting",
                    "--range", "-1:1,0:1", "--sizes", "0.01", "--quiet"])
        assert code == EXIT_CONFIG
        assert "one-dimensional" in capsys.readouterr().err


class TestBenchmark:
    def test_rows_and_aggregate(self, tmp_path, echo_cmd, capsys):
        scenes = []
        for seed in (1, 2):
            path = tmp_path / f"bench_{seed}.json"
            assert run(["gen-scene", "--out", str(path), "--seed", str(seed), "--vehicle-points", "100",
                        "--background-points", "100", "--quiet"]) == EXIT_OK
            scenes.append(str(path))
        code = run(["benchmark", "--scenes", *scenes, "--transform", "shifting", "--radii", "0.02", "0.03",
                    "--samples", "20", "--sigma-x", "100", "--sigma-p", "100",
                    "--detector-cmd", echo_cmd, "--quiet"])
        assert code == EXIT_OK
        rows = rows_of(capsys.readouterr().out)
        per_scene = [r for r in rows if r["scene"] != "ALL"]
        assert len(per_scene) == 4
        assert {r["cells"] for r in per_scene} == {"2", "3"}
        summary = [r for r in rows if r["scene"] == "ALL"]
        assert [r["radius"] for r in summary] == ["0.020000", "0.030000"]
        assert all(r["certified"] == "1.000000" for r in summary)
        assert all(r["empirical"] == "" for r in summary)

    def test_modalities(self, scene_file, capsys):
        code = run(["benchmark", "--scenes", str(scene_file), "--transform", "shifting", "--radii", "0.02",
                    "--samples", "20", "--modalities", "lidar", "camera", "--quiet"])
        assert code == EXIT_OK
        rows = rows_of(capsys.readouterr().out)
        per_scene = [r["metric"] for r in rows if r["scene"] != "ALL"]
        summary = [r["metric"] for r in rows if r["scene"] == "ALL"]
        assert per_scene == ["Det@80:lidar", "Det@80:camera"]
        assert summary == ["Det@80:lidar", "Det@80:camera"]

    def test_modalities_need_builtin(self, scene_file, echo_cmd, capsys):
        code = run(["benchmark", "--scenes", str(scene_file), "--transform", "shifting", "--radii", "0.02",
                    "--modalities", "lidar", "--detector-cmd", echo_cmd, "--quiet"])
        assert code == EXIT_CONFIG
        assert "only the builtin detector" in capsys.readouterr().err

    def test_joint_transform_rejected(self, scene_file, capsys):
        code = run(["benchmark", "--scenes", str(scene_file), "--transform", "rotation_shifting", "--quiet"])
        assert code == EXIT_CONFIG


class TestMetricLabels:
    @pytest.mark.parametrize("args,label", [
        (("detection", 0.8), "Det@80"),
        (("iou", 0.5), "AP@50"),
        (("detection", 0.8, True), "VanillaDet@80"),
        (("iou", 0.7, False, "lidar"), "AP@70:lidar"),
    ])
    def test_round_trip(self, args, label):
        assert metric_name(*args) == label
        assert metric_threshold(label) == pytest.approx(args[1])

    def test_unreadable_label(self):
        with pytest.raises(InputError):
            metric_threshold("recall")
