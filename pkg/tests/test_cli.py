import json

import pytest

from streamdet.cli import main


@pytest.fixture(scope="module")
def spec_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "spec.json"
    path.write_text(
        json.dumps(
            {
                "num_classes": 4,
                "images_per_class": 6,
                "grid": [4, 4],
                "channels": 16,
                "proposals_per_image": 30,
                "jitters_per_gt": 4,
                "seed": 3,
            }
        )
    )
    return path


@pytest.fixture(scope="module")
def data_dir(spec_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen", "--spec", str(spec_file), "--out", str(out)]) == 0
    return out


def run_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(
        json.dumps(
            {
                "schedule": {
                    "base_classes": [1, 2],
                    "incremental_classes": [3, 4],
                    "eval_every": 1,
                },
                "learner": "replay",
                "replay_n": 2,
                "buffer": {"policy": "min", "capacity_entries": 8},
                "pq": {
                    "num_codebooks": 4,
                    "codebook_size": 16,
                    "train_locations": 10,
                    "iters": 10,
                },
                "head": {"hidden": 32},
                "base_epochs": 2,
            }
        )
    )
    return path


def test_gen_writes_dataset(data_dir, capsys):
    assert (data_dir / "dataset.json").exists()
    assert sorted((data_dir / "features").glob("*.rfm1"))


def test_gen_rejects_unknown_spec_keys(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"num_classes": 4, "bogus": 1}))
    assert main(["gen", "--spec", str(bad), "--out", str(tmp_path / "d")]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"]["type"] == "ConfigError"


def test_train_pq(data_dir, tmp_path, capsys):
    out = tmp_path / "pq.bin"
    rc = main(
        [
            "train-pq",
            "--features",
            str(data_dir / "features"),
            "--num-codebooks",
            "4",
            "--codebook-size",
            "16",
            "--seed",
            "5",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    info = json.loads(capsys.readouterr().out)
    assert info["num_codebooks"] == 4
    assert len(info["digest"]) == 64
    assert out.exists()


def test_run_and_omega(data_dir, tmp_path, capsys):
    cfg = run_config(tmp_path)
    out = tmp_path / "run"
    rc = main(["run", "--config", str(cfg), "--data", str(data_dir), "--out", str(out)])
    assert rc == 0
    info = json.loads(capsys.readouterr().out)
    assert info["checkpoints"] == [2, 3, 4]
    assert (out / "curves.csv").exists()

    rc = main(["omega", "--curve", str(out / "curves.csv"), "--offline-const", "0.5"])
    assert rc == 0
    omega = json.loads(capsys.readouterr().out)
    want = sum(a / 0.5 for a in info["alphas"]) / len(info["alphas"])
    assert omega["omega_map"] == pytest.approx(want, abs=1e-6)
    assert omega["checkpoints"] == 3


def test_run_cli_overrides(data_dir, tmp_path, capsys):
    cfg = run_config(tmp_path)
    out = tmp_path / "run_ft"
    rc = main(
        [
            "run",
            "--config",
            str(cfg),
            "--data",
            str(data_dir),
            "--out",
            str(out),
            "--learner",
            "fine_tune",
            "--eval-every",
            "2",
        ]
    )
    assert rc == 0
    info = json.loads(capsys.readouterr().out)
    assert info["learner"] == "fine_tune"
    assert info["checkpoints"] == [2, 4]
    written = json.loads((out / "config.json").read_text())
    assert written["learner"] == "fine_tune"


def test_eval_subcommand(data_dir, tmp_path, capsys):
    ann_dir = data_dir / "annotations"
    first = sorted(ann_dir.glob("*.json"))[0]
    ann = json.loads(first.read_text())
    dets = {
        "detections": {
            ann["image_id"]: [
                {"box": b["box"], "class_id": b["class_id"], "score": 0.9}
                for b in ann["boxes"]
            ]
        }
    }
    det_path = tmp_path / "dets.json"
    det_path.write_text(json.dumps(dets))
    report_path = tmp_path / "report.json"
    rc = main(
        [
            "eval",
            "--detections",
            str(det_path),
            "--annotations",
            str(first),
            "--out",
            str(report_path),
        ]
    )
    assert rc == 0
    report = json.loads(report_path.read_text())
    assert report["map"] == 1.0


def test_eval_rejects_malformed_detections(tmp_path, data_dir, capsys):
    det_path = tmp_path / "bad.json"
    det_path.write_text(json.dumps({"detections": {"img": [{"box": [0, 0, 5, 5]}]}}))
    rc = main(
        [
            "eval",
            "--detections",
            str(det_path),
            "--annotations",
            str(data_dir / "annotations"),
            "--out",
            str(tmp_path / "r.json"),
        ]
    )
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"]["type"] == "ParseError"


def test_omega_rejects_bad_denominator(tmp_path, capsys):
    curve = tmp_path / "c.csv"
    curve.write_text("t,map\n1,0.5\n")
    rc = main(["omega", "--curve", str(curve), "--offline-const", "0.0"])
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"]["type"] == "ValueError"


def test_error_json_on_missing_file(capsys):
    assert main(["run", "--config", "/does/not/exist.json", "--out", "/tmp/x"]) == 1
    err = json.loads(capsys.readouterr().err)
    assert "error" in err
