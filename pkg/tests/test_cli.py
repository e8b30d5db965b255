import csv
import json

import numpy as np
import pytest

from gazetarget import cli
from gazetarget.tensor import serialize

TINY_MODEL = {"input_size": 16, "head_size": 8, "attention_grid": 4, "heatmap_size": 16,
              "backbone_channels": [4, 4], "encode_channels": 4, "deconv_layers": 2, "deconv_channels": [4],
              "inframe_channels": [2, 2]}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert cli.main(["synth", "--out", str(out), "--clips", "5", "--length", "4", "--seed", "3"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run")
    cfg = tmp_path_factory.mktemp("cfg") / "train.json"
    cfg.write_text(json.dumps({"model": TINY_MODEL, "steps": 3, "batch_size": 2}))
    assert cli.main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(out)]) == 0
    return out


class TestSynth:
    def test_writes_dataset_and_config(self, dataset):
        doc = json.loads((dataset / "dataset.json").read_text())
        assert len(doc["splits"]["train"]) == 4 and len(doc["splits"]["test"]) == 1
        run = json.loads((dataset / cli.RUN_CONFIG).read_text())
        assert run["command"] == "synth" and run["clips"] == 5 and run["seed"] == 3


class TestTrain:
    def test_outputs(self, trained):
        rows = list(csv.reader(open(trained / "train_log.csv")))
        assert rows[0] == ["step", "stage", "loss", "L_h", "L_f"] and len(rows) == 4
        assert (trained / "final" / "manifest.json").exists()
        assert (trained / "loss_curve.png").exists()

    def test_flags_override_config(self, tmp_path, dataset):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"model": TINY_MODEL, "steps": 5, "batch_size": 2, "lr": 0.1}))
        out = tmp_path / "r"
        assert cli.main(["train", "--config", str(cfg), "--steps", "2", "--data", str(dataset), "--out", str(out)]) == 0
        run = json.loads((out / cli.RUN_CONFIG).read_text())
        assert run["steps"] == 2 and run["lr"] == 0.1

    def test_temporal_keeps_frozen_groups(self, tmp_path, trained, dataset):
        out = tmp_path / "t"
        assert cli.main(["train", "--stage", "temporal", "--init", str(trained / "final"), "--steps", "2",
                         "--batch-size", "2", "--seq-len", "4", "--data", str(dataset), "--out", str(out)]) == 0
        before = json.loads((trained / "final" / "manifest.json").read_text())
        for entry in before["params"]:
            a = (trained / "final" / entry["file"]).read_bytes()
            b = (out / "final" / entry["file"]).read_bytes()
            frozen = entry["name"].split(".")[0] in ("head_backbone", "scene_backbone", "attention_fc", "encode_convs")
            if frozen:
                assert a == b, entry["name"]

    def test_temporal_needs_init(self, tmp_path, dataset):
        assert cli.main(["train", "--stage", "temporal", "--data", str(dataset), "--out", str(tmp_path)]) == 2

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_divergence_exit_code(self, tmp_path, dataset):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"model": TINY_MODEL, "batch_size": 2, "w_h": 1e300}))
        assert cli.main(["train", "--config", str(cfg), "--steps", "2", "--data", str(dataset),
                         "--out", str(tmp_path / "r")]) == 4


class TestEvalInfer:
    def test_eval(self, tmp_path, trained, dataset):
        assert cli.main(["eval", "--checkpoint", str(trained / "final"), "--data", str(dataset),
                         "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert set(report) >= {"auc", "l2_mean", "out_of_frame_ap", "n_inframe", "n_total"}
        assert report["n_total"] == 4
        assert (tmp_path / "frames.csv").exists()

    def test_infer(self, tmp_path, trained, dataset):
        clip = dataset / "test" / "test_00000"
        assert cli.main(["infer", "--checkpoint", str(trained / "final"), "--clip", str(clip),
                         "--out", str(tmp_path)]) == 0
        maps = sorted((tmp_path / "heatmaps").glob("*.gzt"))
        assert len(maps) == 4
        hm = serialize.load(maps[0])
        assert hm.shape == (16, 16) and hm.min() >= 0 and hm.max() <= 1
        assert len(list((tmp_path / "png").glob("*.png"))) == 4

    def test_missing_checkpoint(self, tmp_path, dataset):
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "nope"), "--data", str(dataset),
                         "--out", str(tmp_path)]) == 3

    def test_invalid_annotations(self, tmp_path, trained, dataset):
        import shutil

        clip = tmp_path / "clip"
        shutil.copytree(dataset / "test" / "test_00000", clip)
        path = clip / "annotations.json"
        doc = path.read_text()
        bad = doc.replace('"inframe": true', '"inframe": false', 1) if '"inframe": true' in doc else \
            doc.replace('"gaze": null', '"gaze": [0.5, 0.5]', 1)
        path.write_text(bad)
        assert cli.main(["infer", "--checkpoint", str(trained / "final"), "--clip", str(clip),
                         "--out", str(tmp_path / "o")]) == 3


class TestSocialCommands:
    def test_shared_coincident_peaks(self, tmp_path):
        src = tmp_path / "maps"
        src.mkdir()
        for person, at in (("p0", (3, 5)), ("p1", (3, 5))):
            m = np.zeros((8, 8), np.float32)
            m[at] = 1.0
            serialize.save(m, src / f"{person}_000000.gzt")
        out = tmp_path / "o"
        assert cli.main(["shared", "--heatmaps", str(src), "--threshold", "1.8", "--out", str(out)]) == 0
        rows = list(csv.DictReader(open(out / "shared.csv")))
        assert rows[0]["is_shared"] == "1" and rows[0]["x"] == "5" and rows[0]["y"] == "3"

    def test_shifts(self, tmp_path):
        doc = [{"clip_id": "a", "fps": 30, "labels": ["toy"] * 3 + ["eyes"] * 2, "truth": [[2, 3]]}]
        (tmp_path / "l.json").write_text(json.dumps(doc))
        out = tmp_path / "o"
        assert cli.main(["shifts", "--labels", str(tmp_path / "l.json"), "--out", str(out)]) == 0
        rows = list(csv.reader(open(out / "events.csv")))
        assert rows == [["clip_id", "start_frame", "end_frame"], ["a", "2", "3"]]
        prf = json.loads((out / "prf.json").read_text())
        assert prf["overall"] == {"precision": 1.0, "recall": 1.0}

    def test_shifts_bad_label(self, tmp_path):
        (tmp_path / "l.json").write_text(json.dumps([{"fps": 30, "labels": ["face"]}]))
        assert cli.main(["shifts", "--labels", str(tmp_path / "l.json"), "--out", str(tmp_path / "o")]) == 3


class TestMisc:
    def test_gradcheck(self, tmp_path, capsys):
        assert cli.main(["gradcheck", "--cases", "2", "--out", str(tmp_path)]) == 0
        text = capsys.readouterr().out
        assert "conv2d" in text and "FAIL" not in text
        assert json.loads((tmp_path / "gradcheck.json").read_text())["tolerance"] == 1e-4

    def test_unknown_flag(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            cli.main(["synth", "--out", str(tmp_path), "--bogus"])
        assert exc.value.code == 2

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"bogus": 1}))
        assert cli.main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 2

    def test_out_required(self):
        assert cli.main(["gradcheck"]) == 2
