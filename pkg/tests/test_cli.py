import json
import os

import pytest

from decola import cli
from decola.cli import build_parser, main
from decola.ml.model import save_checkpoint
from decola.utils.export_utils import load_report


@pytest.fixture(scope="module")
def checkpoint(micro_model, tmp_path_factory):
    path = str(tmp_path_factory.mktemp("ckpt") / "micro.bin")
    save_checkpoint(micro_model, path, step=0, seed=0)
    return path


def gen_data(out, seed=5):
    return main(["gen-data", "--seed", str(seed), "--out", str(out), "--n-train", "2", "--n-val", "2",
                 "--n-weak", "2", "--embed-dim", "16"])


class TestParser:
    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--bogus"])
        assert exc.value.code == 2

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            main(["fly"])
        assert exc.value.code == 2

    def test_bad_integer_list(self):
        with pytest.raises(SystemExit) as exc:
            main(["pseudo-label", "--checkpoint", "a", "--weak-manifest", "b", "--out", "c", "--resolutions", "32,x"])
        assert exc.value.code == 2

    def test_overrides_are_json_decoded(self):
        args = build_parser().parse_args(["train-phase1", "--set", "model.embed_dim=32", "--set", "data.mix_ratio=[1,2]",
                                          "--set", "run_dir=out"])
        assert args.set == [("model.embed_dim", 32), ("data.mix_ratio", [1, 2]), ("run_dir", "out")]


class TestGenData:
    def test_deterministic(self, tmp_path, capsys):
        assert gen_data(tmp_path / "a") == 0
        assert gen_data(tmp_path / "b") == 0
        for name in ["train.json", "val.json", "weak.json", "weak.hidden-gt.json", "images/val/00001.png"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        out = capsys.readouterr().out
        assert '"command": "gen-data"' in out
        assert "train: 2 images" in out

    def test_resolved_config_written(self, tmp_path):
        gen_data(tmp_path)
        with open(tmp_path / "config.resolved.json") as f:
            config = json.load(f)
        assert config["seed"] == 5 and config["n_train"] == 2


class TestErrors:
    def test_missing_checkpoint(self, tmp_path, capsys):
        code = main(["pseudo-label", "--checkpoint", str(tmp_path / "missing.bin"),
                     "--weak-manifest", str(tmp_path / "weak.json"), "--out", str(tmp_path / "out.json")])
        assert code == 1
        error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert error["error"] == "CheckpointError"
        assert error["details"]["path"] == str(tmp_path / "missing.bin")

    def test_invalid_manifest(self, checkpoint, tmp_path, capsys):
        manifest = tmp_path / "val.json"
        manifest.write_text(json.dumps({"split": "val"}))
        code = main(["evaluate", "--checkpoint", checkpoint, "--manifest", str(manifest),
                     "--run-dir", str(tmp_path / "eval")])
        assert code == 1
        error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert error["error"] == "ManifestError"
        assert error["details"]["field_path"] == "vocabulary"

    def test_invalid_config_override(self, tmp_path, capsys):
        code = main(["train-phase1", "--run-dir", str(tmp_path), "--set", "model.num_heads=5"])
        assert code == 1
        error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert error["error"] == "ValidationError"

    def test_unexpected_error(self, tmp_path, monkeypatch, capsys):
        def broken(args):
            raise KeyError("curves")

        monkeypatch.setattr(cli, "cmd_report", broken)
        assert main(["report", "--run-dir", str(tmp_path)]) == 1
        error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert error["error"] == "KeyError"
        assert "curves" in error["message"]


class TestEvaluateAndReport:
    def test_conditioned(self, checkpoint, mini_dataset, tmp_path, capsys):
        run_dir = str(tmp_path / "eval")
        code = main(["evaluate", "--checkpoint", checkpoint, "--manifest", str(mini_dataset / "val.json"),
                     "--k", "1,20", "--n", "2", "--n-sweep", "1,2", "--run-dir", run_dir])
        assert code == 0
        report = load_report(run_dir)
        assert report.mode == "conditioned"
        assert set(report.c_map_at_k) == {"1", "20"}
        assert set(report.c_map_at_n) == {"1", "2"}
        assert 0.0 <= report.c_ar_first <= 1.0 and 0.0 <= report.c_ar_second <= 1.0
        assert os.path.exists(os.path.join(run_dir, "report.txt"))
        assert os.path.exists(os.path.join(run_dir, "curves", "c_ap_vs_k.csv"))
        assert "c-mAP" in capsys.readouterr().out

        assert main(["report", "--run-dir", run_dir, "--plot"]) == 0
        assert os.path.exists(os.path.join(run_dir, "curves", "c_ap_vs_n.png"))

    def test_standard_with_pseudo_quality(self, checkpoint, mini_dataset, tmp_path):
        pseudo = str(tmp_path / "pseudo.json")
        assert main(["pseudo-label", "--checkpoint", checkpoint, "--weak-manifest", str(mini_dataset / "weak.json"),
                     "--resolutions", "64", "--out", pseudo]) == 0
        with open(tmp_path / "config.resolved.json") as f:
            assert json.load(f)["command"] == "pseudo-label"
        run_dir = str(tmp_path / "eval")
        code = main(["evaluate", "--checkpoint", checkpoint, "--manifest", str(mini_dataset / "val.json"),
                     "--mode", "standard", "--k", "50", "--pseudo-manifest", pseudo,
                     "--hidden-gt", str(mini_dataset / "weak.hidden-gt.json"), "--run-dir", run_dir])
        assert code == 0
        report = load_report(run_dir)
        assert report.mode == "standard"
        assert report.monotone_in_k is None
        assert 0.0 <= report.pseudo_label_quality["fraction_matched"] <= 1.0
