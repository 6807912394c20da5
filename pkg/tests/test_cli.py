import json

import numpy as np
import pytest

from voxafford.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_PARSE, EXIT_USAGE, main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text("d=8\nheads=2\nk_nn=4\nd_pos=6\ndecoder_layers=1\nbatch_size=4\n"
                                   "stage1_epochs=1\nstage2_epochs=1\n")
    assert main(["gen", "--out", str(root / "data"), "--n", "10", "--seed", "3", "--holdout", "mug:contain",
                 "--points", "256"]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def stage2(workdir):
    common = ["--config", str(workdir / "tiny.cfg"), "--data", str(workdir / "data")]
    assert main(["train", *common, "--stage", "1", "--out", str(workdir / "s1")]) == EXIT_OK
    assert main(["train", *common, "--stage", "2", "--init", str(workdir / "s1"),
                 "--out", str(workdir / "s2")]) == EXIT_OK
    return workdir / "s2"


class TestGen:
    def test_outputs_and_determinism(self, workdir, tmp_path):
        assert main(["gen", "--out", str(tmp_path), "--n", "10", "--seed", "3", "--holdout", "mug:contain",
                     "--points", "256"]) == EXIT_OK
        for name in ("manifest.tsv", "dataset.json", "clouds/s00003.xyz"):
            assert (tmp_path / name).read_bytes() == (workdir / "data" / name).read_bytes()
        run = json.loads((tmp_path / "run.json").read_text())
        assert run["command"] == "gen" and run["seed"] == 3

    @pytest.mark.parametrize("argv", [["--n", "0"], ["--n", "5", "--points", "10"], ["--n", "x"]])
    def test_usage_errors(self, tmp_path, argv):
        assert main(["gen", "--out", str(tmp_path), "--holdout", "mug:contain", *argv]) == EXIT_USAGE

    def test_bad_holdout_is_config_error(self, tmp_path):
        assert main(["gen", "--out", str(tmp_path), "--n", "5", "--holdout", "table:pour"]) == EXIT_CONFIG


class TestTrainEvalPredict:
    def test_stage2_needs_init(self, workdir, tmp_path):
        assert main(["train", "--data", str(workdir / "data"), "--stage", "2", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_missing_data_is_io_error(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope"), "--stage", "1", "--out", str(tmp_path)]) == EXIT_IO

    def test_bad_config(self, workdir, tmp_path):
        (tmp_path / "bad.cfg").write_text("d=8\nthis line is broken\n")
        argv = ["train", "--config", str(tmp_path / "bad.cfg"), "--data", str(workdir / "data"), "--stage", "1",
                "--out", str(tmp_path / "o")]
        assert main(argv) == EXIT_PARSE
        (tmp_path / "bad.cfg").write_text("d=10\nheads=4\n")
        assert main(argv) == EXIT_CONFIG

    def test_train_outputs(self, stage2):
        for name in ("params.bin", "params.manifest", "meta.json", "metrics.csv", "run.json"):
            assert (stage2 / name).exists()

    def test_oracle_eval_is_perfect(self, workdir, tmp_path):
        assert main(["eval", "--data", str(workdir / "data"), "--oracle", "--out", str(tmp_path)]) == EXIT_OK
        metrics = json.loads((tmp_path / "open_set_test_metrics.json").read_text())["metrics"]
        assert all(v == 1.0 for v in metrics.values())
        assert (tmp_path / "open_set_test_metrics.csv").read_text().splitlines()[1].split(",")[0] == "100.0000"

    def test_eval_checkpoint(self, workdir, stage2, tmp_path):
        assert main(["eval", "--checkpoint", str(stage2), "--data", str(workdir / "data"), "--split", "val",
                     "--out", str(tmp_path)]) == EXIT_OK
        assert (tmp_path / "val_metrics.json").exists()
        assert main(["eval", "--data", str(workdir / "data"), "--out", str(tmp_path)]) == EXIT_USAGE

    def test_predict(self, workdir, stage2, tmp_path):
        cloud = workdir / "data" / "clouds" / "s00000.xyz"
        out = tmp_path / "pred" / "mask.txt"
        assert main(["predict", "--checkpoint", str(stage2), "--cloud", str(cloud), "--query", "grasp the handle",
                     "--out", str(out)]) == EXIT_OK
        probs = np.array([float(v) for v in out.read_text().split()])
        assert probs.shape == (256,) and np.all((probs >= 0) & (probs <= 1))
        meta = json.loads(out.with_name("mask.txt.json").read_text())
        assert meta["query"] == "grasp the handle" and meta["n_positive"] == int((probs > 0.5).sum())
        assert out.with_name("mask.txt.run.json").exists()

    def test_predict_errors(self, workdir, stage2, tmp_path):
        cloud = workdir / "data" / "clouds" / "s00000.xyz"
        base = ["predict", "--checkpoint", str(stage2), "--out", str(tmp_path / "m.txt")]
        assert main([*base, "--cloud", str(cloud), "--query", "  "]) == EXIT_USAGE
        assert main([*base, "--cloud", str(tmp_path / "missing.xyz"), "--query", "pour"]) == EXIT_IO
        (tmp_path / "bad.xyz").write_text("0 0 0\n1 1\n")
        assert main([*base, "--cloud", str(tmp_path / "bad.xyz"), "--query", "pour"]) == EXIT_PARSE


class TestAblate:
    def test_matrix_run(self, workdir, tmp_path):
        (tmp_path / "m.cfg").write_text("d=8\nheads=2\nk_nn=4\nd_pos=6\ndecoder_layers=1\nbatch_size=4\n"
                                        "stage1_epochs=1\nstage2_epochs=1\nseeds=0\n"
                                        "variant.full.fusion.mode=full\nvariant.off.fusion.mode=disabled\n")
        assert main(["ablate", "--config", str(tmp_path / "m.cfg"), "--data", str(workdir / "data"),
                     "--out", str(tmp_path / "o")]) == EXIT_OK
        rows = (tmp_path / "o" / "ablation.csv").read_text().splitlines()
        assert [r.split(",")[0] for r in rows[1:]] == ["full", "off"]
        assert (tmp_path / "o" / "ablation_per_seed.csv").exists()

    def test_missing_matrix(self, workdir, tmp_path):
        assert main(["ablate", "--config", str(tmp_path / "none.cfg"), "--data", str(workdir / "data"),
                     "--out", str(tmp_path)]) == EXIT_IO

    def test_no_command(self):
        assert main([]) == EXIT_USAGE
