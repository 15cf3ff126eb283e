import csv
import math
import subprocess
import sys

import numpy as np
import pytest

from gplab import cli
from gplab.config import ConfigError, RunConfig, load_config, parse_config
from gplab.data import SplitPlan, ingest
from gplab.evaluation import read_predictions, read_report
from gplab.training import read_epoch_logs


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestConfig:
    def test_defaults_mirror_hyperparameter_table(self):
        c = RunConfig()
        assert (c.batch_size, c.epochs, c.lr, c.optimizer, c.weight_decay, c.scheduler, c.gamma) == \
            (16, 60, 0.001, "adam", 0.0001, "exponential", 0.9)

    def test_render_parse_round_trip(self):
        c = RunConfig(model="toy-B1", epochs=3, milestones=(5, 9), rotation_fill=255.0, data="d", fold=2)
        assert parse_config(c.render()) == c
        assert parse_config(RunConfig().render()) == RunConfig()

    def test_comments_and_blank_lines(self):
        c = parse_config("# a comment\n\nepochs = 5  # trailing\nmodel=toy-B2\n")
        assert c.epochs == 5 and c.model == "toy-B2"

    @pytest.mark.parametrize("text,match", [
        ("colour=red\n", "unknown key"), ("epochs\n", "key=value"), ("epochs=many\n", "bad value"),
        ("model=B9\n", "unknown model"), ("gamma=2\n", "gamma"), ("epochs=0\n", "epochs"),
    ])
    def test_rejections(self, text, match):
        with pytest.raises(ConfigError, match=match):
            parse_config(text)

    def test_precedence(self, tmp_path, monkeypatch):
        path = tmp_path / "r.cfg"
        path.write_text("epochs=4\n")
        monkeypatch.setenv("GPLAB_SEED", "17")
        c = load_config(path)
        assert c.seed == 17 and c.epochs == 4
        path.write_text("seed=3\n")
        assert load_config(path).seed == 3
        assert load_config(path, {"seed": 9, "epochs": None}).seed == 9

    def test_bad_env_seed(self, monkeypatch):
        monkeypatch.setenv("GPLAB_SEED", "x")
        with pytest.raises(ConfigError, match="GPLAB_SEED"):
            load_config()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.cfg")


class TestCommands:
    def test_generate_and_repeat(self, tmp_path):
        assert run("generate", "--out", tmp_path / "a", "--total", 600, "--size", 16, "--seed", 7) == 0
        files = sorted((tmp_path / "a").rglob("*.png"))
        assert len(files) == 600
        assert sorted(p.name for p in (tmp_path / "a").iterdir()) == sorted(["CT", "PN", "IC", "NC", "MP", "WM"])
        assert run("generate", "--out", tmp_path / "b", "--total", 600, "--size", 16, "--seed", 7) == 0
        assert all(p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes() for p in files)

    def test_generate_unwritable(self, tmp_path, capfd):
        (tmp_path / "f").write_text("x")
        assert run("generate", "--out", tmp_path / "f" / "d", "--total", 6, "--size", 16) == 2
        assert str(tmp_path / "f" / "d") in capfd.readouterr().err

    def test_generate_uses_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GPLAB_SEED", "7")
        run("generate", "--out", tmp_path / "e", "--total", 6, "--size", 16)
        run("generate", "--out", tmp_path / "s", "--total", 6, "--size", 16, "--seed", 7)
        assert (tmp_path / "e/CT/CT_00000.png").read_bytes() == (tmp_path / "s/CT/CT_00000.png").read_bytes()

    def test_split_holdout(self, synth_root, tmp_path):
        out = tmp_path / "h.csv"
        assert run("split", "--data", synth_root, "--mode", "holdout", "--seed", 1, "--out", out) == 0
        ds = ingest(synth_root)
        plan = SplitPlan.from_csv(out, ds)
        tr, va = plan.train_val()
        # per-class floor of 0.8 * {210, 60, 90, 186, 30, 24}
        assert (len(tr), len(va)) == (479, 121)
        np.testing.assert_array_equal(np.bincount(ds.labels[tr], minlength=6),
                                      [math.floor(0.8 * n) for n in ds.class_counts])

    def test_split_kfold(self, synth_root, tmp_path):
        out = tmp_path / "k.csv"
        assert run("split", "--data", synth_root, "--mode", "kfold", "--k", 5, "--out", out) == 0
        with open(out, newline="") as fh:
            folds = {row["fold"] for row in csv.DictReader(fh)}
        assert folds == {"0", "1", "2", "3", "4"}

    def test_split_k1_is_usage_error(self, synth_root, tmp_path):
        assert run("split", "--data", synth_root, "--mode", "kfold", "--k", 1, "--out", tmp_path / "k.csv") == 1

    def test_unknown_flag_and_command(self):
        with pytest.raises(SystemExit) as exc:
            run("split", "--bogus")
        assert exc.value.code == 1
        with pytest.raises(SystemExit) as exc:
            run("fly")
        assert exc.value.code == 1

    def test_config_command(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("GPLAB_SEED", "5")
        cfg = tmp_path / "r.cfg"
        cfg.write_text("epochs=2\n")
        assert run("config", "--config", cfg) == 0
        text = capsys.readouterr().out
        assert "epochs=2\n" in text and "seed=5\n" in text
        assert run("config", "--config", cfg, "--out", tmp_path / "o.cfg") == 0
        assert parse_config((tmp_path / "o.cfg").read_text()) == parse_config(text)
        cfg.write_text("nonsense=1\n")
        assert run("config", "--config", cfg) == 1


@pytest.fixture(scope="module")
def small_split(small_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("split")
    run("split", "--data", small_root, "--mode", "holdout", "--seed", 2, "--out", out / "h.csv")
    run("split", "--data", small_root, "--mode", "kfold", "--k", 5, "--seed", 2, "--out", out / "k.csv")
    return out / "h.csv", out / "k.csv"


@pytest.fixture(scope="module")
def default_run(small_root, small_split, tmp_path_factory):
    """The default configuration (60 epochs) on the small tree."""
    out = tmp_path_factory.mktemp("default_run")
    code = run("train", "--data", small_root, "--split", small_split[0], "--out", out, "--seed", 3)
    return code, out


class TestTrainCommand:
    def test_default_config_schedule(self, default_run):
        code, out = default_run
        assert code == 0
        rows = read_epoch_logs(out / "epoch_log.csv")
        assert len(rows) == 60
        assert sorted(p.name for p in out.glob("*.gplb")) == \
            [f"epoch_{e:03d}.gplb" for e in (20, 25, 30, 35, 60)]
        assert (out / "run.cfg").is_file()
        assert parse_config((out / "run.cfg").read_text()).seed == 3

    def test_fold_flag(self, small_root, small_split, tmp_path):
        cfg = tmp_path / "r.cfg"
        cfg.write_text("epochs=1\n")
        assert run("train", "--config", cfg, "--data", small_root, "--split", small_split[1], "--fold", 2,
                   "--out", tmp_path / "o") == 0
        ds = ingest(small_root)
        plan = SplitPlan.from_csv(small_split[1], ds)
        tr, va = plan.train_val(2)
        assert set(np.asarray(plan.assignments)[tr]) == {0, 1, 3, 4}
        from gplab.checkpoint import load_checkpoint
        assert load_checkpoint(tmp_path / "o" / "epoch_001.gplb").meta["fold"] == 2

    def test_kfold_split_needs_fold(self, small_root, small_split, tmp_path):
        assert run("train", "--data", small_root, "--split", small_split[1], "--out", tmp_path, "--epochs", 1) == 1

    def test_missing_split(self, small_root, tmp_path):
        assert run("train", "--data", small_root, "--split", tmp_path / "none.csv", "--out", tmp_path) == 2

    def test_numeric_failure_exit_3(self, small_root, small_split, tmp_path):
        cfg = tmp_path / "r.cfg"
        cfg.write_text("epochs=3\nlr=1e36\nweight_decay=0\ngamma=1.0\n")
        with np.errstate(all="ignore"):
            code = run("train", "--config", cfg, "--data", small_root, "--split", small_split[0], "--out", tmp_path / "o")
        assert code == 3

    def test_resume(self, small_root, small_split, tmp_path, default_run):
        _, out = default_run
        import shutil
        shutil.copytree(out, tmp_path / "r")
        for p in (tmp_path / "r").glob("epoch_06*.gplb"):
            p.unlink()
        assert run("train", "--data", small_root, "--split", small_split[0], "--out", tmp_path / "r", "--seed", 3,
                   "--resume", tmp_path / "r" / "epoch_035.gplb") == 0
        assert (tmp_path / "r" / "epoch_060.gplb").read_bytes() == (out / "epoch_060.gplb").read_bytes()
        assert (tmp_path / "r" / "epoch_log.csv").read_bytes() == (out / "epoch_log.csv").read_bytes()


class TestPredictEvaluate:
    def test_predict_and_single_ensemble_agree(self, small_root, small_split, default_run, tmp_path):
        _, out = default_run
        ck = out / "epoch_060.gplb"
        assert run("predict", "--checkpoint", ck, "--data", small_root, "--split", small_split[0],
                   "--out-csv", tmp_path / "p.csv") == 0
        assert run("ensemble", "--checkpoints", ck, "--data", small_root, "--split", small_split[0],
                   "--out-csv", tmp_path / "e.csv") == 0
        assert (tmp_path / "p.csv").read_bytes() == (tmp_path / "e.csv").read_bytes()
        ids, _ = read_predictions(tmp_path / "p.csv")
        assert len(ids) == 12 and all("/" in i for i in ids)
        assert (tmp_path / "e_report.txt").is_file()

    def test_unlabeled_directory(self, default_run, tmp_path, small_root):
        _, out = default_run
        flat = tmp_path / "flat"
        flat.mkdir()
        for p in sorted((small_root / "CT").glob("*.png"))[:3]:
            (flat / p.name).write_bytes(p.read_bytes())
        assert run("predict", "--checkpoint", out / "epoch_060.gplb", "--data", flat, "--out-csv", tmp_path / "u.csv") == 0
        ids, pred = read_predictions(tmp_path / "u.csv")
        assert ids == sorted(p.name for p in flat.iterdir()) and len(pred) == 3
        assert not (tmp_path / "u_report.txt").exists()

    def test_evaluate_train_subset(self, default_run, small_root, small_split, tmp_path):
        _, out = default_run
        assert run("evaluate", "--checkpoint", out / "epoch_060.gplb", "--data", small_root,
                   "--split", small_split[0], "--subset", "train", "--out", tmp_path) == 0
        rep = read_report(tmp_path / "report.txt")
        assert rep["n_samples"] == 48
        assert abs(rep["macro_f1"] - np.mean([rep[f"f1_{c}"] for c in ("CT", "PN", "IC", "NC", "MP", "WM")])) < 1e-12
        assert (tmp_path / "report_confusion.csv").is_file()

    def test_mismatched_ensemble(self, default_run, small_root, tmp_path):
        _, out = default_run
        from gplab.checkpoint import Checkpoint, save_checkpoint
        from gplab.model import build, get_spec
        other = save_checkpoint(tmp_path / "b1.gplb", Checkpoint("toy-B1", 1, dict(build(get_spec("toy-B1")).state())))
        assert run("ensemble", "--checkpoints", out / "epoch_060.gplb", other, "--data", small_root,
                   "--out-csv", tmp_path / "x.csv") == 2

    def test_corrupt_checkpoint(self, small_root, tmp_path):
        (tmp_path / "bad.gplb").write_bytes(b"GPLBjunk")
        assert run("predict", "--checkpoint", tmp_path / "bad.gplb", "--data", small_root,
                   "--out-csv", tmp_path / "x.csv") == 2

    def test_empty_subset(self, default_run, tmp_path, small_root):
        _, out = default_run
        ds = ingest(small_root)
        only_train = tmp_path / "t.csv"
        SplitPlan(tuple(["train"] * len(ds)), 0, 0.8).to_csv(only_train, ds)
        assert run("evaluate", "--checkpoint", out / "epoch_060.gplb", "--data", small_root,
                   "--split", only_train, "--out", tmp_path / "r") == 2


def test_console_entry_points(tmp_path):
    for argv in (["gplab"], [sys.executable, "-m", "gplab"]):
        res = subprocess.run(argv + ["config"], capture_output=True, text=True)
        assert res.returncode == 0 and "model=toy-B0" in res.stdout
        res = subprocess.run(argv + ["split", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "s.csv")],
                             capture_output=True, text=True)
        assert res.returncode == 2 and "missing" in res.stderr and res.stdout == ""
