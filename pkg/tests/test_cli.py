import csv

import pytest

from mecam import netpbm
from mecam.cli import main
from mecam.config import RunConfig, parse_text, resolve
from mecam.errors import ConfigError
from mecam.metrics import auroc, fpr_at_tpr, read_report
from mecam.scoring import calibrate_threshold, read_score_dump

SMALL = ["--set", "stage_widths=4,8,8,8", "--set", "input_size=32"]


# --- config ---


def test_config_parsing(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nseed = 5\nepochs=3  # trailing\nexit_mask = 4; 1,2,3,4\nscorers = mecam, mood\n")
    cfg = resolve(f, env={})
    assert (cfg.seed, cfg.epochs) == (5, 3)
    assert cfg.exit_mask == ((4,), (1, 2, 3, 4))
    assert cfg.scorers == ("mecam", "mood_energy")


def test_unknown_key_is_named(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("seeed = 1\n")
    with pytest.raises(ConfigError, match="seeed"):
        resolve(f, env={})


def test_precedence(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("seed = 1\n")
    assert resolve(f, env={}).seed == 1
    assert resolve(f, env={"MECAM_SEED": "2"}).seed == 2
    assert resolve(f, {"seed": 3}, env={"MECAM_SEED": "2"}).seed == 3
    assert resolve(None, env={}).seed == RunConfig().seed


def test_dump_parses_back():
    cfg = resolve(None, {"exit_mask": ((1, 3),), "exit_loss_weights": (1.0, 2.0, 0.0, 1.0)}, env={})
    assert resolve(None, parse_text(cfg.dump()), env={}) == cfg


def test_bad_values():
    with pytest.raises(ConfigError):
        parse_text("epochs = many\n")
    with pytest.raises(ConfigError):
        resolve(None, {"exit_mask": ((5,),)}, env={})


# --- commands ---


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, out = root / "data", root / "out"
    assert main(["synth", "--out", str(data), "--seed", "3", "--n-per-class", "20"]) == 0
    common = ["--data-root", str(data), "--out", str(out), *SMALL]
    assert main(["train", *common, "--epochs", "2"]) == 0
    assert main(["calibrate", *common]) == 0
    assert main(["eval", *common, "--ood", "ood_noise.csv", "--scorers", "mecam,msp,energy,mood",
                 "--exit-mask", "4", "--exit-mask", "1,2,3,4"]) == 0
    return data, out, common


def test_synth_refuses_non_empty_dir(run):
    data = run[0]
    assert main(["synth", "--out", str(data)]) == 1
    for name in ("id_train.csv", "id_calib.csv", "id_test.csv", "ood_noise.csv", "ood_stripes.csv", "ood_rings.csv"):
        assert (data / name).is_file()


def test_train_outputs(run):
    out = run[1]
    rows = list(csv.reader((out / "loss_log.csv").open()))
    assert rows[0] == ["epoch", "loss"] and len(rows) == 3
    assert (out / "model.ckpt").is_file()


def test_calibrate_reproduces_from_dump(run):
    out = run[1]
    dump = read_score_dump(out / "calib_scores.csv")
    with open(out / "thresholds.csv") as fh:
        for row in csv.DictReader(fh):
            vals = [r.score for r in dump if r.scorer == row["scorer"]]
            assert calibrate_threshold(vals, float(row["target_tpr"])).tau == float(row["tau"])


def test_eval_rows_and_recompute(run):
    out = run[1]
    reports = read_report(out / "report.csv")
    assert [r.scorer for r in reports] == ["mecam@4", "mecam", "msp", "energy", "mood_energy"]
    dump = read_score_dump(out / "scores.csv")
    for r in reports:
        ids = [d.score for d in dump if d.scorer == r.scorer and d.label == "ID"]
        ood = [d.score for d in dump if d.scorer == r.scorer and d.label == "OOD"]
        assert r.auroc == auroc(ids, ood)
        assert (r.fpr95, r.tau) == fpr_at_tpr(ids, ood, 0.95)


def test_resolved_config_written(run):
    text = (run[1] / "config.resolved").read_text()
    assert "exit_mask = 4; 1,2,3,4" in text


def test_score_command(run, capsys):
    data, out, common = run
    img = str(data / "id" / "disk" / "0000.pgm")
    assert main(["score", *common, "--input", img, "--thresholds", str(out / "thresholds.csv")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4
    assert all(line.split()[-1] in ("ID", "OOD") for line in lines)


def test_cam_command(run, tmp_path):
    data, out, common = run
    img = str(data / "id" / "square" / "0001.pgm")
    args = ["cam", "--data-root", str(data), "--checkpoint", str(out / "model.ckpt"), "--input", img]
    assert main([*args, "--out", str(tmp_path / "all")]) == 0
    names = sorted(p.name for p in (tmp_path / "all").iterdir())
    assert names == ["aggregate.pgm", "config.resolved", "exit_1.pgm", "exit_2.pgm", "exit_3.pgm", "exit_4.pgm", "masked.ppm"]
    assert main([*args, "--out", str(tmp_path / "one"), "--exit-mask", "2"]) == 0
    agg = (tmp_path / "one" / "aggregate.pgm").read_bytes()
    assert agg == (tmp_path / "one" / "exit_2.pgm").read_bytes()
    masked = netpbm.read_image(tmp_path / "one" / "masked.ppm")
    assert masked.shape == (3, 32, 32)


def test_exit_codes(run, tmp_path):
    data, out, common = run
    assert main(["train", "--set", "bogus=1"]) == 1
    assert main(["eval", "--data-root", str(data), "--out", str(tmp_path), "--checkpoint", str(tmp_path / "x"),
                 "--ood", "ood_noise.csv"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 1


def test_missing_calib_split_named(run, tmp_path, capsys):
    data, out, common = run
    rc = main(["calibrate", "--data-root", str(data), "--manifest", "id_train.csv", "--out", str(tmp_path),
               "--checkpoint", str(out / "model.ckpt")])
    assert rc == 2
    assert "'calib'" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_error_exit_code(run, tmp_path):
    data, out, common = run
    rc = main(["train", "--data-root", str(data), "--out", str(tmp_path), *SMALL, "--epochs", "1",
               "--set", "lr_start=1e30", "--set", "lr_end=1e30"])
    assert rc == 3
