import csv

import pytest

from remarnet.cli import main
from remarnet.formats import load_tns
from remarnet.train import METRICS_HEADER


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def write_column(path, values, header=None):
    with open(path, "w") as fh:
        if header:
            fh.write(header + "\n")
        fh.writelines(f"{v}\n" for v in values)


def test_wilcoxon_fixture(tmp_path, capsys):
    write_column(tmp_path / "a.csv", [2, 4, 6, 8, 10], header="acc")
    write_column(tmp_path / "b.csv", [1, 2, 3, 4, 5], header="acc")
    code, out, _ = run(capsys, "wilcoxon", "--a", str(tmp_path / "a.csv"), "--b", str(tmp_path / "b.csv"))
    assert code == 0
    assert out.strip() == "n=5 W+=15 p=0.0625 method=exact"


def test_wilcoxon_errors(tmp_path, capsys):
    write_column(tmp_path / "a.csv", [1, 2])
    write_column(tmp_path / "b.csv", [1, 2, 3])
    code, _, err = run(capsys, "wilcoxon", "--a", str(tmp_path / "a.csv"), "--b", str(tmp_path / "b.csv"))
    assert code == 2 and "--b" in err
    code, _, err = run(capsys, "wilcoxon", "--a", str(tmp_path / "a.csv"), "--b", str(tmp_path / "a.csv"))
    assert code == 2 and "degenerate" in err
    code, _, err = run(capsys, "wilcoxon", "--a", str(tmp_path / "missing.csv"), "--b", str(tmp_path / "a.csv"))
    assert code == 2


def test_gradcheck_micro(capsys):
    code, out, _ = run(capsys, "gradcheck", "--preset", "micro")
    assert code == 0
    assert "overall: max_rel_error=" in out and "PASS" in out


def test_gradcheck_failure_exit_code(capsys):
    code, out, _ = run(capsys, "gradcheck", "--preset", "micro", "--tolerance", "1e-12")
    assert code == 3 and "FAIL" in out


def test_usage_errors(capsys):
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys)[0] == 1
    assert run(capsys, "train", "--epochs", "three")[0] == 1
    assert run(capsys, "eval")[0] == 1  # --checkpoint is required


def test_config_errors_name_the_field(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--preset", "micro", "--set", "train.lr_xx=1", "--out", str(tmp_path))
    assert code == 2 and "train.lr_xx" in err
    (tmp_path / "bad.ini").write_text("train.epochs = 2\nmodel.widget = 3\n")
    code, _, err = run(capsys, "train", "--config", str(tmp_path / "bad.ini"))
    assert code == 2 and "model.widget" in err
    code, _, err = run(capsys, "train", "--preset", "micro", "--data", str(tmp_path / "nothing.tns"))
    assert code == 2


def test_train_outputs_and_determinism(tmp_path, capsys):
    (tmp_path / "run.ini").write_text("data.num_classes = 3\ndata.per_class = 4\ndata.height = 16\n"
                                      "data.width = 16\nmodel.channels = 4\nmodel.rm_hidden = 8\n"
                                      "model.fc_hidden = 8\ntrain.epochs = 2\ntrain.batch_size = 4\n")
    for name in ("r1", "r2"):
        code, _, _ = run(capsys, "train", "--config", str(tmp_path / "run.ini"), "--seed", "7",
                         "--out", str(tmp_path / name))
        assert code == 0
    for f in ("metrics.csv", "checkpoint.tns", "config.ini"):
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()
    assert (tmp_path / "r1" / "metrics.csv").read_text().splitlines()[0] == METRICS_HEADER
    assert "train.seed = 7" in (tmp_path / "r1" / "config.ini").read_text()
    assert "rm.fc1.weight" in load_tns(tmp_path / "r1" / "checkpoint.tns")


def test_print_config_reproduces_run(tmp_path, capsys):
    code, printed, _ = run(capsys, "train", "--preset", "micro", "--seed", "3", "--epochs", "1",
                           "--set", "train.lr_rm=0.002", "--print-config")
    assert code == 0 and "train.lr_rm = 0.002" in printed
    (tmp_path / "resolved.ini").write_text(printed)
    run(capsys, "train", "--preset", "micro", "--seed", "3", "--epochs", "1", "--set", "train.lr_rm=0.002",
        "--out", str(tmp_path / "a"))
    run(capsys, "train", "--config", str(tmp_path / "resolved.ini"), "--out", str(tmp_path / "b"))
    for f in ("metrics.csv", "checkpoint.tns"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_flags_override_file(tmp_path, capsys):
    (tmp_path / "c.ini").write_text("train.epochs = 9\ntrain.seed = 1\n")
    _, out, _ = run(capsys, "train", "--config", str(tmp_path / "c.ini"), "--epochs", "4", "--print-config")
    assert "train.epochs = 4" in out and "train.seed = 1" in out


def test_eval_and_export(tmp_path, capsys):
    run(capsys, "train", "--preset", "micro", "--out", str(tmp_path / "run"))
    ckpt = str(tmp_path / "run" / "checkpoint.tns")
    code, out, _ = run(capsys, "eval", "--checkpoint", ckpt)
    assert code == 0 and out.startswith("test_acc_rm=")
    code, out, _ = run(capsys, "export-emb", "--checkpoint", ckpt, "--out", str(tmp_path / "e.csv"))
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0][0] == "label" and len(rows) == 1 + 6


def test_gen_data_then_train_on_file(tmp_path, capsys):
    data = str(tmp_path / "d.tns")
    assert run(capsys, "gen-data", "--preset", "micro", "--out", data)[0] == 0
    assert load_tns(data)["images"].shape == (12, 1, 16, 16)
    code, _, _ = run(capsys, "train", "--preset", "micro", "--data", data, "--out", str(tmp_path / "run"))
    assert code == 0


def test_ablate_and_stability_outputs(tmp_path, capsys):
    code, _, _ = run(capsys, "ablate", "--preset", "micro", "--rounds", "2", "--out", str(tmp_path / "ab"))
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "ab" / "ablation_rounds.csv")))
    assert len(rows) == 2 * 5
    code, out, _ = run(capsys, "stability", "--preset", "micro", "--proto-sets", "2", "--rounds", "1",
                       "--out", str(tmp_path / "st"))
    assert code == 0 and "spread=" in out


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--preset", "micro", "--set", "train.lr_embedding=1e30",
                       "--set", "train.lr_rm=1e30", "--set", "train.lr_fc=1e30", "--epochs", "3",
                       "--out", str(tmp_path / "boom"))
    assert code == 3, err
