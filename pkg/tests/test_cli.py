import csv
import socket
import threading
import time

import numpy as np
import pytest

from shapeapp import cli, formats
from shapeapp.synthetic import blob_dataset, mask_dataset

COMMANDS = ("train", "fit", "classify", "sample", "impute", "xval", "serve-worker", "train-distributed")
SMALL = ["-K", "2", "--iters", "2"]


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    ds = blob_dataset(6, dims=(16, 16), seed=4)
    formats.save_dataset(d / "d.samd", ds)
    formats.save_dataset(d / "holes.samd", mask_dataset(ds, 0.25, seed=1))
    assert cli.main(["train", "--data", str(d / "d.samd"), "--out", str(d / "m.samm"), *SMALL]) == 0
    return d


@pytest.mark.parametrize("command", COMMANDS)
def test_help(command, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text


def test_flag_misuse_exits_2(files, capsys):
    for argv in (
        ["train"],
        ["train", "--data", "x", "--out", "y", "--omega-v", "1,2"],
        ["nonsense"],
        ["classify", "--models", str(files / "m.samm"), "--data", str(files / "d.samd"),
         "--out", str(files / "p.csv"), "--priors", "0.5,0.5"],
        ["xval", "--data", str(files / "d.samd"), "--variants", "shape,bogus"],
    ):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 2
    capsys.readouterr()


def test_module_error_exits_1(files, capsys):
    assert cli.main(["fit", "--model", str(files / "missing.samm"), "--data", str(files / "d.samd"),
                     "--out", str(files / "f.samd")]) == 1
    assert cli.main(["train", "--data", str(files / "d.samd"), "--out", str(files / "bad.samm"),
                     "--model-kind", "bernoulli", *SMALL]) == 1
    assert "error:" in capsys.readouterr().err


def test_train_writes_model_and_log(files):
    model = formats.load_model(files / "m.samm")
    assert model.K == 2
    lines = (files / "m.samm.jsonl").read_text().splitlines()
    assert len(lines) >= 2


def test_train_is_byte_identical(files):
    args = ["train", "--data", str(files / "d.samd"), *SMALL, "--seed", "5"]
    assert cli.main(args + ["--out", str(files / "a.samm")]) == 0
    assert cli.main(args + ["--out", str(files / "b.samm"), "--threads", "3"]) == 0
    assert (files / "a.samm").read_bytes() == (files / "b.samm").read_bytes()


def test_all_model_flags(tmp_path):
    ds = blob_dataset(4, dims=(8, 8), seed=1, kind="binary")
    formats.save_dataset(tmp_path / "b.samd", ds)
    argv = ["train", "--data", str(tmp_path / "b.samd"), "--model-kind", "bernoulli", "-K", "3",
            "--iters", "1", "--lambda", "0.95,0.05", "--omega-a", "0.002,0.2,0",
            "--omega-v", "0.002,0.02,2,0.2,0.2", "--nu0", "16", "--seed", "1",
            "--out", str(tmp_path / "m.samm")]
    assert cli.main(argv) == 0
    model = formats.load_model(tmp_path / "m.samm")
    assert model.hyper.nu0 == 16 and model.hyper.noise == "bernoulli"


def test_fit_classify_impute_sample(files):
    assert cli.main(["fit", "--model", str(files / "m.samm"), "--data", str(files / "d.samd"),
                     "--out", str(files / "f.samd")]) == 0
    Z, Hd = formats.features_from_bytes((files / "f.samd").read_bytes())
    assert Z.shape == Hd.shape == (2, 6)

    models = f"{files / 'm.samm'},{files / 'a.samm'}"
    assert cli.main(["classify", "--models", models, "--data", str(files / "d.samd"),
                     "--out", str(files / "p.csv")]) == 0
    with open(files / "p.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    for r in rows:
        assert abs(float(r["p0"]) + float(r["p1"]) - 1) < 1e-12

    assert cli.main(["impute", "--model", str(files / "m.samm"), "--data", str(files / "holes.samd"),
                     "--out", str(files / "filled.samd"), "--grid-out", str(files / "imp")]) == 0
    filled = formats.load_dataset(files / "filled.samd")
    assert filled.mask.all()
    assert (files / "imp.pgm").exists() and (files / "imp.png").exists()

    assert cli.main(["sample", "--model", str(files / "m.samm"), "--rows", "2", "--cols", "3",
                     "--out", str(files / "s"), "--modes-out", str(files / "modes")]) == 0
    assert (files / "s.pgm").exists() and (files / "modes.png").exists()


def test_xval_four_rows(files, capsys):
    out = files / "xv.csv"
    assert cli.main(["xval", "--data", str(files / "d.samd"), "--variants", "shape,appearance,shared,split",
                     "-K", "2", "--iters", "1", "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["variant"] for r in rows] == ["shape", "appearance", "shared", "split"]
    assert len(capsys.readouterr().out.splitlines()) == 5


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _wait_listening(port):
    # binding fails once the worker holds the port; connecting would consume its session
    for _ in range(200):
        with socket.socket() as s:
            try:
                s.bind(("127.0.0.1", port))
            except OSError:
                return
        time.sleep(0.05)
    raise TimeoutError(port)


def test_distributed_commands(files):
    port = _free_port()
    worker = threading.Thread(target=cli.main, args=(["serve-worker", "--data", str(files / "d.samd"),
                                                      "--port", str(port)],), daemon=True)
    worker.start()
    _wait_listening(port)
    assert cli.main(["train-distributed", "--workers", f"127.0.0.1:{port}", "--out", str(files / "dist.samm"),
                     "--seed", "5", *SMALL]) == 0
    worker.join(10)
    assert (files / "dist.samm").read_bytes() == (files / "a.samm").read_bytes()
