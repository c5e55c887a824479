import subprocess
import sys

import pytest

from transmem.checkpoint import file_digest
from transmem.cli import main

NET_FLAGS = ["--layers", "1", "--channels", "4", "--filter-size", "3", "--subscale", "2"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    common = ["--size", "8", "--input-len", "3", "--predict-len", "3"]
    assert run("gen-data", "--num-glyphs", 1, "--count", 12, "--out", d / "g1.tmud", *common) == 0
    assert run("gen-data", "--num-glyphs", 2, "--count", 12, "--seed", 2, "--out", d / "g2.tmud", *common) == 0
    assert run("gen-data", "--num-glyphs", 2, "--count", 6, "--seed", 2, "--split", "val",
               "--out", d / "g2v.tmud", *common) == 0
    assert run("gen-data", "--generator", "blobs", "--aridity", 0.3, "--count", 6, "--out", d / "b.tmud",
               *common) == 0
    assert run("pretrain", "--dataset", d / "g1.tmud", "--iters", 4, "--out", d / "s1.tmuc", *NET_FLAGS) == 0
    return d


def test_gen_data_is_deterministic(files, tmp_path):
    args = ["gen-data", "--num-glyphs", 2, "--count", 12, "--seed", 2, "--size", 8, "--input-len", 3,
            "--predict-len", 3, "--out", tmp_path / "again.tmud"]
    assert run(*args) == 0
    assert (tmp_path / "again.tmud").read_bytes() == (files / "g2.tmud").read_bytes()


def test_pretrain_twice_identical(files, tmp_path):
    assert run("pretrain", "--dataset", files / "g1.tmud", "--iters", 4, "--out", tmp_path / "s.tmuc",
               *NET_FLAGS) == 0
    assert (tmp_path / "s.tmuc").read_bytes() == (files / "s1.tmuc").read_bytes()
    assert (tmp_path / "s.tmuc.log").read_bytes() == (files / "s1.tmuc.log").read_bytes()


def test_transfer_train_evaluate_inspect(files, tmp_path, capsys):
    src = files / "s1.tmuc"
    before = file_digest(src)
    out = tmp_path / "t.tmuc"
    assert run("train", "--mode", "transfer", "--source", src, "--dataset", files / "g2.tmud",
               "--val-dataset", files / "g2v.tmud", "--iters", 4, "--val-every", 2, "--out", out,
               *NET_FLAGS) == 0
    assert file_digest(src) == before
    log = (tmp_path / "t.tmuc.log").read_text().splitlines()
    assert log[0].startswith("iter=1 loss=") and "distill=" in log[0]
    assert any("val_mse=" in line for line in log)

    capsys.readouterr()
    assert run("evaluate", "--checkpoint", out, "--dataset", files / "g2v.tmud", "--csi-threshold", 0.286,
               "--csv", tmp_path / "c.csv", "--out", tmp_path / "r.txt") == 0
    text = capsys.readouterr().out
    assert "evaluate config:" in text and "CSI" in text
    first = (tmp_path / "r.txt").read_text()
    assert run("evaluate", "--checkpoint", out, "--dataset", files / "g2v.tmud", "--csi-threshold", 0.286,
               "--out", tmp_path / "r.txt") == 0
    assert (tmp_path / "r.txt").read_text() == first
    assert (tmp_path / "c.csv").read_text().startswith("frame,mse,mae,ssim,csi\n")

    capsys.readouterr()
    assert run("inspect-gates", "--checkpoint", out, "--dataset", files / "g2v.tmud") == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[-2].startswith("source") and rows[-1].startswith("s1.tmuc")


def test_finetune_and_scratch(files, tmp_path):
    assert run("train", "--mode", "finetune", "--source", files / "s1.tmuc", "--dataset", files / "g2.tmud",
               "--iters", 2, "--out", tmp_path / "f.tmuc", *NET_FLAGS) == 0
    assert run("train", "--mode", "scratch", "--dataset", files / "g2.tmud", "--iters", 2,
               "--out", tmp_path / "s.tmuc", *NET_FLAGS) == 0
    assert "beta" not in (tmp_path / "s.tmuc.log").read_text()


def test_resume_cli(files, tmp_path):
    common = ["train", "--mode", "transfer", "--source", files / "s1.tmuc", "--dataset", files / "g2.tmud",
              "--iters", 5, "--val-every", 2, "--val-dataset", files / "g2v.tmud", *NET_FLAGS]
    assert run(*common, "--out", tmp_path / "full.tmuc") == 0
    assert run(*common, "--stop-after", 3, "--out", tmp_path / "part.tmuc") == 0
    assert run(*common, "--resume", tmp_path / "part.tmuc", "--out", tmp_path / "part.tmuc") == 0
    assert (tmp_path / "part.tmuc").read_bytes() == (tmp_path / "full.tmuc").read_bytes()
    assert (tmp_path / "part.tmuc.log").read_bytes() == (tmp_path / "full.tmuc.log").read_bytes()


def test_exit_codes(files, tmp_path, capsys):
    assert run("inspect-gates", "--checkpoint", files / "s1.tmuc", "--dataset", files / "g2v.tmud") == 1
    assert run("train", "--mode", "transfer", "--dataset", files / "g2.tmud", "--out", tmp_path / "x",
               *NET_FLAGS) == 1
    assert run("train", "--mode", "scratch", "--source", files / "s1.tmuc", "--dataset", files / "g2.tmud",
               "--out", tmp_path / "x", *NET_FLAGS) == 1
    (tmp_path / "junk").write_bytes(b"nope")
    assert run("evaluate", "--checkpoint", tmp_path / "junk", "--dataset", files / "g2.tmud") == 2
    assert run("evaluate", "--checkpoint", files / "s1.tmuc", "--dataset", tmp_path / "missing") == 2
    assert run("evaluate", "--checkpoint", files / "s1.tmuc", "--dataset", files / "b.tmud") == 0
    with pytest.raises(SystemExit) as exc:
        run("train", "--bogus-flag")
    assert exc.value.code == 1
    # a source whose state size differs from the target's
    assert run("pretrain", "--dataset", files / "g1.tmud", "--iters", 1, "--out", tmp_path / "s4.tmuc",
               "--layers", "1", "--channels", "4", "--filter-size", "3", "--subscale", "4") == 0
    assert run("train", "--mode", "transfer", "--source", tmp_path / "s4.tmuc", "--dataset", files / "g2.tmud",
               "--iters", 1, "--out", tmp_path / "y", *NET_FLAGS) == 1
    assert "subscale" in capsys.readouterr().err


def test_module_entry_point(files):
    proc = subprocess.run([sys.executable, "-m", "transmem", "info", "--dataset", str(files / "g1.tmud")],
                          capture_output=True, text=True, check=True)
    assert "kernels backend" in proc.stdout and "moving_glyphs" in proc.stdout
