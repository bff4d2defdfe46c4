import subprocess
import sys

import pytest

from usgrip import cli
from usgrip.data import load_dataset


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen", "--out", d / "data.ugd", "--frames-per-class", 8) == 0
    assert run("train", "--data", d / "data.ugd", "--out", d / "f32.uqm", "--epochs", 1,
               "--batch-size", 8, "--history", d / "hist.json") == 0
    return d


def test_gen_output(workdir):
    ds = load_dataset(workdir / "data.ugd")
    assert ds.frames.shape == (32, 80, 80)
    assert len(ds.indices("test")) == 8


@pytest.mark.parametrize("scheme,quant", [("f16", "f16"), ("dynamic", "dynamic_i8"),
                                          ("uint8", "uint8_affine")])
def test_quantize_and_eval(workdir, scheme, quant, capsys):
    out = workdir / f"{scheme}.uqm"
    assert run("quantize", "--model", workdir / "f32.uqm", "--scheme", scheme, "--out", out,
               "--data", workdir / "data.ugd", "--calib-samples", 8) == 0
    capsys.readouterr()
    rep_a, rep_b = workdir / f"{scheme}_a.txt", workdir / f"{scheme}_b.txt"
    assert run("eval", "--model", out, "--data", workdir / "data.ugd", "--report", rep_a) == 0
    assert run("eval", "--model", out, "--data", workdir / "data.ugd", "--report", rep_b) == 0
    assert rep_a.read_bytes() == rep_b.read_bytes()
    assert f"quant = {quant}\n" in capsys.readouterr().out


def test_uint8_requires_data(workdir):
    assert run("quantize", "--model", workdir / "f32.uqm", "--scheme", "uint8",
               "--out", workdir / "x.uqm") == cli.EXIT_ARGS


def test_bad_arguments_exit_2():
    with pytest.raises(SystemExit) as e:
        run("train", "--epochs", "many")
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        run("serve", "--bind", "nowhere", "--model", "m.uqm")
    assert e.value.code == 2


def test_missing_or_corrupt_file_exit_3(workdir, tmp_path):
    assert run("eval", "--model", tmp_path / "absent.uqm", "--data", workdir / "data.ugd") == 3
    bad = tmp_path / "bad.uqm"
    bad.write_bytes(b"XXXX" + bytes(40))
    assert run("eval", "--model", bad, "--data", workdir / "data.ugd") == 3
    assert run("train", "--data", bad, "--out", tmp_path / "o.uqm") == 3


def test_runtime_failure_exit_4(workdir, tmp_path):
    # batch larger than the train split
    assert run("train", "--data", workdir / "data.ugd", "--out", tmp_path / "o.uqm",
               "--epochs", 1, "--batch-size", 500) == 4
    # quantizing a quantized model
    assert run("quantize", "--model", workdir / "f32.uqm", "--scheme", "f16",
               "--out", tmp_path / "h.uqm") == 0
    assert run("quantize", "--model", tmp_path / "h.uqm", "--scheme", "f16",
               "--out", tmp_path / "o.uqm") == 4


def test_seed_from_environment(monkeypatch):
    monkeypatch.setenv("USGRIP_SEED", "7")
    args = cli.build_parser().parse_args(["gen", "--out", "x"])
    assert args.seed == 7


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "usgrip", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("gen", "train", "quantize", "eval", "serve", "stream", "bench"):
        assert cmd in proc.stdout
