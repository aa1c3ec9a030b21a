import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from hdmed.cli import main
from hdmed.dictionary_io import DictionaryStore
from hdmed.exceptions import CollapseError, DegenerateInputError

TINY = Path(__file__).resolve().parents[1] / "configs" / "tiny.toml"
COMMANDS = ["gen", "fit", "select", "compress", "match", "full-match", "eval", "info"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--spec", str(TINY), "--out", str(tmp / "d.hdmd")]) == 0
    S, P = DictionaryStore(tmp / "d.hdmd").read_all()
    rng = np.random.default_rng(0)
    rows = np.arange(0, len(S), 40)
    np.save(tmp / "q.npy", S[rows] + rng.normal(0, 0.005, (rows.size, S.shape[1])))
    np.save(tmp / "ref.npy", P[rows])
    return tmp


def run_ok(*argv):
    assert main([str(a) for a in argv]) == 0


def table(text):
    return {tuple(line.split("\t")[:-1]): line.split("\t")[-1] for line in text.strip().splitlines()[1:]}


def test_gen_then_info_reports_shape(workdir, capsys):
    capsys.readouterr()
    run_ok("info", workdir / "d.hdmd")
    rows = dict(line.split("\t") for line in capsys.readouterr().out.strip().splitlines()[1:])
    assert (rows["N"], rows["M"], rows["L"]) == ("2400", "32", "3")


def test_full_pipeline(workdir, capsys):
    w = workdir
    run_ok("fit", "--dict", w / "d.hdmd", "--k", 3, "--seed", 0, "--out", w / "m.hdmm", "--report", w / "r.tsv")
    out = capsys.readouterr()
    assert out.out == "" and "step" in out.err
    run_ok("compress", "--dict", w / "d.hdmd", "--model", w / "m.hdmm", "--out", w / "c.npz")
    run_ok("match", "--compressed", w / "c.npz", "--queries", w / "q.npy", "--out", w / "a.tsv")
    run_ok("full-match", "--dict", w / "d.hdmd", "--queries", w / "q.npy", "--out", w / "b.tsv")
    run_ok("select", "--dict", w / "d.hdmd", "--k-list", "1,2", "--out", w / "s.tsv")
    for name in ("m.hdmm", "r.tsv", "c.npz", "a.tsv", "b.tsv", "s.tsv"):
        assert (w / name).stat().st_size > 0
    capsys.readouterr()
    run_ok("eval", "--matched", w / "a.tsv", "--ref", w / "ref.npy")
    maes = table(capsys.readouterr().out)
    assert len(maes) == 3 and all(float(v) < 0.05 for v in maes.values())
    run_ok("eval", "--dict", w / "d.hdmd", "--model", w / "m.hdmm")
    assert float(table(capsys.readouterr().out)[("reconstruction", "rmse")]) > 0
    for name in ("m.hdmm", "c.npz"):
        run_ok("info", w / name)
    assert "compression_ratio" in capsys.readouterr().out


def test_fit_is_deterministic(workdir):
    for name in ("x.hdmm", "y.hdmm"):
        run_ok("fit", "--dict", workdir / "d.hdmd", "--k", 2, "--seed", 4, "--out", workdir / name)
    assert (workdir / "x.hdmm").read_bytes() == (workdir / "y.hdmm").read_bytes()


def test_exit_codes(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.hdmd"
    bad.write_bytes((workdir / "d.hdmd").read_bytes()[:100])
    assert main(["info", str(bad)]) == 3
    assert main(["info", str(tmp_path / "missing.hdmd")]) == 2
    assert main(["fit", "--dict", str(workdir / "d.hdmd"), "--k", "2", "--bogus", "1"]) == 2
    assert main([]) == 2
    np.save(tmp_path / "wide.npy", np.zeros((3, 7)))
    assert main(["full-match", "--dict", str(workdir / "d.hdmd"), "--queries", str(tmp_path / "wide.npy"),
                 "--out", str(tmp_path / "o.tsv")]) == 3
    assert capsys.readouterr().err.strip()


def test_collapse_and_degenerate_exit_codes(workdir, tmp_path, monkeypatch, capsys):
    import hdmed.cli as cli

    def collapsed(*args, **kwargs):
        raise CollapseError("component 1 lost its mass", components=[1])

    monkeypatch.setattr(cli, "fit_model", collapsed)
    argv = ["fit", "--dict", str(workdir / "d.hdmd"), "--k", "2", "--out", str(tmp_path / "m.hdmm")]
    assert main(argv) == 4
    assert not (tmp_path / "m.hdmm").exists()

    def degenerate(*args, **kwargs):
        raise DegenerateInputError("non-finite responsibilities")

    monkeypatch.setattr(cli, "fit_model", degenerate)
    assert main(argv) == 4
    assert len(capsys.readouterr().err.strip().splitlines()) == 2


@pytest.mark.parametrize("command", COMMANDS)
def test_help_for_every_subcommand(command, capsys):
    assert main([command, "--help"]) == 0
    assert "usage: hdmed " + command in capsys.readouterr().out


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "hdmed", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip().endswith("0.1.0")
