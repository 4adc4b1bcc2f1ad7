import os
import subprocess
import sys

import pytest

from fobmaml.cli import build_parser, main
from fobmaml.experiment import RunRecord, read_config, read_records, write_records

BASE = os.path.join(os.path.dirname(__file__), "..", "configs", "base.toml")
SMALL = ["--set", "family.d=6", "--set", "family.M=3", "--set", "family.eig_min=0.1", "--seed", "0", "--jobs", "1"]


def test_linear_edge_case(tmp_path, capsys):
    out = tmp_path / "lin.csv"
    code = main(["bias-sweep", "--config", BASE, "--set", "family.d=1", "--set", "family.linear=true",
                 "--output", str(out), "--jobs", "1"])
    assert code == 0
    rows = read_records(str(out))
    fo = [r for r in rows if r.method in ("fobmaml_forward", "fobmaml_symmetric", "fomaml")]
    assert fo and all(r.bias_abs <= 1e-10 for r in fo)
    eff = read_config(str(tmp_path / "lin.config.toml"))
    assert eff.family.d == 1 and eff.family.linear
    assert "median bias" in capsys.readouterr().err


def test_missing_config_exits_2(capsys):
    assert main(["bias-sweep", "--config", "no/such/file.toml"]) == 2
    assert "no/such/file.toml" in capsys.readouterr().err


def test_bad_config_key_exits_2(capsys):
    assert main(["train", "--set", "outer.iterz=3"]) == 2
    assert "iterz" in capsys.readouterr().err


def test_unwritable_output_exits_3(tmp_path, capsys):
    code = main(["bias-sweep", *SMALL, "--set", "methods=['fomaml']", "--output", str(tmp_path / "x" / "y.csv")])
    assert code == 3
    assert "cannot write" in capsys.readouterr().err


def test_csv_to_stdout(capsys):
    assert main(["bias-sweep", *SMALL, "--set", "methods=['fomaml']", "--set", "inner.budgets=[5]",
                 "--output", "-"]) == 0
    out, err = capsys.readouterr()
    assert out.splitlines()[0].startswith("seed,method,inner_iters")
    assert len(out.splitlines()) == 2
    assert "effective config" in err


def test_check_grad_passes(capsys):
    assert main(["check-grad", *SMALL, "--probes", "20", "--strict"]) == 0
    err = capsys.readouterr().err
    assert "FAIL" not in err and err.count("PASS") == 4


def test_check_grad_fault_injection(capsys):
    assert main(["check-grad", *SMALL, "--probes", "10", "--inject-fault", "--strict"]) == 1
    err = capsys.readouterr().err
    assert "FAIL  finite-difference meta-gradient" in err
    assert main(["check-grad", *SMALL, "--probes", "10", "--inject-fault"]) == 0


def test_check_grad_scalar_printout(capsys):
    assert main(["check-grad", "--set", "family.d=1", "--set", "family.M=1", "--probes", "5"]) == 0
    assert "task 0 at theta=1: exact" in capsys.readouterr().err


def test_train_strict_divergence(tmp_path, capsys):
    args = ["train", *SMALL, "--set", "methods=['fomaml']", "--set", "outer.iters=10",
            "--set", "outer.lr_grid=[1e6]", "--output", str(tmp_path / "t.csv")]
    assert main(args) == 0
    assert main(args + ["--strict"]) == 1
    assert "DIVERGED" in capsys.readouterr().err


def test_train_exact_monotone(tmp_path):
    out = tmp_path / "t.csv"
    assert main(["train", *SMALL, "--set", "methods=['exact']", "--set", "outer.schedule='theory'",
                 "--set", "outer.iters=20", "--output", str(out)]) == 0
    losses = [r.outer_loss for r in read_records(str(out))]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert "chosen_outer_lr" in (tmp_path / "t.config.toml").read_text()


def test_smoothness_quadratic(capsys):
    assert main(["smoothness", *SMALL, "--set", "probe.n_pairs=30", "--strict"]) == 0
    assert "PASS" in capsys.readouterr().err


@pytest.fixture
def square_csv(tmp_path):
    path = tmp_path / "sq.csv"
    write_records([RunRecord(seed=0, method="m", nu=x, bias_abs=x * x) for x in (0.5, 1.0, 2.0, 4.0)], str(path))
    return str(path)


def test_slopes_on_square(square_csv, capsys):
    assert main(["slopes", "--input", square_csv]) == 0
    assert "slope 2.0000" in capsys.readouterr().err
    assert main(["slopes", "--input", square_csv, "--expect", "2", "--strict"]) == 0
    assert main(["slopes", "--input", square_csv, "--expect", "1", "--strict"]) == 1
    assert main(["slopes", "--input", square_csv, "--where", "method=other", "--strict"]) == 0
    assert main(["slopes", "--input", square_csv, "--where", "seed=0", "--by-group", "--expect", "2"]) == 0


def test_slopes_usage_errors(tmp_path, capsys):
    assert main(["slopes"]) == 2
    assert main(["slopes", "--input", str(tmp_path / "none.csv")]) == 3


def test_slopes_on_forward_sweep(tmp_path, capsys):
    out = tmp_path / "fwd.csv"
    assert main(["bias-sweep", "--set", "family.d=20", "--set", "family.M=2", "--seed", "0", "--jobs", "1",
                 "--set", "methods=['fobmaml_forward']", "--set", "inner.solver='exact'",
                 "--set", "inner.nu_mode='grid'", "--set", "inner.nu_values=[1e-1, 1e-2, 1e-3, 1e-4]",
                 "--set", "inner.budgets=[0]", "--output", str(out)]) == 0
    assert main(["slopes", "--input", str(out), "--expect", "1.0", "--strict"]) == 0
    assert "PASS" in capsys.readouterr().err


SUBCOMMANDS = {
    "bias-sweep": ["--config", "--set", "--seed", "--jobs", "--output", "--strict"],
    "train": ["--config", "--set", "--seed", "--jobs", "--output", "--strict"],
    "check-grad": ["--config", "--set", "--probes", "--strict"],
    "smoothness": ["--config", "--set", "--strict"],
    "slopes": ["--input", "--x", "--y", "--where", "--by-group", "--expect", "--tol", "--strict"],
}


@pytest.mark.parametrize("sub", sorted(SUBCOMMANDS))
def test_help_lists_flags(sub, capsys):
    with pytest.raises(SystemExit) as exc:
        main([sub, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in SUBCOMMANDS[sub]:
        assert flag in text


@pytest.mark.parametrize("sub", sorted(SUBCOMMANDS))
def test_unknown_flag_rejected(sub):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([sub, "--bogus"])
    assert exc.value.code == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "fobmaml", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "bias-sweep" in res.stdout
