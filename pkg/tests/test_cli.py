import numpy as np
import pytest

from pillmap.cli import EXIT_GRADCHECK, EXIT_INVALID, EXIT_OK, main
from pillmap.config import load_config
from pillmap.io import read_pills

SMALL = """\
grid: {nx: 40, ny: 20}
init: {n: 3}
stages:
  - {objective: reward, ext: 0.5, tol: 1.0e-2, max_iter: 20, radius_frozen: true, fixed_radius: 0.05}
  - {objective: tracking, ext: 0.0, tol: 1.0e-6, max_iter: 30}
"""


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return p


def test_run_writes_outputs_and_valid_echo(small, tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(small), "--out", str(out), "--no-figures"]) == EXIT_OK
    for name in ("pills.csv", "density.csv", "density.pgm", "residual.csv", "abs_residual.csv",
                 "abs_residual.pgm", "reward.csv", "trace.csv", "config.yaml"):
        assert (out / name).is_file(), name
    assert len(read_pills(out / "pills.csv")) == 3
    assert load_config(out / "config.yaml") == load_config(small)


def test_run_writes_figures(small, tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(small), "--out", str(out)]) == EXIT_OK
    pngs = sorted(p.name for p in out.glob("*.png"))
    assert pngs
    assert all((out / p).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n" for p in pngs)


def test_run_deterministic(small, tmp_path):
    for d in ("a", "b"):
        assert main(["run", "--config", str(small), "--out", str(tmp_path / d), "--no-figures"]) == EXIT_OK
    for name in ("pills.csv", "trace.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_missing_target_exit_1_no_outputs(small, tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run", "--config", str(small), "--target", str(tmp_path / "nope.csv"), "--out", str(out)])
    assert code == EXIT_INVALID
    assert not out.exists()
    assert "nope.csv" in capsys.readouterr().err


def test_invalid_config_exit_1(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("grid: {nx: -3}\n")
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_INVALID


def test_run_with_csv_target(small, tmp_path):
    t = tmp_path / "t.csv"
    field = np.zeros((20, 40))
    field[8:12, 5:35] = 1.0
    t.write_text("\n".join(",".join(str(v) for v in row) for row in field) + "\n")
    assert main(["run", "--config", str(small), "--target", str(t), "--out", str(tmp_path / "o"),
                 "--no-figures"]) == EXIT_OK


@pytest.mark.parametrize("mode", ["cross", "randcross"])
def test_init(tmp_path, mode):
    out = tmp_path / "p.csv"
    assert main(["init", "--mode", mode, "--n", "5", "--out", str(out)]) == EXIT_OK
    assert len(read_pills(out)) == 5


def test_gradcheck_default_config_exit_0(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("{}\n")
    assert main(["gradcheck", "--config", str(p), "--samples", "8"]) == EXIT_OK


def test_gradcheck_failure_exit_3(tmp_path, monkeypatch):
    from pillmap import cli
    from pillmap.gradcheck import ModuleSummary

    monkeypatch.setattr(cli, "module_report", lambda *a, **k: [ModuleSummary("geometry", 1, 0, 1.0, 1.0, 1)])
    p = tmp_path / "c.yaml"
    p.write_text("{}\n")
    assert main(["gradcheck", "--config", str(p)]) == EXIT_GRADCHECK


def test_heuristics_subcommand(small, tmp_path, capsys):
    pills = tmp_path / "p.csv"
    main(["init", "--n", "8", "--out", str(pills)])
    out = tmp_path / "h"
    assert main(["heuristics", "--pills", str(pills), "--config", str(small), "--out", str(out)]) == EXIT_OK
    assert (out / "heuristics.csv").read_text().startswith("id,AR,UR\n")
    assert len(read_pills(out / "pills_heuristics.csv")) <= 8
    assert "after merging" in capsys.readouterr().out


def test_refine_subcommand(small, tmp_path):
    run = tmp_path / "run"
    assert main(["run", "--config", str(small), "--out", str(run), "--no-figures"]) == EXIT_OK
    out = tmp_path / "ref"
    code = main(["refine", "--config", str(small), "--pills", str(run / "pills.csv"),
                 "--target", str(run / "density.csv"), "--out", str(out), "--no-figures"])
    assert code == EXIT_OK
    assert (out / "refinement.csv").read_text().startswith("k,mask_elements,J_before,J_after,accepted")


def test_bad_pill_table_exit_1(small, tmp_path):
    pills = tmp_path / "p.csv"
    pills.write_text("id,px,py\n")
    assert main(["heuristics", "--pills", str(pills), "--config", str(small)]) == EXIT_INVALID


def test_study_subcommand(small, tmp_path):
    out = tmp_path / "s"
    assert main(["study", "hessian", "--config", str(small), "--out", str(out)]) == EXIT_OK
    lines = (out / "study_hessian.csv").read_text().splitlines()
    assert lines[0].startswith("hessian_mode,history,n_pills,F,F_norm,evals")
    assert [ln.split(",")[0] for ln in lines[1:]] == ["exact", "lbfgs"]


def test_study_rejects_file_target(small, tmp_path):
    t = tmp_path / "t.csv"
    t.write_text("0,1\n1,0\n")
    small.write_text(SMALL + f"target: {{path: {t}}}\n")
    assert main(["study", "resolution", "--config", str(small), "--out", str(tmp_path / "s")]) == EXIT_INVALID
