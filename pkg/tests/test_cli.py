from nonlocal_design.cli import main
from nonlocal_design.mesh import load_mesh


def test_mesh_command(tmp_path, capsys):
    out = tmp_path / "disk.txt"
    assert main(["mesh", "--dofs", "49", "--horizon", "0.2", "--out", str(out)]) == 0
    mesh = load_mesh(out)
    assert mesh.n_dofs == 49 and abs(mesh.horizon - 0.2) < 1e-12
    assert "49 dofs" in capsys.readouterr().out


def test_solve_command(tmp_path, capsys):
    out = tmp_path / "u.txt"
    assert main(["solve", "--dim", "1", "--elements", "16", "--s", "0.5", "--R", "0.2", "--out", str(out)]) == 0
    assert "compliance=" in capsys.readouterr().out
    assert out.read_text().startswith("1 ")


def test_optimize_command(tmp_path, capsys):
    assert main(["optimize", "--dim", "1", "--elements", "16", "--s", "1", "--iterations", "5", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert text.startswith("dofs,iterations,s,R,u_l2,u_semi,a_l2,cost")
    assert (tmp_path / "results.csv").read_text() == text


def test_study_command(tmp_path, capsys):
    cfg = tmp_path / "study.cfg"
    cfg.write_text("study=s_up_one\ndim=1\ns_ladder=0.5,1\nr_ladder=0.2,0\nelements_ladder=16\niterations=5\n")
    assert main(["study", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert "cost_gap=" in capsys.readouterr().out
    assert (tmp_path / "o" / "summary.txt").exists()


def test_bad_input_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("study=unknown\n")
    assert main(["study", str(cfg)]) == 2
    assert "error:" in capsys.readouterr().err


def test_check_quick(capsys):
    assert main(["check", "--quick"]) == 0
    assert "checks passed" in capsys.readouterr().out
