import pytest

from nonlocal_design import (
    ConfigurationError,
    StudyConfig,
    parse_study_config,
    run_h_refinement_study,
    run_joint_ac_study,
    run_s_up_one_study,
    run_table_row,
)
from nonlocal_design.experiments import RECORD_COLUMNS, check_record, run_rung
from nonlocal_design.mesh import mesh_from_text


def test_parse_config():
    cfg = parse_study_config(
        """
        # joint ladder
        study=joint_ac
        dim=1
        s_ladder=0.5,0.9
        r_ladder=0.2,0.05
        elements_ladder=16,32
        iterations=10
        f=ball:3:0.25:0.5
        bounds=0.2:1.5
        touching_order=4
        out=/tmp/x
        """
    )
    assert cfg.study == "joint_ac" and cfg.dim == 1
    assert cfg.iterations == [10, 10]
    assert cfg.bounds == (0.2, 1.5)
    assert cfg.source.radius == 0.25
    assert cfg.quad.touching_order == 4


@pytest.mark.parametrize(
    "text",
    [
        "study=nope",
        "study=table_row\nfoo=1",
        "study=table_row\ntau",
        "study=table_row\ns_ladder=0.5,0.6\nr_ladder=0.1,0.1,0.1",
        "study=joint_ac\ndim=1\ns_ladder=0.9,0.5\nr_ladder=0.1\nelements_ladder=16,32",
        "study=joint_ac\ndim=1\ns_ladder=0.5,0.9\nr_ladder=0.1\nelements_ladder=32,16",
        "study=table_row\ns_ladder=0.5\nr_ladder=0",
        "study=table_row\ndim=3",
        "study=table_row\ntau=abc",
    ],
)
def test_parse_config_errors(text):
    with pytest.raises(ConfigurationError):
        parse_study_config(text)


def _cfg(**kw):
    base = dict(dim=1, iterations=[10])
    base.update(kw)
    return StudyConfig(**base)


def test_table_row_outputs(tmp_path):
    cfg = _cfg(study="table_row", s_ladder=[0.5], r_ladder=[0.2], resolution_ladder=[16], out=str(tmp_path))
    rec = run_table_row(cfg)
    lines = (tmp_path / "results.csv").read_text().splitlines()
    assert lines[0] == ",".join(RECORD_COLUMNS)
    assert len(lines) == 2
    assert rec.dofs == 15 and rec.iterations == 10
    assert min(rec.u_l2, rec.u_semi, rec.a_l2, rec.cost) >= 0
    field = (tmp_path / "fields_0.txt").read_text()
    header = field.splitlines()[0].split()
    assert header[0] == "1"
    # stripping the value column gives back the mesh text format
    stripped = [ln.rsplit(" ", 1)[0] for ln in field.splitlines()[1:]]
    mesh = mesh_from_text("\n".join([field.splitlines()[0]] + stripped))
    assert mesh.n_dofs == 15
    assert (tmp_path / "timings.csv").exists()


def test_record_self_consistency():
    cfg = _cfg(study="table_row", s_ladder=[0.5], r_ladder=[0.2], resolution_ladder=[16])
    rung = run_rung(cfg, 0)
    assert check_record(rung, cfg.source) < 1e-8
    rec = rung.record
    # with Lambda = 1/2, q = 2 the penalty is half the squared design norm
    assert rec.cost - 0.5 * rec.a_l2**2 == pytest.approx(rung.result.compliance, rel=1e-10)


def test_determinism(tmp_path):
    outs = []
    for k in range(2):
        cfg = _cfg(study="table_row", s_ladder=[0.5], r_ladder=[0.2], resolution_ladder=[16], out=str(tmp_path / str(k)))
        run_table_row(cfg)
        outs.append((tmp_path / str(k) / "results.csv").read_bytes())
    assert outs[0] == outs[1]


def test_h_refinement_local_rate():
    cfg = _cfg(study="h_refinement", s_ladder=[1.0], r_ladder=[0.0], resolution_ladder=[32, 64, 128], iterations=[20])
    res = run_h_refinement_study(cfg)
    assert res.summary["state_decreasing"]
    assert all(r >= 1.0 for r in res.summary["state_rate"])


def test_h_refinement_fractional():
    cfg = _cfg(study="h_refinement", s_ladder=[0.5], r_ladder=[0.2], resolution_ladder=[16, 32, 64], iterations=[10])
    res = run_h_refinement_study(cfg)
    assert res.summary["cost_decreasing"]


def test_h_refinement_identical_meshes():
    cfg = _cfg(study="h_refinement", s_ladder=[0.5], r_ladder=[0.2], resolution_ladder=[16, 16], iterations=[5])
    res = run_h_refinement_study(cfg)
    assert res.summary["cost_cauchy"] == [0.0]
    assert res.summary["state_cauchy"][0] == pytest.approx(0.0, abs=1e-14)


def test_s_up_one_gap_decreases():
    cfg = _cfg(study="s_up_one", s_ladder=[0.5, 0.9, 0.99], r_ladder=[0.2], resolution_ladder=[64], iterations=[10])
    res = run_s_up_one_study(cfg)
    assert res.summary["gap_decreasing"]


def test_s_up_one_trivial():
    cfg = _cfg(study="s_up_one", s_ladder=[1.0], r_ladder=[0.0], resolution_ladder=[32])
    res = run_s_up_one_study(cfg)
    assert res.summary["cost_gap"] == [0.0]


def test_joint_ac_self_comparison():
    cfg = _cfg(
        study="joint_ac", s_ladder=[1.0], r_ladder=[0.0], resolution_ladder=[32], reference_resolution=32
    )
    res = run_joint_ac_study(cfg)
    assert res.summary["state_error"][0] == pytest.approx(0.0, abs=1e-12)
    assert res.summary["cost_error"][0] == pytest.approx(0.0, abs=1e-12)
