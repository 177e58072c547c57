import numpy as np
import pytest

from nonlocal_design import (
    HORIZON,
    INTERIOR,
    PairClass,
    ParameterError,
    build_disk_mesh,
    build_interval_mesh,
    classify_pair,
    disk_mesh_for_dofs,
    extend_with_horizon,
    load_mesh,
    save_mesh,
)
from nonlocal_design.mesh import mesh_from_text, point_location, polygon_area


def test_interval_counts():
    m = build_interval_mesh(0.0, 1.0, 4)
    assert (m.n_vertices, m.n_elements, m.n_dofs) == (5, 4, 3)
    np.testing.assert_allclose(m.measures, 0.25)
    assert m.h == pytest.approx(0.25)


@pytest.mark.parametrize("args", [(1.0, 0.0, 4), (0.0, 1.0, 0), (0.0, np.inf, 3)])
def test_interval_rejects_bad_input(args):
    with pytest.raises(ParameterError):
        build_interval_mesh(*args)


@pytest.mark.parametrize("dofs", [9, 49, 961])
def test_disk_mesh_for_dofs(dofs):
    m = disk_mesh_for_dofs(1.0, dofs)
    assert m.n_dofs == dofs
    assert np.all(m.measures > 0)
    # boundary vertices sit on the circle
    r = np.linalg.norm(m.vertices[~m.interior_vertex], axis=1)
    np.testing.assert_allclose(r, 1.0, atol=1e-14)
    assert np.all(np.linalg.norm(m.vertices[m.interior_vertex], axis=1) < 1.0)


def test_disk_mesh_respects_target_h():
    for h in (0.5, 0.2, 0.1):
        assert build_disk_mesh(1.0, h).h <= h


def test_disk_polygon_area_converges():
    errs = [abs(polygon_area(disk_mesh_for_dofs(1.0, d)) - np.pi) for d in (49, 225, 961)]
    assert errs[0] > errs[1] > errs[2]
    assert polygon_area(disk_mesh_for_dofs(1.0, 961)) == pytest.approx(np.sum(disk_mesh_for_dofs(1.0, 961).measures))


def test_disk_mesh_rejects_bad_dofs():
    with pytest.raises(ParameterError):
        disk_mesh_for_dofs(1.0, 10)


def test_horizon_layer_1d():
    m = extend_with_horizon(build_interval_mesh(0.0, 1.0, 8), 0.3)
    assert m.horizon == 0.3
    assert m.n_dofs == 7
    x = m.vertices[:, 0]
    assert x.min() == pytest.approx(-0.3) and x.max() == pytest.approx(1.3)
    assert np.all(m.element_region[: m.n_interior_elements] == INTERIOR)
    assert np.all(m.element_region[m.n_interior_elements :] == HORIZON)
    assert np.sum(m.measures) == pytest.approx(1.6)
    assert m.interior_mesh().n_elements == 8


def test_horizon_layer_2d(disk25):
    m = extend_with_horizon(disk25, 0.2)
    r = np.linalg.norm(m.vertices, axis=1)
    assert r.max() == pytest.approx(1.2)
    assert m.n_dofs == disk25.n_dofs
    assert np.all(m.measures > 0)
    assert m.interior_mesh() == disk25


def test_horizon_zero_is_identity(line16):
    assert extend_with_horizon(line16, 0.0) is line16
    with pytest.raises(ParameterError):
        extend_with_horizon(line16, -1.0)


def test_classify_pair(disk25):
    m = disk25
    rng = np.random.default_rng(0)
    for _ in range(50):
        e1, e2 = rng.integers(0, m.n_elements, 2)
        assert classify_pair(m, e1, e2) == classify_pair(m, e2, e1)
        assert (classify_pair(m, e1, e2) == PairClass.IDENTICAL) == (e1 == e2)
    with pytest.raises(ParameterError):
        classify_pair(m, 0, m.n_elements)


def test_classify_pair_1d(line16):
    assert classify_pair(line16, 3, 4) == PairClass.VERTEX_TOUCH
    assert classify_pair(line16, 3, 5) == PairClass.DISJOINT


def test_text_roundtrip(tmp_path, disk25):
    m = extend_with_horizon(disk25, 0.2)
    path = tmp_path / "m.txt"
    save_mesh(m, path)
    back = load_mesh(path)
    assert back == m
    assert back.horizon == pytest.approx(0.2)
    assert back.content_hash == m.content_hash


def test_malformed_text():
    with pytest.raises(ParameterError):
        mesh_from_text("1 3 2\n0 0\n")


def test_point_location(disk25):
    rng = np.random.default_rng(1)
    pts = rng.uniform(-0.6, 0.6, (40, 2))
    elem, bary = point_location(disk25, pts)
    assert np.all(elem >= 0)
    rebuilt = np.einsum("pk,pkd->pd", bary, disk25.vertices[disk25.elements[elem]])
    np.testing.assert_allclose(rebuilt, pts, atol=1e-13)
    elem, _ = point_location(disk25, np.array([[5.0, 5.0]]))
    assert elem[0] == -1
