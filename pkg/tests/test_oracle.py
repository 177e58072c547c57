import numpy as np
import pytest

from nonlocal_design import (
    DesignField,
    FormKind,
    PairClass,
    ParameterError,
    assemble_stiffness,
    build_interval_mesh,
    disk_mesh_for_dofs,
    extend_with_horizon,
    singular_pair_rule,
)
from nonlocal_design.oracle import (
    KORN_FLOOR,
    bbm_limit_probe,
    dense_fractional_assembly_1d,
    korn_probe,
    pair_reference_2d,
    run_checks,
)

# value of the 2-element, s = 1/2, R = 1 matrix; agrees with an independent
# mpmath double integral (2.32304153891748)
TWO_ELEMENT_BASELINE = 2.3230415389174


def test_two_element_baseline():
    mesh = build_interval_mesh(0.0, 1.0, 2)
    K = dense_fractional_assembly_1d(mesh, DesignField.constant(mesh, 1.0), 0.5, 1.0)
    assert K.shape == (1, 1)
    assert K[0, 0] == pytest.approx(TWO_ELEMENT_BASELINE, rel=1e-9)


def test_oracle_linearity_and_symmetry():
    mesh = extend_with_horizon(build_interval_mesh(0.0, 1.0, 6), 0.3)
    one = dense_fractional_assembly_1d(mesh, DesignField.constant(mesh, 1.0), 0.4, 0.3)
    c = dense_fractional_assembly_1d(mesh, DesignField.constant(mesh, 1.7), 0.4, 0.3)
    np.testing.assert_allclose(c, 1.7 * one, rtol=1e-9)
    # centro-symmetry for a symmetric mesh and design
    a = DesignField(np.array([0.3, 1.2, 0.8, 0.8, 1.2, 0.3]))
    K = dense_fractional_assembly_1d(mesh, a, 0.4, 0.3)
    np.testing.assert_allclose(K, K[::-1, ::-1], rtol=1e-9)
    np.linalg.cholesky(K)


@pytest.mark.parametrize("s", [0.25, 0.75])
def test_fast_matches_oracle(s, rng):
    mesh = extend_with_horizon(build_interval_mesh(0.0, 1.0, 8), 0.25)
    a = DesignField(rng.uniform(0.1, 2.0, 8))
    K = assemble_stiffness(mesh, a, FormKind.fractional_conductivity(s, 0.25)).to_dense()
    ref = dense_fractional_assembly_1d(mesh, a, s, 0.25)
    assert np.abs(K - ref).max() <= 1e-6 * np.abs(ref).max()


def test_oracle_preconditions():
    mesh = build_interval_mesh(0.0, 1.0, 65)
    with pytest.raises(ParameterError):
        dense_fractional_assembly_1d(mesh, DesignField.constant(mesh), 0.5, 0.1)
    small = extend_with_horizon(build_interval_mesh(0.0, 1.0, 4), 0.2)
    with pytest.raises(ParameterError):
        dense_fractional_assembly_1d(small, DesignField.constant(small), 0.5, 0.3)


def test_pair_reference_2d_identical():
    tri = np.array([[0.0, 0.0], [1.0, 0.2], [0.3, 0.9]])
    f = np.array([[0.3, -1.0, 0.5]])
    s = 0.5
    ref = pair_reference_2d(tri, tri, f, f, s)
    rule = singular_pair_rule(PairClass.IDENTICAL, s, 6, 2)
    J = abs(np.linalg.det(np.array([tri[1] - tri[0], tri[2] - tri[0]]))) ** 2
    d = rule.x @ f.T - rule.y @ f.T
    r = np.linalg.norm(rule.x @ tri - rule.y @ tri, axis=1)
    val = J * np.einsum("q,qa,qb->ab", rule.weights * r ** (-2 - 2 * s), d, d)
    assert val[0, 0] == pytest.approx(ref[0, 0], rel=1e-7)


def test_bbm_probe():
    mesh = build_interval_mesh(0.0, 1.0, 8)
    hat = np.zeros(7)
    hat[3] = 1.0
    rungs, local = bbm_limit_probe(mesh, hat, (0.5, 0.9, 0.99, 0.999), 1.0)
    assert local == pytest.approx(16.0)
    assert abs(rungs[-1][1] - local) <= 0.1 * local
    rungs2, local2 = bbm_limit_probe(mesh, 2 * hat, (0.5, 0.9), 1.0)
    np.testing.assert_allclose([e for _, e in rungs2], [4 * e for _, e in rungs[:2]], rtol=1e-12)
    zero, _ = bbm_limit_probe(mesh, np.zeros(7), (0.5, 0.9), 1.0)
    assert all(e == 0 for _, e in zero)


def test_korn_probe():
    ratios = korn_probe(disk_mesh_for_dofs(1.0, 9), (0.3, 0.9), 0.3, samples=50)
    assert all(r > KORN_FLOOR for _, r in ratios)
    with pytest.raises(ParameterError):
        korn_probe(build_interval_mesh(0, 1, 4), (0.5,), 0.1)


def test_run_checks_quick():
    results = run_checks(quick=True)
    assert all(r.passed for r in results), [r.line() for r in results]
