import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nonlocal_design import (
    ConfigurationError,
    DesignField,
    FormKind,
    NumericalIntegrityError,
    ParameterError,
    QuadConfig,
    Source,
    StateField,
    assemble_load,
    assemble_stiffness,
    build_interval_mesh,
    disk_mesh_for_dofs,
    element_gradient_values,
    extend_with_horizon,
    gamma_constant,
    seminorm,
)
from nonlocal_design.forms import (
    FractionalOperator,
    SymSparseMatrix,
    l2_norm,
    load_matrix,
    local_energy,
    save_matrix,
)

KINDS_1D = [FormKind.fractional_conductivity(0.5, 0.25), FormKind.local_conductivity()]


def _random_design(mesh, rng):
    return DesignField(rng.uniform(0.1, 2.0, mesh.n_interior_elements))


def test_gamma_constant():
    assert gamma_constant(0.5, 1) == pytest.approx(0.5)
    assert gamma_constant(0.3, 2) == pytest.approx(1.4 / np.pi)
    with pytest.raises(ParameterError):
        gamma_constant(1.0, 1)


def test_form_kind_validation():
    with pytest.raises(ParameterError):
        FormKind.fractional_conductivity(1.2, 0.1)
    with pytest.raises(ParameterError):
        FormKind.fractional_peridynamic(0.5, 0.0)
    assert FormKind.from_parameters(1.0, 0.0) == FormKind.local_conductivity()
    assert FormKind.from_parameters(1.0, 0.0, vector=True) == FormKind.local_elasticity()
    assert FormKind.from_parameters(0.4, 0.1).is_fractional


def test_design_field_bounds(line16):
    with pytest.raises(ParameterError):
        DesignField(np.full(16, 2.5))
    with pytest.raises(ParameterError):
        DesignField(np.ones(16), bounds=(0.0, 1.0))
    d = DesignField(np.ones(16))
    assert d.exterior_value == pytest.approx(1.05)
    with pytest.raises(ConfigurationError):
        d.all_values(build_interval_mesh(0, 1, 8))
    assert DesignField.constant(line16, 1.0).exterior_value == 1.0
    assert d.l2_norm(line16) == pytest.approx(1.0)


def test_state_field_zero_off_dofs(line16_ext, rng):
    u = StateField(line16_ext, rng.standard_normal(line16_ext.n_dofs))
    vals = u.vertex_values()
    assert np.all(vals[~line16_ext.interior_vertex] == 0.0)
    with pytest.raises(ConfigurationError):
        StateField(line16_ext, np.zeros(3))


def test_l2_norm_exact_1d():
    mesh = build_interval_mesh(0.0, 1.0, 2)
    # hat of height 1 on [0, 1]: int = 1/3
    assert l2_norm(mesh, np.array([1.0])) == pytest.approx(np.sqrt(1 / 3))


def test_sym_sparse_roundtrip(rng, tmp_path, line16):
    A = rng.standard_normal((15, 15))
    A = A @ A.T
    K = SymSparseMatrix.from_dense(A)
    np.testing.assert_allclose(K.to_dense(), A, atol=1e-14)
    v = rng.standard_normal(15)
    assert K.quadratic(v) == pytest.approx(v @ A @ v)
    np.testing.assert_allclose(K @ v, A @ v, atol=1e-12)
    path = tmp_path / "K.bin"
    save_matrix(path, K, line16, 0.5, 0.25)
    K2, s, R = load_matrix(path, line16)
    np.testing.assert_array_equal(K2.to_dense(), K.to_dense())
    assert (s, R) == (0.5, 0.25)
    with pytest.raises(ConfigurationError):
        load_matrix(path, build_interval_mesh(0, 1, 8))


def test_source_parse():
    assert Source.parse("const:1") == Source()
    b = Source.parse("ball:3:0.25:-0.2:0.1")
    assert (b.value, b.radius, b.center) == (3.0, 0.25, (-0.2, 0.1))
    assert Source.parse(str(b)) == b
    for bad in ("const", "ball:1:0:0", "box:1", "const:x"):
        with pytest.raises(ParameterError):
            Source.parse(bad)


def test_load_vector(disk25):
    F = assemble_load(disk25, Source())
    # sum_i F_i = int f sum_i phi_i, close to the area for a fine enough mesh
    assert F.sum() < np.sum(disk25.measures)
    assert np.all(F > 0)
    Fb = assemble_load(disk25, Source.parse("ball:3:0.25:-0.2:0.1"))
    assert 0 < Fb.sum() <= 3 * np.pi * 0.25**2 + 1e-12


def test_load_vector_ball_converges():
    # int f * (sum of hats) approaches 3 * |ball| as the mesh refines
    vals = []
    for dofs in (225, 961, 3969):
        mesh = disk_mesh_for_dofs(1.0, dofs)
        vals.append(assemble_load(mesh, Source.parse("ball:3:0.25:-0.2:0.1")).sum())
    errs = [abs(v - 3 * np.pi * 0.0625) for v in vals]
    assert errs[-1] < 0.05 * 3 * np.pi * 0.0625
    assert errs[-1] < errs[0]


def test_local_stiffness_1d():
    mesh = build_interval_mesh(0.0, 1.0, 4)
    K = assemble_stiffness(mesh, DesignField.constant(mesh, 1.0), FormKind.local_conductivity()).to_dense()
    expected = 4 * (2 * np.eye(3) - np.eye(3, k=1) - np.eye(3, k=-1))
    np.testing.assert_allclose(K, expected, atol=1e-12)


@pytest.mark.parametrize("kind", KINDS_1D)
def test_symmetry_and_spd(kind, line16, line16_ext, rng):
    mesh = line16_ext if kind.is_fractional else line16
    K = assemble_stiffness(mesh, _random_design(mesh, rng), kind).to_dense()
    np.testing.assert_array_equal(K, K.T)
    assert np.linalg.eigvalsh(K).min() > 0


@pytest.mark.parametrize("kind", KINDS_1D)
def test_coefficient_linearity(kind, line16, line16_ext, rng):
    mesh = line16_ext if kind.is_fractional else line16
    a, b = _random_design(mesh, rng), _random_design(mesh, rng)
    t = 0.3
    c = DesignField(t * a.values + (1 - t) * b.values)
    Ka, Kb, Kc = (assemble_stiffness(mesh, d, kind).to_dense() for d in (a, b, c))
    np.testing.assert_allclose(Kc, t * Ka + (1 - t) * Kb, rtol=1e-12, atol=1e-12 * np.abs(Kc).max())


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), s=st.sampled_from([0.2, 0.5, 0.8]))
def test_bracket_property(seed, s):
    rng = np.random.default_rng(seed)
    mesh = extend_with_horizon(build_interval_mesh(0.0, 1.0, 8), 0.3)
    kind = FormKind.fractional_conductivity(s, 0.3)
    K1 = assemble_stiffness(mesh, DesignField.constant(mesh, 1.0), kind)
    Ka = assemble_stiffness(mesh, _random_design(mesh, rng), kind)
    for v in rng.standard_normal((20, mesh.n_dofs)):
        e1, ea = K1.quadratic(v), Ka.quadratic(v)
        assert 0.1 * e1 <= ea * (1 + 1e-12)
        assert ea <= 2.0 * e1 * (1 + 1e-12)


@pytest.mark.parametrize("kind", KINDS_1D)
def test_partition_identity_1d(kind, line16, line16_ext, rng):
    mesh = line16_ext if kind.is_fractional else line16
    u = rng.standard_normal(mesh.n_dofs)
    g = element_gradient_values(mesh, u, kind, all_elements=True)
    K1 = assemble_stiffness(mesh, DesignField.constant(mesh, 1.0), kind)
    assert g.sum() == pytest.approx(K1.quadratic(u), rel=1e-10)
    assert seminorm(mesh, u, kind) == pytest.approx(np.sqrt(K1.quadratic(u)), rel=1e-10)


def test_gradient_values_local_hand_formula(line16, rng):
    u = rng.standard_normal(line16.n_dofs)
    full = np.concatenate([[0.0], u, [0.0]])
    expected = np.diff(full) ** 2 * 16  # |u'|^2 |T| with |T| = 1/16
    np.testing.assert_allclose(element_gradient_values(line16, u, FormKind.local_conductivity()), expected)
    assert np.all(element_gradient_values(line16, np.zeros(15), FormKind.local_conductivity()) == 0)


def test_energy_matches_coefficient_weighting(disk25_ext, rng):
    kind = FormKind.fractional_conductivity(0.4, 0.3)
    a = _random_design(disk25_ext, rng)
    u = rng.standard_normal(disk25_ext.n_dofs)
    g = element_gradient_values(disk25_ext, u, kind, all_elements=True)
    K = assemble_stiffness(disk25_ext, a, kind)
    assert g @ a.all_values(disk25_ext) == pytest.approx(K.quadratic(u), rel=1e-12)


def test_far_field_modes_agree(disk25_ext, rng):
    kind = FormKind.fractional_conductivity(0.5, 0.3)
    a = _random_design(disk25_ext, rng)
    base = QuadConfig.default(2)
    pairs = FractionalOperator(disk25_ext, kind, QuadConfig(3, 2, 2, far_mode="pairs"))
    points = FractionalOperator(disk25_ext, kind, QuadConfig(3, 2, 2, far_mode="points", chunk_rows=32))
    Kp, Kq = pairs.dense_matrix(a), points.dense_matrix(a)
    assert np.abs(Kp - Kq).max() <= 1e-12 * np.abs(Kp).max()
    u = rng.standard_normal(disk25_ext.n_dofs)
    np.testing.assert_allclose(pairs.element_values(u), points.element_values(u), rtol=1e-10, atol=1e-14)
    assert base.touching_order == 3


def test_peridynamic_korn_positivity(disk25):
    for s in (0.3, 0.6, 0.9):
        mesh = extend_with_horizon(disk25, 0.3)
        K = assemble_stiffness(mesh, DesignField.constant(mesh, 1.0), FormKind.fractional_peridynamic(s, 0.3))
        assert np.linalg.eigvalsh(K.to_dense()).min() > 0


def test_peridynamic_local_limit_trend(disk25):
    rng = np.random.default_rng(1)
    v = rng.standard_normal(2 * disk25.n_dofs)
    local = local_energy(disk25, v, FormKind.local_elasticity())
    mesh = extend_with_horizon(disk25, 0.3)
    gaps = []
    for s in (0.6, 0.9, 0.99):
        K = assemble_stiffness(mesh, DesignField.constant(mesh, 1.0), FormKind.fractional_peridynamic(s, 0.3))
        gaps.append(abs(K.quadratic(v) - local))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 0.05 * local


def test_horizon_mismatch_is_rejected(line16):
    kind = FormKind.fractional_conductivity(0.5, 0.25)
    with pytest.raises(ConfigurationError):
        assemble_stiffness(line16, DesignField.constant(line16), kind)


def test_non_spd_is_reported(monkeypatch, line16_ext):
    kind = FormKind.fractional_conductivity(0.5, 0.25)
    op = FractionalOperator(line16_ext, kind)
    monkeypatch.setattr(FractionalOperator, "dense_matrix", lambda self, d: -np.eye(self.n))
    monkeypatch.setattr("nonlocal_design.forms.fractional_operator", lambda m, k, q=None: op)
    with pytest.raises(NumericalIntegrityError):
        assemble_stiffness(line16_ext, DesignField.constant(line16_ext), kind)
