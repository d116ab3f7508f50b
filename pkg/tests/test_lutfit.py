import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from editaware.lutfit import (
    COLOR_TOLERANCE,
    TONE_TOLERANCE,
    Lut1D,
    Lut3D,
    LutMLPRegressor,
    builtin_styles,
    default_tone_curve,
    fit_mlp_to_lut3d,
    fit_mlp_to_tonecurve,
    generate_builtin_luts,
    linear_lookup_1d,
    load_lut,
    save_lut,
    soft_clip,
    trilinear_lookup,
)


def corner_oracle(table, p):
    """Explicit 8-corner weighted sum."""
    n = table.shape[0] - 1
    pos = np.clip(p, 0, 1) * n
    i0 = np.minimum(np.floor(pos).astype(int), n - 1)
    f = pos - i0
    out = np.zeros(3)
    for dr in (0, 1):
        for dg in (0, 1):
            for db in (0, 1):
                w = ((f[0] if dr else 1 - f[0]) * (f[1] if dg else 1 - f[1]) * (f[2] if db else 1 - f[2]))
                out += w * table[i0[0] + dr, i0[1] + dg, i0[2] + db]
    return out


def test_lattice_nodes_reproduced(rng):
    lut = Lut3D(rng.uniform(size=(5, 5, 5, 3)))
    idx = rng.integers(0, 5, size=(20, 3))
    assert np.allclose(trilinear_lookup(lut, idx / 4), lut.table[idx[:, 0], idx[:, 1], idx[:, 2]], atol=1e-15)


def test_identity_lut_reproduces_input(rng):
    p = rng.uniform(size=(200, 3))
    assert np.allclose(trilinear_lookup(Lut3D.identity(), p), p, atol=1e-14)


def test_trilinear_matches_corner_oracle(rng):
    lut = Lut3D(rng.uniform(size=(7, 7, 7, 3)))
    p = rng.uniform(size=(50, 3))
    out = trilinear_lookup(lut, p)
    for q, o in zip(p, out):
        assert np.allclose(o, corner_oracle(lut.table, q), atol=1e-12, rtol=0)


def test_trilinear_clamps_outside_cube():
    lut = Lut3D.identity(5)
    assert np.allclose(trilinear_lookup(lut, np.array([[1.5, -0.2, 0.5]])), [[1.0, 0.0, 0.5]])


def test_1d_lookup_examples(rng):
    vals = np.sort(rng.uniform(size=11))
    curve = Lut1D(vals)
    knots = np.linspace(0, 1, 11)
    assert np.allclose(linear_lookup_1d(curve, knots), vals, atol=1e-15)
    ident = Lut1D(np.linspace(0, 1, 256))
    u = rng.uniform(size=100)
    assert np.allclose(linear_lookup_1d(ident, u), u, atol=1e-14)
    for q in rng.uniform(size=20):
        k = min(int(q * 10), 9)
        t = q * 10 - k
        assert abs(linear_lookup_1d(curve, np.array([q]))[0] - ((1 - t) * vals[k] + t * vals[k + 1])) < 1e-12


def test_lut_invariants():
    with pytest.raises(ValueError):
        Lut3D(np.full((3, 3, 3, 3), 1.2))
    with pytest.raises(ValueError):
        Lut1D(np.array([0.0, 0.6, 0.5, 1.0]))


def test_builtin_luts():
    luts = generate_builtin_luts(15, seed=0, size=9)
    assert len(luts) == 15
    assert np.allclose(luts[0].table, Lut3D.identity(9).table, atol=1e-15)
    again = generate_builtin_luts(15, seed=0, size=9)
    assert all(np.array_equal(a.table, b.table) for a, b in zip(luts, again))
    for lut in luts:
        assert lut.table.min() >= 0.0 and lut.table.max() <= 1.0
    with pytest.raises(ValueError):
        generate_builtin_luts(0)


def test_builtin_lut_default_lattice_in_unit_cube():
    for lut in generate_builtin_luts(15, seed=0):
        assert lut.table.min() >= 0.0 and lut.table.max() <= 1.0


def test_random_styles_stay_in_ranges():
    for s in builtin_styles(15, seed=0)[6:]:
        assert all(0.7 <= g <= 1.4 for g in s.gamma)
        assert 0.6 <= s.saturation <= 1.4 and -25 <= s.hue <= 25


def test_soft_clip_properties():
    v = np.linspace(-1, 2, 3001)
    out = soft_clip(v)
    assert out.min() > 0 and out.max() < 1
    assert np.all(np.diff(out) > 0)
    mid = (v >= 0.25) & (v <= 0.75)
    assert np.array_equal(out[mid], v[mid])


def test_default_tone_curve():
    c = default_tone_curve()
    f = lambda u: linear_lookup_1d(c, np.array([u]))[0]
    assert f(0.0) == 0.0 and f(1.0) == 1.0 and abs(f(0.5) - 0.5) < 1e-12
    assert np.all(np.diff(linear_lookup_1d(c, np.linspace(0, 1, 1024))) >= 0)


def test_lut_json_round_trip(tmp_path, rng):
    lut = Lut3D(rng.uniform(size=(4, 4, 4, 3)), name="r")
    save_lut(lut, tmp_path / "l.json")
    back = load_lut(tmp_path / "l.json")
    assert np.array_equal(back.table, lut.table) and back.name == "r"


def test_identity_lut_fit_within_tolerance():
    mlp, report = fit_mlp_to_lut3d(Lut3D.identity(), hidden=(16, 16), budget=1500, rng=0, n_train=2000)
    assert report.max_error <= COLOR_TOLERANCE and report.converged
    assert report.mean_error <= report.max_error


def test_fit_is_deterministic():
    a, ra = fit_mlp_to_lut3d(Lut3D.identity(5), hidden=(6,), budget=40, rng=3, n_train=300)
    b, rb = fit_mlp_to_lut3d(Lut3D.identity(5), hidden=(6,), budget=40, rng=3, n_train=300)
    assert a.to_bytes() == b.to_bytes() and ra.max_error == rb.max_error


def test_failed_fit_reports_not_converged():
    lut = generate_builtin_luts(3, seed=0, size=9)[2]
    _, report = fit_mlp_to_lut3d(lut, hidden=(2,), budget=5, rng=0, n_train=200)
    assert not report.converged and report.max_error > COLOR_TOLERANCE


def test_tone_fits():
    ident = Lut1D(np.linspace(0, 1, 256))
    _, rep = fit_mlp_to_tonecurve(ident, hidden=(8,), budget=500, rng=0, n_train=500)
    assert rep.max_error <= TONE_TOLERANCE
    mlp, rep = fit_mlp_to_tonecurve(default_tone_curve(), hidden=(16, 16), budget=3000, rng=0, n_train=2000)
    assert rep.max_error <= TONE_TOLERANCE
    grid = np.linspace(0, 1, 1024)[:, None]
    assert np.all(np.diff(mlp.forward(grid)[:, 0]) >= -1e-3)
    again, _ = fit_mlp_to_tonecurve(default_tone_curve(), hidden=(16, 16), budget=3000, rng=0, n_train=2000)
    assert again.to_bytes() == mlp.to_bytes()


def test_regressor_estimator_api(rng):
    reg = LutMLPRegressor(hidden=(4,), max_iter=20)
    assert reg.get_params()["hidden"] == (4,)
    with pytest.raises(NotFittedError):
        reg.predict(np.zeros((2, 3)))
    X = rng.uniform(size=(100, 2))
    y = X.sum(axis=1)
    reg.fit(X, y)
    assert reg.predict(X).shape == (100, 1)
    with pytest.raises(ValueError):
        reg.fit(X, y[:50])
