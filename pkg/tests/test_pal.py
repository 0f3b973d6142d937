
import numpy as np
import pytest
from scipy.stats import spearmanr

from vasim.engine import SimConfig
from vasim.pal import (
    DuplicatePointError, MissingCenterColumnError, MissingColumnsError, NaNValueError,
    NonRectangularGridError, OffGridError, PalDesign, PalGridError, VaMap, blur_strength_map,
    extract_profile, good_va_width, load_pal_grid, normalize_mean_sphere, save_pal_grid,
    simulate_pal_map, synthesize_generic_pal, synthetic_power_profile,
)
from vasim.zernike import PowerVector, blur_strength, zernike_from_power_vector


def _write_grid(path, rows, header=None):
    header = header or ["x_mm", "y_mm"] + [f"c{j}" for j in range(15)]
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    path.with_suffix(".json").write_text('{"pupil_radius_mm": 4, "wavelength_nm": 530, "label": "t"}')


def _grid_rows(xs, ys, c4=0.0):
    return [[x, y] + [0.0] * 4 + [c4] + [0.0] * 10 for y in ys for x in xs]


def test_load_full_size_grid(tmp_path):
    axis = list(range(-20, 21))
    _write_grid(tmp_path / "g.csv", _grid_rows(axis, axis))
    d = load_pal_grid(tmp_path / "g.csv")
    assert d.n_points == 1681 and d.shape == (41, 41)
    assert d.label == "t" and d.pupil_radius_mm == 4.0


@pytest.mark.parametrize("mutate,err", [
    (lambda rows: rows[:-1], NonRectangularGridError),
    (lambda rows: rows + [rows[0]], DuplicatePointError),
    (lambda rows: [r if i else r[:2] + ["nan"] + r[3:] for i, r in enumerate(rows)], NaNValueError),
    (lambda rows: [r for r in rows if r[0] != 0], MissingCenterColumnError),
])
def test_load_errors(tmp_path, mutate, err):
    rows = _grid_rows([-1, 0, 1], [-1, 0, 1])
    _write_grid(tmp_path / "g.csv", mutate(rows))
    with pytest.raises(err):
        load_pal_grid(tmp_path / "g.csv")


def test_missing_columns(tmp_path):
    header = ["x_mm", "y_mm"] + [f"c{j}" for j in range(14)]
    _write_grid(tmp_path / "g.csv", [r[:-1] for r in _grid_rows([0], [0])], header)
    with pytest.raises(MissingColumnsError, match="c14"):
        load_pal_grid(tmp_path / "g.csv")
    assert issubclass(MissingColumnsError, PalGridError)


def test_grid_round_trip(tmp_path):
    d = synthesize_generic_pal("soft", step_mm=4.0)
    save_pal_grid(d, tmp_path / "d.csv")
    back = load_pal_grid(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.coeffs, d.coeffs)
    np.testing.assert_array_equal(back.xs, d.xs)
    assert back.label == "soft" and back.addition_d == 2.5


def test_normalization_examples():
    d = normalize_mean_sphere(synthesize_generic_pal("hard", step_mm=2.0))
    M, J0, J45 = d.power_vectors()
    ic = d.center_column()
    assert np.all(M[:, ic] == 0.0)
    assert d.normalized
    # uniform-M design -> M' == 0 everywhere
    axis = np.array([-2.0, 0.0, 2.0])
    z = zernike_from_power_vector(PowerVector(1.25, 0.1, 0.2), 4.0).as_array()
    flat = PalDesign("u", 0.0, axis, axis, np.tile(z, (3, 3, 1)))
    Mf, J0f, J45f = normalize_mean_sphere(flat).power_vectors()
    assert np.all(Mf == 0.0)
    np.testing.assert_array_equal(J45f, flat.power_vectors()[2])


def test_normalization_keeps_astigmatism():
    raw = synthesize_generic_pal("soft", step_mm=2.0)
    norm = normalize_mean_sphere(raw)
    np.testing.assert_array_equal(np.delete(norm.coeffs, 4, axis=2), np.delete(raw.coeffs, 4, axis=2))
    # a point sharing its row's centre sphere ends at M' = 0 with J45 unchanged
    iy = int(np.argmin(np.abs(raw.ys - (-18.0))))
    M, _, J45 = raw.power_vectors()
    Mn, _, J45n = norm.power_vectors()
    assert M[iy, 0] == pytest.approx(M[iy, raw.center_column()])
    assert Mn[iy, 0] == pytest.approx(0.0, abs=1e-12) and J45n[iy, 0] == J45[iy, 0]


def test_synthetic_generator_properties():
    d = synthesize_generic_pal("hard", step_mm=1.0)
    M, J0, J45 = d.power_vectors()
    iy0, ix0 = int(np.flatnonzero(d.ys == 0)[0]), d.center_column()
    assert J45[iy0, ix0] == 0.0 and J0[iy0, ix0] == 0.0
    assert d.n_points == 41 * 41
    assert np.all(J0 == 0.0)
    assert M[0, ix0] == pytest.approx(2.5, abs=0.01)     # bottom row is near zone
    assert M[-1, ix0] == pytest.approx(0.0, abs=0.01)


@pytest.mark.parametrize("kind", ["hard", "soft"])
def test_minkwitz_gradient(kind):
    d = synthesize_generic_pal(kind, step_mm=1.0)
    _, J0, J45 = d.power_vectors()
    ic = d.center_column()
    cyl = 2 * np.hypot(J0, J45)
    width = {"hard": 1.8, "soft": 3.2}[kind]
    for iy, y in enumerate(d.ys):
        _, dp = synthetic_power_profile(y, 2.5, width)
        # first step away from the corridor, where the cap is not active
        assert cyl[iy, ic + 1] - cyl[iy, ic] == pytest.approx(2 * abs(dp) * 1.0, rel=1e-9, abs=1e-12)


def test_power_profile_slope_matches_numeric_derivative():
    y = np.linspace(-20, 20, 81)
    p, dp = synthetic_power_profile(y, 2.5, 1.8)
    h = 1e-6
    num = (synthetic_power_profile(y + h, 2.5, 1.8)[0] - synthetic_power_profile(y - h, 2.5, 1.8)[0]) / (2 * h)
    np.testing.assert_allclose(dp, num, atol=1e-7)


def test_hard_has_less_far_zone_astigmatism():
    hard = synthesize_generic_pal("hard", step_mm=1.0)
    soft = synthesize_generic_pal("soft", step_mm=1.0)
    iy, ix = int(np.flatnonzero(hard.ys == 0)[0]), int(np.flatnonzero(hard.xs == 9)[0])
    assert abs(hard.power_vectors()[2][iy, ix]) < abs(soft.power_vectors()[2][iy, ix])


def test_blur_strength_map():
    d = normalize_mean_sphere(synthesize_generic_pal("hard", step_mm=2.0))
    b = blur_strength_map(d)
    assert np.all(b[:, d.center_column()] == 0.0)
    ic = d.center_column()
    for row in b:
        right = row[ic:]
        assert np.all(np.diff(right) >= -1e-12)
    M, J0, J45 = d.power_vectors()
    assert b[3, 4] == pytest.approx(blur_strength(PowerVector(M[3, 4], J0[3, 4], J45[3, 4])))
    assert blur_strength(PowerVector(0.5, 0.0, 0.5)) == pytest.approx(0.7071, abs=1e-4)


def _flat_map(xs, ys, value):
    shape = (len(ys), len(xs))
    return VaMap(np.asarray(xs, float), np.asarray(ys, float), np.full(shape, value),
                 np.zeros(shape), np.full(shape, "ok", dtype=object))


def test_extract_profile():
    axis = np.arange(-20, 21, 1.0)
    m = _flat_map(axis, axis, 0.1)
    prof = extract_profile(m, 0.0)
    assert len(prof) == 41 and all(v == 0.1 for _, v in prof)
    coarse = _flat_map(np.arange(-20, 21, 2.0), np.arange(-20, 21, 2.0), 0.1)
    with pytest.raises(OffGridError, match="available rows"):
        extract_profile(coarse, -9.0)


def test_good_va_width():
    axis = np.arange(-20, 21, 1.0)
    assert good_va_width([(x, 0.0) for x in axis]) == 40.0
    assert good_va_width([(x, 0.5) for x in axis]) == 0.0
    prof = [(x, 0.1 if abs(x) <= 6 else 0.4) for x in axis]
    assert good_va_width(prof) == 12.0
    # a second good island does not count
    prof = [(x, 0.1 if abs(x) <= 3 or x > 15 else 0.4) for x in axis]
    assert good_va_width(prof) == 6.0
    assert good_va_width(prof, threshold_logmar=0.5) == 40.0
    with pytest.raises(ValueError):
        good_va_width([])


def test_map_csv_round_trip(tmp_path):
    m = _flat_map([-1.0, 0.0, 1.0], [-2.0, 0.0], 0.25)
    m.status[0, 0] = "failed: X"
    m.to_csv(tmp_path / "m.csv")
    back = VaMap.from_csv(tmp_path / "m.csv")
    np.testing.assert_array_equal(back.mean_logmar, m.mean_logmar)
    assert back.status[0, 0] == "failed: X"
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "x_mm,y_mm,mean_logmar,sd_logmar,status"


def test_simulate_requires_normalized(perfect_observer):
    d = synthesize_generic_pal("hard", extent_mm=2, step_mm=2)
    with pytest.raises(PalGridError):
        simulate_pal_map(d, perfect_observer, SimConfig(repetitions=1))


def test_simulate_flat_design_and_bounds(perfect_observer):
    axis = np.array([-2.0, 0.0, 2.0])
    d = normalize_mean_sphere(PalDesign("zero", 0.0, axis, axis, np.zeros((3, 3, 15))))
    cfg = SimConfig(repetitions=1)
    m = simulate_pal_map(d, perfect_observer, cfg)
    lo, hi = cfg.logmar_bounds()
    assert np.all(m.mean_logmar == lo)
    assert np.all(m.status == "ok")
    assert m.provenance["design"] == "zero"


def test_failed_points_are_recorded():
    axis = np.array([-2.0, 0.0, 2.0])
    d = normalize_mean_sphere(PalDesign("zero", 0.0, axis, axis, np.zeros((3, 3, 15))))

    class Flaky:
        def __init__(self):
            self.calls = 0

        def __call__(self, stim):
            raise RuntimeError("observer offline, retry later")

    m = simulate_pal_map(d, Flaky(), SimConfig(repetitions=1))
    assert np.all(np.isnan(m.mean_logmar))
    assert m.status[0, 0].startswith("failed: RuntimeError") and "," not in m.status[0, 0]


def test_desk_grid_size():
    d = synthesize_generic_pal("hard", extent_mm=20, step_mm=2)
    assert d.n_points == 441


class _BlurObserver:
    """Correct when the gap beats a blur-dependent size; uses the PSF width."""

    def __call__(self, stim):
        # the observer only sees pixels: estimate blur from the ink contrast
        contrast = 1.0 - float(stim.pixels.min())
        return stim.orientation if contrast * stim.gap_px > 3.0 else (stim.orientation + 1) % 8


def test_map_tracks_blur_strength():
    d = normalize_mean_sphere(synthesize_generic_pal("soft", extent_mm=12, step_mm=4))
    m = simulate_pal_map(d, _BlurObserver(), SimConfig(repetitions=1))
    rho = spearmanr(m.mean_logmar.ravel(), blur_strength_map(d).ravel()).correlation
    assert rho > 0.5


def test_parallel_map_matches_serial():
    from vasim import cnn
    d = normalize_mean_sphere(synthesize_generic_pal("hard", extent_mm=2, step_mm=2))
    m = cnn.init_model(128, seed=2)
    cfg = SimConfig(repetitions=1)
    a = simulate_pal_map(d, m, cfg, workers=1)
    b = simulate_pal_map(d, m, cfg, workers=2)
    np.testing.assert_array_equal(a.mean_logmar, b.mean_logmar)
