import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radq.mri_model import (BValueSchedule, CDIConfig, DiffusionParams, FitError, compute_adc_map, compute_cdi,
                            compute_chb_dwi, dwi_signal, fit_adc, fit_adc_map)
from radq.volume_io import Volume


def _const(value, shape=(1, 3, 3)):
    return Volume.from_array("x", np.full(shape, value, dtype=np.float32))


def test_dwi_signal_examples():
    assert dwi_signal(DiffusionParams(1000, 0.002), 1000) == pytest.approx(1000 * math.exp(-2), rel=1e-15)
    assert dwi_signal(DiffusionParams(123.4, 0.7), 0) == 123.4
    assert dwi_signal(DiffusionParams(0, 0.003), 500) == 0


@given(st.floats(1e-5, 5e-3), st.floats(0, 1000), st.floats(1, 1000))
def test_dwi_signal_decreasing_in_b(d, b, db):
    p = DiffusionParams(1000.0, d)
    assert dwi_signal(p, b + db) < dwi_signal(p, b)


def test_fit_recovers_parameters():
    p = DiffusionParams(800.0, 1.5e-3)
    bs = (0.0, 400.0, 1000.0)
    fit = fit_adc([(b, dwi_signal(p, b)) for b in bs])
    assert fit.s0 == pytest.approx(800.0, rel=1e-9)
    assert fit.d == pytest.approx(1.5e-3, rel=1e-9)


def test_fit_two_point_slope():
    assert fit_adc([(0, 1000.0), (1000, 1000.0 * math.exp(-1))]).d == pytest.approx(1e-3, rel=1e-14)


def test_fit_constant_gives_zero():
    assert fit_adc([(0, 5.0), (100, 5.0), (400, 5.0)]).d == 0.0


def test_fit_errors():
    with pytest.raises(FitError):
        fit_adc([(0, 1.0)])
    with pytest.raises(FitError):
        fit_adc([(100, 1.0), (100, 2.0)])
    with pytest.raises(FitError):
        fit_adc([(0, 1.0), (100, 0.0)])


def test_fit_clamps_negative_slope():
    assert fit_adc([(0, 100.0), (1000, 200.0)]).d == 0.0


@settings(max_examples=60)
@given(st.floats(1.0, 5000.0), st.floats(0.0, 4e-3),
       st.lists(st.floats(0, 2000), min_size=2, max_size=6, unique=True))
def test_fit_inverts_forward_model(s0, d, bs):
    bs = sorted(bs)
    if bs[-1] - bs[0] < 50:
        return
    fit = fit_adc([(b, dwi_signal(DiffusionParams(s0, d), b)) for b in bs])
    assert fit.s0 == pytest.approx(s0, rel=1e-9)
    assert fit.d == pytest.approx(d, rel=1e-9, abs=1e-15)


def test_schedule_validation():
    with pytest.raises(ValueError):
        BValueSchedule((100.0, 400.0))
    with pytest.raises(ValueError):
        BValueSchedule((0.0, 400.0, 400.0))


def test_adc_map_uniform():
    p = DiffusionParams(900.0, 1.2e-3)
    dwi = {b: _const(dwi_signal(p, b)) for b in (0.0, 100.0, 400.0, 1000.0)}
    adc = compute_adc_map(dwi)
    # float32 storage of the signals limits agreement to single precision
    np.testing.assert_allclose(adc.data, 1.2e-3, rtol=1e-4)


def test_adc_map_flags_nonpositive_voxel():
    dwi = {0.0: _const(1000.0), 1000.0: _const(400.0)}
    low = dwi[1000.0].data.copy()
    low[0, 1, 1] = 0.0
    dwi[1000.0] = dwi[1000.0].with_data(low)
    fit = fit_adc_map(dwi)
    assert fit.qa_nonpositive == 1
    assert fit.adc.data[0, 1, 1] == 0.0
    assert fit.adc.meta["qa_nonpositive"] == 1


def test_adc_map_dims_mismatch():
    with pytest.raises(ValueError, match="dims"):
        compute_adc_map({0.0: _const(1.0), 100.0: _const(1.0, (1, 2, 2))})


def test_chb_examples():
    adc, s0 = _const(1e-3), _const(1000.0)
    np.testing.assert_allclose(compute_chb_dwi(adc, s0).data, 1000 * math.exp(-2), rtol=1e-6)
    zero = compute_chb_dwi(_const(0.0), s0)
    assert zero.data.tobytes() == s0.data.tobytes()
    with pytest.raises(ValueError):
        compute_chb_dwi(adc, s0, 800.0, max_acquired_b=1000.0)


def test_chb_extrapolates_fitted_map():
    rng = np.random.default_rng(0)
    s0 = rng.uniform(500, 1500, (2, 4, 4))
    d = rng.uniform(0.5e-3, 2.5e-3, (2, 4, 4))
    # float64 signals through float32 storage: compare against the stored-signal fit
    dwi = {b: Volume.from_array("x", s0 * np.exp(-b * d)) for b in (0.0, 100.0, 400.0, 1000.0)}
    fit = fit_adc_map(dwi)
    chb = compute_chb_dwi(fit.adc, fit.s0)
    np.testing.assert_allclose(chb.data, s0 * np.exp(-2000 * d), rtol=1e-5)


def test_cdi_products():
    two = {0.0: _const(2.0), 100.0: _const(3.0)}
    out = compute_cdi(two, CDIConfig(window_radius=0, normalize_inputs=False))
    assert np.all(out.data == 6.0)
    assert out.meta["method"] == "cdi-product-v1"


@pytest.mark.parametrize("n", [2, 3, 4, 5])
@pytest.mark.parametrize("c", [0.5, 1.5, 3.0])
def test_cdi_constant_power(n, c):
    vols = {float(100 * i): _const(c) for i in range(n)}
    out = compute_cdi(vols, CDIConfig(window_radius=1, normalize_inputs=False))
    assert np.all(out.data == np.float32(c ** n))


def test_cdi_window_clipped_mean():
    x = np.arange(9, dtype=np.float32).reshape(1, 3, 3) + 1
    vols = {0.0: Volume.from_array("a", x), 100.0: _const(1.0)}
    out = compute_cdi(vols, CDIConfig(window_radius=1, normalize_inputs=False)).data[0]
    assert out[1, 1] == pytest.approx(x.mean())
    assert out[0, 0] == pytest.approx(np.mean([1, 2, 4, 5]))


def test_cdi_translation_equivariant(rng):
    a = rng.uniform(0, 1, (1, 12, 12))
    b = rng.uniform(0, 1, (1, 12, 12))
    cfg = CDIConfig(window_radius=1, normalize_inputs=False)
    out = compute_cdi({0.0: Volume.from_array("a", a), 1.0: Volume.from_array("b", b)}, cfg).data
    sh = compute_cdi({0.0: Volume.from_array("a", np.roll(a, 1, axis=2)),
                      1.0: Volume.from_array("b", np.roll(b, 1, axis=2))}, cfg).data
    assert np.array_equal(sh[0, 2:-2, 3:-2], out[0, 2:-2, 2:-3])


def test_cdi_nonnegative(rng):
    vols = {float(b): Volume.from_array("x", rng.uniform(0, 10, (2, 5, 5))) for b in (0, 100, 400)}
    assert compute_cdi(vols).data.min() >= 0


def test_cdi_config_bounds():
    with pytest.raises(ValueError):
        CDIConfig(window_radius=4)


def test_noiseless_phantom_contrasts(noiseless_cases):
    for case, _ in noiseless_cases:
        t = case.tumour_mask.data > 0
        h = (case.prostate_mask.data > 0) & ~t
        assert case.adc.data[t].mean() < case.adc.data[h].mean()
        assert case.cdi.data[t].mean() > case.cdi.data[h].mean()
