import numpy as np
import pytest

from deqmpi.errors import DegenerateSignalError, ShapeError
from deqmpi.metrics import ScoreReport, measurement_snr, psnr, ssim, ssim_terms


def test_measurement_snr_hand_values():
    clean = np.zeros(4)
    clean[0] = 10.0
    noise = np.array([0.0, 1.0, 0.0, 0.0])
    assert abs(measurement_snr(clean, clean + noise) - 20.0) < 1e-12
    assert abs(measurement_snr(clean, 2 * clean)) < 1e-12
    assert measurement_snr(clean, clean) == float("inf")


def test_psnr_hand_value():
    ref = np.array([1.0, 0.5, 0.0, 0.2])
    x = ref + np.array([0.1, 0, 0, 0])
    assert abs(psnr(x, ref) - 26.020599913279625) < 1e-9


def test_psnr_scale_invariant_and_offset():
    rng = np.random.default_rng(0)
    ref = rng.random((5, 6))
    x = ref + 0.05 * rng.standard_normal(ref.shape)
    assert abs(psnr(3 * x, 3 * ref) - psnr(x, ref)) < 1e-9
    delta = 0.01
    assert abs(psnr(ref + delta, ref) - 20 * np.log10(ref.max() / delta)) < 1e-9


def test_psnr_monotone_in_error():
    rng = np.random.default_rng(1)
    ref = rng.random(30)
    d = rng.standard_normal(30)
    vals = [psnr(ref + t * d, ref) for t in (0.01, 0.02, 0.05, 0.1)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_psnr_edge_cases():
    assert psnr(np.ones(3), np.ones(3)) == float("inf")
    with pytest.raises(DegenerateSignalError):
        psnr(np.ones(3), np.zeros(3))
    with pytest.raises(ShapeError):
        psnr(np.ones(3), np.ones(4))


def test_ssim_identity():
    ref = np.random.default_rng(2).random((4, 4))
    assert abs(ssim(ref, ref) - 1.0) < 1e-12


def test_ssim_mean_shift_matches_formula():
    ref = np.random.default_rng(3).random(50)
    x = ref + 0.2
    L = ref.max()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    mu, var = ref.mean(), ref.var()
    lum = (2 * (mu + 0.2) * mu + c1) / ((mu + 0.2) ** 2 + mu**2 + c1)
    struct = (2 * var + c2) / (2 * var + c2)
    assert lum < 1.0 and struct == 1.0
    assert abs(ssim(x, ref) - lum * struct) < 1e-12


def test_ssim_four_statistic_formula():
    rng = np.random.default_rng(4)
    ref, x = rng.random(40), rng.random(40)
    mx, mr, vx, vr, cov, c1, c2 = ssim_terms(x, ref)
    np.testing.assert_allclose(mx, x.mean())
    np.testing.assert_allclose(cov, np.mean((x - x.mean()) * (ref - ref.mean())))
    want = ((2 * mx * mr + c1) * (2 * cov + c2)) / ((mx**2 + mr**2 + c1) * (vx + vr + c2))
    assert abs(ssim(x, ref) - want) < 1e-12


def test_ssim_independent_noise_near_zero():
    vals = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        vals.append(ssim(rng.standard_normal(4096), rng.standard_normal(4096) + 5.0))
    assert max(abs(v) for v in vals) < 0.2


def test_ssim_degenerate_reference():
    with pytest.raises(DegenerateSignalError):
        ssim(np.ones(3), np.zeros(3))


def test_score_report():
    rng = np.random.default_rng(5)
    refs = rng.random((3, 4, 4)) + 0.1
    recs = refs + 0.01 * rng.standard_normal(refs.shape)
    rep = ScoreReport.of(recs, refs)
    s = rep.summary()
    assert s["n"] == 3
    np.testing.assert_allclose(s["psnr_mean"], np.mean([psnr(a, b) for a, b in zip(recs, refs)]))
    assert all(-1 <= v <= 1 for v in rep.ssim)
    assert rep.row("tv").startswith("tv\t")
    assert len(rep.records()) == 3
