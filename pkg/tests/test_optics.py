import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmicro.baselines import uniform_patterns
from dmicro.gradcheck import check
from dmicro.metrics import compression
from dmicro.optics import (
    DetectorDiagnostics,
    ExcitationPatternBank,
    ForwardConfig,
    PointSpreadFunction,
    binarization_gap,
    demagnify,
    detect_normalized,
    encode,
    forward_pass,
    generate_patterns,
    init_pattern_bank,
    read_pgm16,
    write_pgm16,
)
from dmicro.tensor import ComplexTensor, Tensor, backward
from dmicro.tensor.fft import ifft2_array

from oracles import direct_correlate

N_MC = 100_000


def _var_within(samples, expected_var, sigmas=3.0):
    # standard error of the sample variance for a normal population
    n = samples.size
    se = expected_var * np.sqrt(2.0 / (n - 1))
    return abs(samples.var(ddof=1) - expected_var) < sigmas * se


# -- pattern bank ----------------------------------------------------------------

def test_init_roundtrip_and_determinism():
    a = init_pattern_bank(3, 16, seed=5, dtype=np.float64)
    b = init_pattern_bank(3, 16, seed=5, dtype=np.float64)
    tau0 = np.random.default_rng(5).standard_normal((3, 16, 16))
    np.testing.assert_allclose(ifft2_array(a.W.numpy()).real, tau0, atol=1e-6)
    np.testing.assert_array_equal(a.W.real.data, b.W.real.data)
    np.testing.assert_array_equal(a.W.imag.data, b.W.imag.data)
    assert a.m == 1.0


def test_init_tau_is_standard_normal():
    bank = init_pattern_bank(8, 64, seed=1)
    tau = bank.tau().data
    assert abs(tau.mean()) < 3 / np.sqrt(tau.size)
    assert abs(tau.std() - 1.0) < 0.02


@pytest.mark.parametrize("T,P", [(0, 8), (2, 6)])
def test_init_rejects_bad_shapes(T, P):
    with pytest.raises(ValueError):
        init_pattern_bank(T, P)


def test_zero_spectrum_gives_half():
    z = np.zeros((2, 8, 8))
    bank = ExcitationPatternBank(W=ComplexTensor.from_array(z + 0j))
    np.testing.assert_array_equal(generate_patterns(bank).data, 0.5)


def test_steeper_slope_narrows_gap():
    bank = init_pattern_bank(2, 8, seed=3, dtype=np.float64)
    g1 = binarization_gap(generate_patterns(bank))
    bank.m = 50.0
    g50 = binarization_gap(generate_patterns(bank))
    nz = np.abs(bank.tau().data) > 1e-12
    assert np.all(g50[nz] < g1[nz])


@given(st.floats(0.1, 200))
def test_patterns_stay_in_unit_interval(m):
    bank = init_pattern_bank(1, 8, seed=0, dtype=np.float64)
    bank.m = m
    h = generate_patterns(bank).data
    assert np.all((h >= 0) & (h <= 1))
    # strictly inside while |m * tau| is small enough for float64 to resolve 1 - h
    inner = np.abs(m * bank.tau().data) < 30
    assert np.all((h[inner] > 0) & (h[inner] < 1))


def test_threshold_mode_is_binary():
    bank = init_pattern_bank(2, 8, seed=0)
    bank.threshold = True
    h = generate_patterns(bank).data
    assert set(np.unique(h)) <= {0.0, 1.0}


def test_pattern_gradient_finite_difference(rng):
    wr, wi = rng.standard_normal((2, 8, 8)), rng.standard_normal((2, 8, 8))
    weights = rng.standard_normal((2, 8, 8))

    def f(t):
        bank = ExcitationPatternBank(W=ComplexTensor(t[0], t[1]), m=2.0)
        return (generate_patterns(bank) * Tensor(weights)).sum()

    assert check("patterns", f, [wr, wi], tol=1e-5).passed


def test_tau_direct_bank():
    bank = init_pattern_bank(2, 8, frequency_domain=False)
    assert not bank.frequency_domain
    assert list(bank.named_parameters()) == ["pattern_bank.tau"]
    with pytest.raises(ValueError):
        ExcitationPatternBank(W=None)


# -- encode and demagnify --------------------------------------------------------

def test_uniform_illumination_copies_specimen(rng):
    X = rng.random((8, 8))
    a = encode(Tensor(X), Tensor(uniform_patterns(3, 8, np.float64)))
    assert a.shape == (3, 8, 8)
    for t in range(3):
        np.testing.assert_array_equal(a.data[t], X)


def test_dark_specimen():
    H = Tensor(np.random.default_rng(0).random((2, 8, 8)))
    assert not encode(Tensor(np.zeros((8, 8))), H).data.any()


def test_encode_batched_and_errors(rng):
    X = rng.random((4, 8, 8))
    H = rng.random((3, 8, 8))
    a = encode(Tensor(X), Tensor(H)).data
    assert a.shape == (4, 3, 8, 8)
    np.testing.assert_allclose(a[2, 1], X[2] * H[1])
    with pytest.raises(ValueError):
        encode(Tensor(np.ones((4, 4))), Tensor(H))
    with pytest.raises(ValueError):
        encode(Tensor(np.ones((8, 8))), Tensor(np.ones((8, 8))))


def test_box_emission_psf_matches_direct_convolution():
    X = np.zeros((9, 9))
    X[4, 4] = 1.0
    X[1, 7] = 0.5
    box = np.ones((3, 3)) / 9
    psf = PointSpreadFunction(box, "emission")
    got = encode(Tensor(X[:8, :8]), Tensor(np.ones((1, 8, 8))), em_psf=psf).data[0]
    want = direct_correlate(X[None, :8, :8], box[None, None], 1)[0]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_psf_validation():
    with pytest.raises(ValueError):
        PointSpreadFunction(np.ones((2, 2)))
    with pytest.raises(ValueError):
        PointSpreadFunction(-np.ones((3, 3)))
    assert PointSpreadFunction.impulse().is_impulse


def test_demagnify_examples(rng):
    assert demagnify(Tensor(np.ones((1, 4, 4))), 4).data.tolist() == [[[16.0]]]
    a = rng.random((3, 8, 8))
    np.testing.assert_array_equal(demagnify(Tensor(a), 1).data, a)
    with pytest.raises(ValueError):
        demagnify(Tensor(np.ones((1, 6, 6))), 4)


@given(arrays(np.float64, (2, 8, 8), elements=st.floats(0, 1)), st.sampled_from([1, 2, 4, 8]))
def test_demagnify_conserves_flux(a, n):
    assert demagnify(Tensor(a), n).data.sum() == pytest.approx(a.sum(), rel=1e-12, abs=1e-12)


# -- detector --------------------------------------------------------------------

def test_detector_noise_off_is_offset():
    cfg = ForwardConfig(k=10000, gamma=10, noise_enabled=False)
    a = Tensor(np.array([0.0, 0.25, 1.0]), requires_grad=True)
    y = detect_normalized(a, cfg)
    np.testing.assert_allclose(y.data, [0.001, 0.251, 1.001])
    backward(y.sum())
    np.testing.assert_array_equal(a.grad, 1.0)


def test_detector_variance_monte_carlo():
    cfg = ForwardConfig(k=100, sigma_read=2, gamma=10)
    y = detect_normalized(Tensor(np.full(N_MC, 0.5)), cfg, rng=np.random.default_rng(7)).data
    assert _var_within(y, 0.5 / 100 + 10 / 100 ** 2 + (2 / 100) ** 2)


def test_detector_unnormalised_statistics():
    k, s, g, a = 50.0, 3.0, 10.0, 0.3
    cfg = ForwardConfig(k=k, sigma_read=s, gamma=g)
    y = k * detect_normalized(Tensor(np.full(N_MC, a)), cfg, rng=np.random.default_rng(8)).data
    var = k * a + g + s * s
    assert abs(y.mean() - (k * a + g)) < 3 * np.sqrt(var / N_MC)
    assert _var_within(y, var)


def test_detector_clamps_and_counts_negatives():
    diag = DetectorDiagnostics()
    cfg = ForwardConfig(k=100)
    y = detect_normalized(Tensor(np.array([-0.1, 0.2])), cfg, rng=np.random.default_rng(0), diagnostics=diag)
    assert np.all(np.isfinite(y.data))
    assert diag.clamped == 1 and diag.calls == 1


def test_frozen_draws_reproduce():
    cfg = ForwardConfig(k=100, sigma_read=1)
    a = Tensor(np.full(4, 0.5))
    z = (np.ones(4), np.zeros(4))
    y = detect_normalized(a, cfg, z=z).data
    np.testing.assert_allclose(y, 0.5 + 10 / 100 + np.sqrt(0.5 / 100 + 10 / 100 ** 2))


@pytest.mark.parametrize("kw", [dict(k=0), dict(sigma_read=-1), dict(gamma=-1), dict(n=3)])
def test_forward_config_validation(kw):
    with pytest.raises(ValueError):
        ForwardConfig(**kw)


# -- full forward pass -----------------------------------------------------------

def test_uniform_pass_is_widefield(rng):
    X = rng.random((8, 8))
    cfg = ForwardConfig(k=10000, gamma=10, n=1, noise_enabled=False)
    y = forward_pass(Tensor(X), Tensor(uniform_patterns(2, 8, np.float64)), cfg).data
    for t in range(2):
        np.testing.assert_allclose(y[t], X + 10 / 10000, atol=1e-15)


def test_pass_normalises_pooled_field(rng):
    X = rng.random((8, 8))
    cfg = ForwardConfig(k=10000, gamma=0, n=4, noise_enabled=False)
    y = forward_pass(Tensor(X), Tensor(np.ones((1, 8, 8))), cfg).data
    want = X.reshape(2, 4, 2, 4).mean(axis=(1, 3))
    np.testing.assert_allclose(y[0], want, atol=1e-12)
    assert cfg.detector_scale == 10000 * 16


def test_zero_specimen_statistics():
    k, s, g, n = 200.0, 1.5, 10.0, 2
    cfg = ForwardConfig(k=k, sigma_read=s, gamma=g, n=n)
    side = 2 * int(np.sqrt(N_MC // 4))
    y = forward_pass(Tensor(np.zeros((side, side))), Tensor(np.ones((1, side, side))), cfg,
                     rng=np.random.default_rng(2)).data.ravel()
    K = k * n * n
    assert abs(y.mean() - g / K) < 3 * np.sqrt((g + s * s) / y.size) / K
    assert _var_within(y, (g + s * s) / K ** 2)


def test_forward_pass_accepts_bank_and_is_differentiable(rng):
    bank = init_pattern_bank(2, 8, seed=0)
    y = forward_pass(Tensor(rng.random((8, 8)).astype(np.float32)), bank, ForwardConfig(n=4),
                     rng=np.random.default_rng(0))
    assert y.shape == (2, 2, 2)
    backward(y.sum())
    assert np.abs(bank.W.real.grad).sum() > 0 and np.abs(bank.W.imag.grad).sum() > 0


def test_compression_accounting():
    assert compression(32, 16) == 64
    P, n, T = 256, 32, 16
    assert P * P // (T * (P // n) ** 2) == 64


# -- export ----------------------------------------------------------------------

def test_pgm_roundtrip(tmp_path, rng):
    img = rng.random((5, 7))
    path = tmp_path / "p.pgm"
    write_pgm16(path, img)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n7 5\n65535\n")
    np.testing.assert_allclose(read_pgm16(path), img, atol=0.5 / 65535 + 1e-12)


def test_pgm_normalize(tmp_path):
    path = tmp_path / "p.pgm"
    write_pgm16(path, np.array([[2.0, 4.0]]), normalize=True)
    assert read_pgm16(path).tolist() == [[0.0, 1.0]]
