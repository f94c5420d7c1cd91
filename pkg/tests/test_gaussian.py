import math

import numpy as np
import pytest

from distembed.errors import ShapeError
from distembed.gaussian import (
    VARIANCE_FLOOR,
    DiagGaussian,
    kl_divergence,
    log_pdf,
    mc_kl_estimate,
    sample,
    wasserstein_sq,
)
from distembed.tensor import Tensor


def _random_pair(rng, d):
    q = DiagGaussian(rng.normal(size=d), rng.uniform(0.2, 3.0, size=d))
    p = DiagGaussian(rng.normal(size=d), rng.uniform(0.2, 3.0, size=d))
    return q, p


def test_validation():
    with pytest.raises(ShapeError):
        DiagGaussian([0.0, 1.0], [1.0])
    with pytest.raises(ValueError):
        DiagGaussian([0.0], [1e-9])
    g = DiagGaussian([0.0], [VARIANCE_FLOOR])
    assert g.dim == 1


def test_kl_examples():
    g = DiagGaussian([0.3, -1.0], [0.5, 2.0])
    assert kl_divergence(g, g).item() == 0.0
    assert kl_divergence(DiagGaussian([0.0], [1.0]), DiagGaussian([1.0], [1.0])).item() == pytest.approx(0.5, abs=1e-15)
    value = kl_divergence(DiagGaussian([0.0], [0.5]), DiagGaussian([0.0], [1.0])).item()
    assert value == pytest.approx(0.5 * math.log(2) - 0.25, abs=1e-15)
    assert value == pytest.approx(0.09657359027997264, abs=1e-15)


def test_kl_case_matches_monte_carlo():
    q, p = DiagGaussian([0.0], [0.5]), DiagGaussian([0.0], [1.0])
    est, se = mc_kl_estimate(q, p, 100_000, seed=0)
    assert abs(est - kl_divergence(q, p).item()) <= 3 * se


def test_kl_nonnegative_and_asymmetric():
    rng = np.random.default_rng(0)
    q = DiagGaussian(rng.normal(size=(10_000, 3)), rng.uniform(0.1, 4.0, size=(10_000, 3)))
    p = DiagGaussian(rng.normal(size=(10_000, 3)), rng.uniform(0.1, 4.0, size=(10_000, 3)))
    kl = kl_divergence(q, p).data
    assert kl.shape == (10_000,)
    assert np.all(kl >= 0)
    np.testing.assert_allclose(kl_divergence(q, q).data, 0.0, atol=1e-12)
    assert np.any(np.abs(kl - kl_divergence(p, q).data) > 1e-3)


def test_kl_broadcasts_to_matrix():
    rng = np.random.default_rng(1)
    q = DiagGaussian(rng.normal(size=(4, 3)), np.ones((4, 3)))
    p = DiagGaussian(rng.normal(size=(5, 3)), np.ones((5, 3)))
    mat = kl_divergence(q.unsqueeze(1), p.unsqueeze(0)).data
    assert mat.shape == (4, 5)
    assert mat[2, 3] == pytest.approx(kl_divergence(q[2], p[3]).item(), abs=1e-14)


def test_unsqueeze_negative_axis():
    g = DiagGaussian(np.zeros((4, 3)), np.ones((4, 3)))
    assert g.unsqueeze(-2).batch_shape == (4, 1)
    assert g.unsqueeze(0).batch_shape == (1, 4)


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        kl_divergence(DiagGaussian([0.0], [1.0]), DiagGaussian([0.0, 0.0], [1.0, 1.0]))
    with pytest.raises(ShapeError):
        log_pdf(DiagGaussian([0.0], [1.0]), [0.0, 1.0])


def test_wasserstein_examples():
    a = DiagGaussian([0.0, 0.0], [1.0, 4.0])
    b = DiagGaussian([3.0, 0.0], [4.0, 1.0])
    assert wasserstein_sq(a, b).item() == pytest.approx(11.0, abs=1e-12)
    assert wasserstein_sq(a, a).item() == 0.0
    unit = DiagGaussian([1.0, 0.0], [1.0, 4.0])
    assert wasserstein_sq(a, unit).item() == pytest.approx(1.0, abs=1e-15)


def test_wasserstein_symmetric_and_indiscernibles():
    rng = np.random.default_rng(2)
    for _ in range(200):
        a, b = _random_pair(rng, 4)
        ab, ba = wasserstein_sq(a, b).item(), wasserstein_sq(b, a).item()
        assert abs(ab - ba) <= 1e-12
        assert ab > 0
        assert wasserstein_sq(a, a).item() == 0.0


def test_log_pdf_examples():
    assert log_pdf(DiagGaussian([0.0], [1.0]), [0.0]).item() == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    assert log_pdf(DiagGaussian([0.0], [1.0]), [0.0]).item() == pytest.approx(-0.9189385332046727, abs=1e-15)
    g = DiagGaussian([1.0, -2.0], [0.3, 5.0])
    expected = -0.5 * np.sum(np.log(2 * np.pi * np.array([0.3, 5.0])))
    assert log_pdf(g, g.mean).item() == pytest.approx(expected, abs=1e-14)


def test_log_pdf_integrates_to_one():
    g = DiagGaussian([0.5, -1.0], [0.4, 2.0])
    sd = np.sqrt([0.4, 2.0])
    xs = np.linspace(0.5 - 6 * sd[0], 0.5 + 6 * sd[0], 601)
    ys = np.linspace(-1.0 - 6 * sd[1], -1.0 + 6 * sd[1], 601)
    grid = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
    dens = np.exp(log_pdf(g, grid).data)
    total = np.trapezoid(np.trapezoid(dens, ys, axis=1), xs)
    assert abs(total - 1.0) <= 1e-3


def test_sample_degenerate_and_moments():
    g = DiagGaussian([2.0, -1.0], [VARIANCE_FLOOR] * 2)
    s = sample(g, 5, seed=0)
    assert np.all(np.abs(s - g.mean) <= 3 * math.sqrt(VARIANCE_FLOOR) * 2)
    big = sample(DiagGaussian([0.0], [1.0]), 100_000, seed=1)[:, 0]
    assert abs(big.mean()) <= 0.02 and abs(big.var() - 1.0) <= 0.02


def test_sample_deterministic_shape():
    g = DiagGaussian(np.zeros((3, 2)), np.ones((3, 2)))
    a, b = sample(g, 7, 5), sample(g, 7, 5)
    assert a.shape == (7, 3, 2)
    np.testing.assert_array_equal(a, b)


def test_mc_estimate_identical_and_se_scaling():
    g = DiagGaussian([0.1, 0.2], [0.7, 1.3])
    est, se = mc_kl_estimate(g, g, 1000, 0)
    assert abs(est) <= 3 * se + 1e-15
    q, p = DiagGaussian([0.0, 1.0], [0.5, 2.0]), DiagGaussian([1.0, 0.0], [1.0, 1.0])
    ratios = [mc_kl_estimate(q, p, 20_000, s)[1] / mc_kl_estimate(q, p, 40_000, s + 100)[1] for s in range(5)]
    assert abs(np.mean(ratios) - math.sqrt(2)) <= 0.1


def test_closed_form_kl_vs_monte_carlo_many_pairs():
    rng = np.random.default_rng(3)
    ok = 0
    for i in range(30):
        q, p = _random_pair(rng, int(rng.integers(1, 17)))
        est, se = mc_kl_estimate(q, p, 100_000, seed=i)
        ok += abs(est - kl_divergence(q, p).item()) <= 3 * se
    assert ok >= 28


def test_delta_limit_logits_match_log_pdf():
    rng = np.random.default_rng(4)
    means, variances = rng.normal(size=(5, 3)), rng.uniform(0.3, 2.0, size=(5, 3))
    priors = DiagGaussian(means, variances)
    z = rng.normal(size=3)
    q = DiagGaussian(z, np.full(3, 1e-6))
    a = -kl_divergence(q, priors).data
    b = log_pdf(priors, z).data
    diff = a - b
    assert np.ptp(diff) <= 1e-4  # differ only by a class-independent constant


def test_tensor_arguments_carry_gradients():
    m = Tensor([0.5], requires_grad=True)
    v = Tensor([2.0], requires_grad=True)
    kl_divergence(DiagGaussian(m, v), DiagGaussian([0.0], [1.0])).backward()
    assert m.grad[0] == pytest.approx(0.5)  # d/dm of m^2 / 2
    assert v.grad[0] == pytest.approx(0.5 * (1.0 - 1.0 / 2.0))
