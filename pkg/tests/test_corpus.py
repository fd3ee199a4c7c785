import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2, multivariate_normal

from sdlab.corpus import (GaussianMixture, ImageCorpus, build_corpus,
                          default_point_corpus, isotropic_gaussian)
from sdlab.errors import ConfigurationError, ValidationError


def _two_component():
    return GaussianMixture(
        weights=np.array([0.3, 0.7]),
        means=np.array([[0.0, 0.0], [3.0, -1.0]]),
        covs=np.stack([np.eye(2) * 0.25, np.array([[0.5, 0.1], [0.1, 0.3]])]),
    )


def test_log_density_matches_scipy():
    gm = _two_component()
    x = np.random.default_rng(0).standard_normal((50, 2)) * 2
    want = np.log(
        0.3 * multivariate_normal(gm.means[0], gm.covs[0]).pdf(x)
        + 0.7 * multivariate_normal(gm.means[1], gm.covs[1]).pdf(x)
    )
    assert np.allclose(gm.log_density(x), want, atol=1e-10)


def test_score_matches_finite_differences():
    gm = _two_component()
    rng = np.random.default_rng(1)
    x = rng.standard_normal((10, 2)) * 2
    got = gm.score(x)
    h = 1e-5
    for j in range(2):
        step = np.zeros(2)
        step[j] = h
        fd = (gm.log_density(x + step) - gm.log_density(x - step)) / (2 * h)
        assert np.allclose(got[:, j], fd, atol=1e-5)


def test_sample_moments_single_gaussian():
    gm = isotropic_gaussian([2.0, -1.0], 0.5)
    draws = gm.sample(200_000, np.random.default_rng(2))
    assert np.allclose(draws.mean(axis=0), [2.0, -1.0], atol=0.01)
    assert np.allclose(draws.std(axis=0), 0.5, atol=0.01)


def test_diffused_mixture_moments():
    """Diffusing N(mu, s^2 I) by (a, s_t) gives N(a mu, a^2 s^2 + s_t^2)."""
    gm = isotropic_gaussian([4.0, 0.0], 0.5)
    d = gm.diffused(0.8, 0.6)
    assert np.allclose(d.means[0], [3.2, 0.0])
    assert np.allclose(d.covs[0], np.eye(2) * (0.64 * 0.25 + 0.36))


def test_diffused_standard_normal_is_standard_normal():
    gm = isotropic_gaussian([0.0, 0.0], 1.0)
    for a, s in [(0.9949874371, 0.1), (0.6, 0.8), (0.1, 0.9949874371)]:
        d = gm.diffused(a, s)
        assert np.allclose(d.covs[0], np.eye(2), atol=1e-6)


def test_merge_weights_average_densities():
    a = isotropic_gaussian([0.0, 0.0], 1.0)
    b = isotropic_gaussian([5.0, 5.0], 1.0)
    merged = GaussianMixture.merge([a, b])
    x = np.array([[0.0, 0.0], [5.0, 5.0]])
    want = np.log(0.5 * np.exp(a.log_density(x)) + 0.5 * np.exp(b.log_density(x)))
    assert np.allclose(merged.log_density(x), want)


def test_mixture_validation():
    with pytest.raises(ValidationError):
        GaussianMixture(weights=np.array([0.5, 0.4]),
                        means=np.zeros((2, 2)), covs=np.stack([np.eye(2)] * 2))
    with pytest.raises(ValidationError):
        GaussianMixture(weights=np.array([1.0]), means=np.zeros((1, 2)),
                        covs=-np.eye(2)[None])


def test_point_corpus_geometry():
    corpus = default_point_corpus()
    assert corpus.class_ids == list(range(8))
    assert np.allclose(corpus.target_mean(0), [4.0, 0.0])
    assert corpus.target_std(0) == pytest.approx(0.5)
    for cid in corpus.class_ids:
        assert np.linalg.norm(corpus.target_mean(cid)) == pytest.approx(4.0)


def test_point_corpus_subset_keeps_geometry():
    full = default_point_corpus()
    sub = default_point_corpus(class_ids=[0, 3])
    assert sub.class_ids == [0, 3]
    for cid in sub.class_ids:
        assert np.allclose(sub.target_mean(cid), full.target_mean(cid))
    with pytest.raises(ValidationError):
        sub.target_mean(1)


def test_point_sampling_conditional_and_marginal():
    corpus = default_point_corpus()
    rng = np.random.default_rng(3)
    x, ids = corpus.sample(4000, rng, class_ids=2)
    assert set(ids) == {2}
    assert np.allclose(x.mean(axis=0), corpus.target_mean(2), atol=0.05)
    x, ids = corpus.sample(8000, rng)
    assert x.dtype == np.float32 and ids.dtype == np.int64
    assert set(ids) == set(range(8))


def test_point_class_coverage_chi_square():
    corpus = default_point_corpus()
    _, ids = corpus.sample(8000, np.random.default_rng(4))
    counts = np.bincount(ids, minlength=8)
    expected = 8000 / 8
    stat = float(((counts - expected) ** 2 / expected).sum())
    assert stat < chi2.ppf(0.999, df=7)


def test_image_corpus_values_and_shapes():
    corpus = ImageCorpus()
    assert corpus.data_shape == (1, 16, 16)
    assert corpus.class_ids == list(range(8))
    x, ids = corpus.sample(64, np.random.default_rng(5))
    assert x.shape == (64, 1, 16, 16) and x.dtype == np.float32
    assert x.min() >= -1.5 and x.max() <= 1.5
    templates = [corpus.template(c) for c in corpus.class_ids]
    for i in range(8):
        for j in range(i + 1, 8):
            assert not np.array_equal(templates[i], templates[j])


def test_image_corpus_jitter_stays_on_template_or_shift():
    corpus = ImageCorpus(max_shift=0, pixel_noise=0.0)
    x, ids = corpus.sample(16, np.random.default_rng(6))
    for xi, cid in zip(x, ids):
        assert np.array_equal(xi[0], corpus.template(int(cid)))


def test_image_corpus_subset():
    corpus = ImageCorpus(class_ids=[1, 5])
    assert corpus.class_ids == [1, 5]
    _, ids = corpus.sample(100, np.random.default_rng(7))
    assert set(ids) <= {1, 5}


def test_build_corpus_dispatch():
    assert build_corpus("point", None).data_shape == (2,)
    assert build_corpus("image", [2]).class_ids == [2]
    with pytest.raises(ConfigurationError):
        build_corpus("audio", None)


@settings(max_examples=30, deadline=None)
@given(mean=st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=2),
       std=st.floats(0.1, 2.0, allow_nan=False),
       a=st.floats(0.05, 0.999), seed=st.integers(0, 2**31 - 1))
def test_single_gaussian_score_is_linear_property(mean, std, a, seed):
    """For one Gaussian the score is -(Sigma_t)^-1 (x - a mu)."""
    s = float(np.sqrt(1.0 - a * a))
    gm = isotropic_gaussian(mean, std).diffused(a, s)
    var = a * a * std * std + s * s
    x = np.random.default_rng(seed).standard_normal((5, 2)) * 3
    want = -(x - a * np.asarray(mean)) / var
    assert np.allclose(gm.score(x), want, atol=1e-8)
