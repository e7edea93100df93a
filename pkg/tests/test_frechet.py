import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from peftlab.data import generate_corpus
from peftlab.errors import ContractError, InputError
from peftlab.metrics import FeatureExtractor, diversity, fbd, fidelity, frechet_distance, gen_report


def scipy_frechet(mu1, s1, mu2, s2):
    covmean = scipy.linalg.sqrtm(s1 @ s2).real
    return float(((mu1 - mu2) ** 2).sum() + np.trace(s1 + s2 - 2 * covmean))


def random_psd(g, n):
    a = g.normal(size=(n, n + 2))
    return a @ a.T / n


def test_identical_gaussians_zero(rng):
    mu, s = rng.normal(size=4), random_psd(rng, 4)
    assert abs(frechet_distance(mu, s, mu, s)) <= 1e-8


def test_mean_shift_nine():
    mu2 = np.zeros(5)
    mu2[0] = 3.0
    assert abs(frechet_distance(np.zeros(5), np.eye(5), mu2, np.eye(5)) - 9.0) <= 1e-8


def test_diagonal_case_two():
    assert abs(frechet_distance(np.zeros(2), np.diag([1.0, 4.0]), np.zeros(2), np.diag([4.0, 1.0])) - 2.0) <= 1e-8


def test_random_pairs_symmetric_nonnegative():
    g = np.random.default_rng(7)
    for _ in range(100):
        n = int(g.integers(1, 7))
        mu1, mu2 = g.normal(size=n), g.normal(size=n)
        s1, s2 = random_psd(g, n), random_psd(g, n)
        d12 = frechet_distance(mu1, s1, mu2, s2)
        assert d12 >= 0.0
        assert abs(d12 - frechet_distance(mu2, s2, mu1, s1)) <= 1e-8


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_agrees_with_scipy_sqrtm(n, seed):
    # cross-check only; the analytic cases above are the oracle
    g = np.random.default_rng(seed)
    mu1, mu2 = g.normal(size=n), g.normal(size=n)
    s1, s2 = random_psd(g, n) + 0.1 * np.eye(n), random_psd(g, n) + 0.1 * np.eye(n)
    assert frechet_distance(mu1, s1, mu2, s2) == pytest.approx(scipy_frechet(mu1, s1, mu2, s2), abs=1e-7)


def test_rejects_bad_shapes():
    with pytest.raises(ContractError):
        frechet_distance(np.zeros(2), np.eye(2), np.zeros(3), np.eye(3))
    with pytest.raises(ContractError):
        frechet_distance(np.zeros(2), np.array([[1.0, 1.0], [0.0, 1.0]]), np.zeros(2), np.eye(2))


@pytest.fixture(scope="module")
def corpus_images():
    images, _ = generate_corpus(32, seed=3)
    return np.stack([i.pixels for i in images])


def test_fbd_same_set_zero_and_symmetric(corpus_images):
    ex = FeatureExtractor(seed=0)
    assert abs(fbd(corpus_images, corpus_images, ex)) <= 1e-8
    a, b = corpus_images[:16], corpus_images[16:]
    assert abs(fbd(a, b, ex) - fbd(b, a, ex)) <= 1e-8


def test_fbd_needs_two_images(corpus_images):
    with pytest.raises(InputError):
        fbd(corpus_images[:1], corpus_images, FeatureExtractor())


def test_fidelity_and_diversity_boundaries(corpus_images):
    ex = FeatureExtractor(seed=0)
    assert abs(fidelity(corpus_images, corpus_images, ex) - 1.0) <= 1e-8
    assert diversity(corpus_images[:1], ex) == 0.0
    assert diversity(np.repeat(corpus_images[:1], 5, axis=0), ex) <= 1e-12
    assert diversity(corpus_images, ex) > 0.0


def test_gen_report_fields(corpus_images):
    prompts = ["clinical colonoscopy image with no polyp"] * len(corpus_images)
    rep = gen_report(corpus_images, corpus_images, prompts, FeatureExtractor())
    assert rep.fbd == 0.0 or rep.fbd <= 1e-8
    assert -1.0 <= rep.agreement <= 1.0
