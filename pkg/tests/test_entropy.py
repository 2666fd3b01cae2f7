import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csicodec.autograd import Adam, Tensor
from csicodec.autograd import functional as F
from csicodec.autograd.gradcheck import check_gradients
from csicodec.entropy import FactorizedDensity, SupportOverflowError, quantize_pmf
from csicodec.rangecoder import TOTAL, decode, encode


def gaussian_bin_entropy(sigma):
    """Entropy in bits of N(0, sigma^2) rounded to integers."""
    n = np.arange(-60, 61)
    cdf = lambda x: 0.5 * (1 + np.vectorize(math.erf)(x / (sigma * math.sqrt(2))))
    p = cdf(n + 0.5) - cdf(n - 0.5)
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def fit(density, sample_fn, steps, lr=1e-2, seed=0):
    rng = np.random.default_rng(seed)
    opt = Adam(density.parameters(), lr=lr)
    for _ in range(steps):
        x = sample_fn(rng)
        opt.zero_grad()
        F.mean(density.bits(x)).backward()
        opt.step()
    return density


@pytest.fixture(scope="module")
def gaussian_density():
    d = FactorizedDensity(1, rng=np.random.default_rng(0))
    sample = lambda rng: (rng.normal(0, 2, 4096) + rng.uniform(-0.5, 0.5, 4096)).reshape(1, 1, 64, 64)
    return fit(d, sample, 1500)


class TestCdf:
    def test_far_tails(self):
        d = FactorizedDensity(3, rng=np.random.default_rng(1))
        assert np.all(d.cdf(np.full((3, 1), -1e6)) <= 1e-9)
        assert np.all(d.cdf(np.full((3, 1), 1e6)) >= 1 - 1e-9)

    def test_monotone_on_random_pairs(self, gaussian_density):
        rng = np.random.default_rng(2)
        a = rng.uniform(-20, 20, 10_000)
        b = a + rng.uniform(0, 5, 10_000)
        ca = gaussian_density.cdf(a[None])
        cb = gaussian_density.cdf(b[None])
        assert np.all(ca <= cb)

    def test_pdf_matches_finite_difference(self, gaussian_density):
        x = np.linspace(-8, 8, 101)[None]
        h = 1e-5
        fd = (gaussian_density.cdf(x + h) - gaussian_density.cdf(x - h)) / (2 * h)
        pdf = gaussian_density.pdf(x)
        np.testing.assert_allclose(pdf, fd, atol=1e-6)
        assert np.all(pdf >= 0)


class TestRate:
    def test_far_tail_is_finite_with_warning(self):
        d = FactorizedDensity(1)
        with pytest.warns(RuntimeWarning):
            bits = d.bits(np.full((1, 1, 1, 1), 1e5)).data
        assert np.isfinite(bits).all() and bits[0] == pytest.approx(64.0)

    def test_nll_normalisation(self):
        d = FactorizedDensity(2, rng=np.random.default_rng(3))
        m = np.random.default_rng(4).normal(size=(3, 2, 2, 1))
        total = d.bits(m).data.mean()
        assert d.nll_bits(m, 512).data == pytest.approx(total / 512)

    def test_uniform_bin_costs_nothing(self):
        d = FactorizedDensity(1, rng=np.random.default_rng(5))
        sample = lambda rng: rng.uniform(-0.5, 0.5, (1, 1, 32, 32))
        fit(d, sample, 800, lr=2e-2)
        per_symbol = d.bits(sample(np.random.default_rng(9))).data[0] / 1024
        assert per_symbol < 0.05

    def test_gaussian_cross_entropy_near_analytic(self, gaussian_density):
        rng = np.random.default_rng(6)
        symbols = np.round(rng.normal(0, 2, 20_000)).reshape(1, 1, 200, 100)
        per_symbol = gaussian_density.bits(symbols).data[0] / symbols.size
        assert abs(per_symbol - gaussian_bin_entropy(2.0)) < 0.1

    def test_gradients_latent_and_parameters(self):
        d = FactorizedDensity(2, rng=np.random.default_rng(7))
        for k, m in enumerate(d.factors):
            m.data[...] = np.random.default_rng(k).normal(size=m.shape)
        x = Tensor(np.random.default_rng(8).normal(0, 2, (2, 2, 3, 2)), requires_grad=True)
        res = check_gradients(lambda: d.nll_bits(x, 16), [x, *d.parameters()], n_samples=6,
                              rng=np.random.default_rng(9))
        assert max(r[-1] for r in res) < 1e-4


class TestDiscretize:
    def test_symmetric_parameters_give_symmetric_pmf(self):
        d = FactorizedDensity(2, rng=np.random.default_rng(10))
        for b in d.biases:
            b.data[...] = 0.0
        for a in d.factors:
            a.data[...] = 0.3
        table = d.discretize()
        for ch in table.channels:
            support = ch.freqs[:-1]
            assert ch.n_min == -ch.n_max
            assert np.all(np.abs(support - support[::-1]) <= 1)

    def test_exact_total_and_escape(self, gaussian_density):
        table = gaussian_density.discretize()
        ch = table.channels[0]
        assert int(ch.freqs.sum()) == TOTAL
        assert np.all(ch.freqs >= 1)

    def test_entries_match_direct_cdf_differences(self, gaussian_density):
        ch = gaussian_density.discretize().channels[0]
        n = np.arange(ch.n_min, ch.n_max + 1, dtype=float)
        direct = gaussian_density.cdf((n + 0.5)[None])[0] - gaussian_density.cdf((n - 0.5)[None])[0]
        scaled = direct * TOTAL
        big = scaled >= 1
        assert np.all(np.abs(ch.freqs[:-1][big] - scaled[big]) <= 1)

    def test_support_covers_mass(self, gaussian_density):
        ch = gaussian_density.discretize().channels[0]
        lo = gaussian_density.cdf(np.array([[ch.n_min - 0.5]]))[0, 0]
        hi = gaussian_density.cdf(np.array([[ch.n_max + 0.5]]))[0, 0]
        assert hi - lo >= 1 - 1e-6

    def test_support_overflow(self, gaussian_density):
        with pytest.raises(SupportOverflowError):
            gaussian_density.discretize(max_width=4)

    def test_coded_rate_tracks_model(self, gaussian_density):
        table = gaussian_density.discretize(model_id=1)
        symbols = np.round(np.random.default_rng(11).normal(0, 2, 5000)).astype(int).reshape(1, 50, 100)
        stream = encode(symbols, table)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model_bits = gaussian_density.bits(symbols[None]).data[0]
        assert abs(stream.payload_bits - model_bits) <= 0.02 * model_bits + 64
        np.testing.assert_array_equal(decode(stream, table), symbols)


class TestQuantizePmf:
    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=300).filter(lambda v: sum(v) > 0))
    def test_sums_to_total_with_floor(self, p):
        freqs = quantize_pmf(np.array(p))
        assert int(freqs.sum()) == TOTAL
        assert freqs.min() >= 1

    def test_too_many_symbols(self):
        with pytest.raises(SupportOverflowError):
            quantize_pmf(np.ones(TOTAL + 1))
