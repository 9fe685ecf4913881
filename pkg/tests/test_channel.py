import math

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import norm

import mfishcode as m
from mfishcode.channel import _equal_responsibility_point
from mfishcode.errors import DegenerateRoundError, InputError, NumericalError


def _responsibility_gap(theta, mu0, s0, mu1, s1, w0, w1):
    n0 = w0 * norm.pdf(theta, mu0, s0)
    n1 = w1 * norm.pdf(theta, mu1, s1)
    return n1 / (n0 + n1) - 0.5


class TestQuantizationThresholds:
    def test_symmetric_case_is_midpoint(self):
        theta = _equal_responsibility_point(0.0, 0.5, 2.0, 0.5, 0.5, 0.5)
        assert theta == pytest.approx(1.0, abs=1e-12)

    def test_equal_sigma_matches_linear_formula(self):
        mu0, mu1, s, w0, w1 = 0.3, 2.1, 0.45, 0.7, 0.3
        theta = _equal_responsibility_point(mu0, s, mu1, s, w0, w1)
        expected = 0.5 * (mu0 + mu1) + s * s * math.log(w0 / w1) / (mu1 - mu0)
        assert theta == pytest.approx(expected, abs=1e-12)

    def test_unequal_sigma_equal_responsibility(self):
        theta = _equal_responsibility_point(0.0, 0.4, 1.8, 0.9, 0.6, 0.4)
        assert abs(_responsibility_gap(theta, 0.0, 0.4, 1.8, 0.9, 0.6, 0.4)) < 1e-10

    def test_full_pipeline_thresholds(self, mhd4):
        asn = m.AssignmentMap(mhd4, np.arange(140, dtype=np.int32))
        prior = m.sample_dirichlet_prior(140, 1.0, seed=0)
        rng = np.random.default_rng(1)
        params = m.GaussianChannelParams(
            mu0=np.zeros(16),
            sigma0=rng.uniform(0.4, 0.7, 16),
            mu1=rng.uniform(1.5, 2.5, 16),
            sigma1=rng.uniform(0.3, 0.9, 16),
        )
        thetas = m.quantization_thresholds(params, asn, prior)
        w0, w1 = m.round_mixture_weights(asn, prior)
        for l in range(16):
            gap = _responsibility_gap(
                thetas[l], params.mu0[l], params.sigma0[l],
                params.mu1[l], params.sigma1[l], w0[l], w1[l],
            )
            assert abs(gap) < 1e-10
            assert params.mu0[l] < thetas[l] < params.mu1[l]

    def test_degenerate_round_named(self):
        # Both molecules light up in round 1 (both codes have bit 1 set).
        book = m.Codebook(length=2, words=np.array([0b01, 0b11], dtype=np.uint32), min_distance=1)
        asn = m.AssignmentMap(book, np.array([0, 1], dtype=np.int32))
        prior = m.PriorDist(np.array([0.5, 0.5]))
        params = m.GaussianChannelParams(
            mu0=np.zeros(2), sigma0=np.full(2, 0.5), mu1=np.ones(2), sigma1=np.full(2, 0.5)
        )
        with pytest.raises(DegenerateRoundError, match="round 1"):
            m.quantization_thresholds(params, asn, prior)

    def test_no_crossing_inside_interval_raises(self):
        with pytest.raises(NumericalError):
            _equal_responsibility_point(0.0, 0.01, 0.1, 5.0, 0.001, 0.999)

    def test_threshold_monotonicity_of_crossovers(self):
        params = m.GaussianChannelParams(
            mu0=np.zeros(1), sigma0=np.array([0.5]), mu1=np.array([2.0]), sigma1=np.array([0.7])
        )
        thetas = np.linspace(0.3, 1.7, 9)
        bacs = [m.bac_from_gaussian(params, np.array([t])) for t in thetas]
        p01 = np.array([b.p01[0] for b in bacs])
        p10 = np.array([b.p10[0] for b in bacs])
        assert np.all(np.diff(p01) < 0)
        assert np.all(np.diff(p10) > 0)


class TestBacFromGaussian:
    def test_threshold_at_off_mean_gives_half(self):
        params = m.GaussianChannelParams(
            mu0=np.array([0.7]), sigma0=np.array([0.4]), mu1=np.array([2.0]), sigma1=np.array([0.5])
        )
        bac = m.bac_from_gaussian(params, np.array([0.7]))
        assert bac.p01[0] == pytest.approx(0.5, abs=1e-12)

    def test_midpoint_equal_sigma_symmetric(self):
        params = m.GaussianChannelParams(
            mu0=np.array([0.0]), sigma0=np.array([0.5]), mu1=np.array([2.0]), sigma1=np.array([0.5])
        )
        bac = m.bac_from_gaussian(params, np.array([1.0]))
        assert bac.p01[0] == pytest.approx(bac.p10[0], abs=1e-15)

    def test_calibrated_params_reproduce_measured_means(self, mhd4):
        # Gaussians calibrated per round so the derived channel averages the
        # measured real-data crossover rates (0.046 false alarm, 0.102 fallout).
        asn = m.AssignmentMap(mhd4, np.arange(140, dtype=np.int32))
        prior = m.PriorDist(np.full(140, 1.0 / 140))
        _, w1 = m.round_mixture_weights(asn, prior)
        rng = np.random.default_rng(3)
        target01 = np.clip(rng.normal(0.046, 0.008, 16), 0.02, 0.08)
        target01 *= 0.046 / target01.mean()
        target10 = np.clip(rng.normal(0.102, 0.015, 16), 0.05, 0.16)
        target10 *= 0.102 / target10.mean()
        params, theta = m.gaussian_params_for_rates(target01, target10, w1)
        derived = m.quantization_thresholds(params, asn, prior)
        assert np.allclose(derived, theta, atol=1e-10)
        bac = m.bac_from_gaussian(params, derived)
        assert bac.p01.mean() == pytest.approx(0.046, abs=1e-9)
        assert bac.p10.mean() == pytest.approx(0.102, abs=1e-9)

    def test_degenerate_inputs_rejected(self):
        params = m.GaussianChannelParams(
            mu0=np.array([0.0]), sigma0=np.array([0.03]), mu1=np.array([10.0]), sigma1=np.array([0.03])
        )
        with pytest.raises(NumericalError):
            m.bac_from_gaussian(params, np.array([5.0]))


class TestLogLikelihood:
    def test_noiseless_limit_matching_sequence(self):
        # log1p keeps the true value -4e-300 instead of rounding to 0.
        bac = m.BacParams(p01=np.full(4, 1e-300), p10=np.full(4, 1e-300))
        assert m.log_likelihood(0b1010, 0b1010, bac) == pytest.approx(0.0, abs=1e-250)

    def test_uniform_flip_probability(self):
        bac = m.BacParams(p01=np.full(3, 0.1), p10=np.full(3, 0.1))
        assert m.log_likelihood(0b101, 0b101, bac) == pytest.approx(3 * math.log(0.9), abs=1e-12)

    def test_single_flip_product(self):
        bac = m.BacParams(p01=np.full(3, 0.1), p10=np.full(3, 0.2))
        got = m.log_likelihood(0b100, 0b000, bac)
        assert got == pytest.approx(2 * math.log(0.9) + math.log(0.1), abs=1e-12)


class TestLikelihoodTable:
    def test_spot_checks_bit_exact(self, mhd4, varied_bac, mhd4_table):
        table = m.likelihood_table(mhd4, varied_bac)
        rng = np.random.default_rng(5)
        for _ in range(100):
            x = int(rng.integers(1 << 16))
            k = int(rng.integers(140))
            assert table.loglik[x, k] == m.log_likelihood(x, int(mhd4.words[k]), varied_bac)

    def test_columns_are_normalized_distributions(self, mhd4_table):
        # Sum over all sequences of Pr(x | c) must be 1 for every codeword.
        col_lse = logsumexp(mhd4_table.loglik, axis=0)
        assert np.all(np.abs(col_lse) < 1e-9)

    def test_toy_table_against_hand_enumeration(self, toy3):
        book, _, bac = toy3
        table = m.likelihood_table(book, bac)
        for x in range(8):
            for k, word in enumerate((0b000, 0b111)):
                prob = 1.0
                for l in range(3):
                    cl = (word >> l) & 1
                    xl = (x >> l) & 1
                    if cl == 0:
                        prob *= 0.1 if xl else 0.9
                    else:
                        prob *= 0.9 if xl else 0.1
                assert table.loglik[x, k] == pytest.approx(math.log(prob), abs=1e-12)

    def test_length_guard(self):
        book = m.Codebook(length=25, words=np.array([1], dtype=np.uint32), min_distance=1)
        bac = m.BacParams(p01=np.full(25, 0.1), p10=np.full(25, 0.1))
        with pytest.raises(InputError):
            m.likelihood_table(book, bac)


class TestSimulate:
    @pytest.fixture(scope="class")
    def sim_setup(self, mhd4):
        asn = m.random_assignment(mhd4, 40, seed=0)
        prior = m.sample_dirichlet_prior(40, 5.0, seed=1)
        _, w1 = m.round_mixture_weights(asn, prior)
        params, theta = m.gaussian_params_for_rates(
            np.full(16, 0.046), np.full(16, 0.102), w1
        )
        table = m.simulate(asn, prior, params, 1_000_000, seed=12)
        return asn, prior, params, theta, table

    def test_molecule_frequencies_match_prior(self, sim_setup):
        asn, prior, _, _, table = sim_setup
        counts = np.bincount(table.truth, minlength=40)
        n = table.n_rows
        sigma = np.sqrt(n * prior.probs * (1 - prior.probs))
        assert np.all(np.abs(counts - n * prior.probs) <= 3 * sigma + 1)

    def test_column_means_match_mixture(self, sim_setup):
        asn, prior, params, _, table = sim_setup
        _, w1 = m.round_mixture_weights(asn, prior)
        y = np.log(table.intensities)
        mean = w1 * params.mu1 + (1 - w1) * params.mu0
        second = w1 * (params.sigma1**2 + params.mu1**2) + (1 - w1) * (
            params.sigma0**2 + params.mu0**2
        )
        std = np.sqrt(second - mean**2)
        assert np.all(np.abs(y.mean(axis=0) - mean) <= 3 * std / np.sqrt(table.n_rows))

    def test_quantized_flip_rates_match_analytic(self, sim_setup):
        asn, prior, params, theta, table = sim_setup
        bac = m.bac_from_gaussian(params, theta)
        words = m.quantize(table, theta)
        sent_bits = ((asn.codewords[table.truth][:, None] >> np.arange(16)) & 1).astype(bool)
        got_bits = ((words[:, None] >> np.arange(16)) & 1).astype(bool)
        for l in range(16):
            on = sent_bits[:, l]
            n_off, n_on = int((~on).sum()), int(on.sum())
            p01_hat = got_bits[~on, l].mean()
            p10_hat = (~got_bits[on, l]).mean()
            assert abs(p01_hat - bac.p01[l]) <= 3 * np.sqrt(bac.p01[l] * (1 - bac.p01[l]) / n_off)
            assert abs(p10_hat - bac.p10[l]) <= 3 * np.sqrt(bac.p10[l] * (1 - bac.p10[l]) / n_on)

    def test_deterministic_given_seed(self, mhd4):
        asn = m.random_assignment(mhd4, 10, seed=0)
        prior = m.PriorDist(np.full(10, 0.1))
        params = m.GaussianChannelParams(
            mu0=np.zeros(16), sigma0=np.full(16, 0.5), mu1=np.full(16, 2.0), sigma1=np.full(16, 0.5)
        )
        a = m.simulate(asn, prior, params, 70_000, seed=3)
        b = m.simulate(asn, prior, params, 70_000, seed=3)
        assert np.array_equal(a.intensities, b.intensities)
        assert np.array_equal(a.truth, b.truth)


class TestQuantize:
    def test_above_threshold_everywhere(self):
        theta = np.array([0.1, 0.5, -0.3])
        table = m.IntensityTable(np.exp(theta)[None, :] * 2.0)
        assert m.quantize(table, theta)[0] == 0b111

    def test_below_threshold_everywhere(self):
        theta = np.array([0.1, 0.5, -0.3])
        table = m.IntensityTable(np.exp(theta)[None, :] / 2.0)
        assert m.quantize(table, theta)[0] == 0b000

    def test_exact_tie_reads_zero(self):
        theta = np.array([0.25, 0.25])
        table = m.IntensityTable(np.exp(theta)[None, :])
        assert m.quantize(table, theta)[0] == 0b00

    def test_non_positive_intensity_names_row(self):
        with pytest.raises(InputError, match="row 1"):
            m.IntensityTable(np.array([[1.0, 2.0], [1.0, 0.0]]))


class TestChannelFiles:
    def test_params_json_round_trip(self, tmp_path):
        params = m.GaussianChannelParams(
            mu0=np.zeros(4), sigma0=np.full(4, 0.5), mu1=np.full(4, 2.0), sigma1=np.full(4, 0.6)
        )
        bac = m.bac_from_gaussian(params, np.full(4, 1.0))
        path = tmp_path / "params.json"
        m.channel.save_params_json(path, params, bac)
        loaded_params, loaded_bac = m.channel.load_params_json(path)
        assert np.array_equal(loaded_params.mu1, params.mu1)
        assert np.array_equal(loaded_bac.p01, bac.p01)
        assert np.array_equal(loaded_bac.theta, bac.theta)

    def test_intensity_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        table = m.IntensityTable(
            rng.uniform(0.5, 3.0, size=(20, 4)), truth=rng.integers(0, 3, size=20)
        )
        path = tmp_path / "intens.csv"
        m.channel.save_intensity_csv(path, table)
        loaded = m.channel.load_intensity_csv(path)
        assert np.array_equal(loaded.intensities, table.intensities)
        assert np.array_equal(loaded.truth, table.truth)

    def test_intensity_csv_with_names(self, tmp_path):
        table = m.IntensityTable(np.array([[1.0, 2.0]]), truth=np.array([1]))
        path = tmp_path / "named.csv"
        m.channel.save_intensity_csv(path, table, molecule_names=["a", "b"])
        assert "b" in path.read_text()
        loaded = m.channel.load_intensity_csv(path, molecule_names=["a", "b"])
        assert loaded.truth[0] == 1

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(InputError):
            m.channel.load_intensity_csv(path)
