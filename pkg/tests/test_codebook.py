import hashlib

import numpy as np
import pytest
from scipy.special import gammaln
from scipy.stats import chisquare

import mfishcode as m
from mfishcode.codebook import dirichlet_alpha_score
from mfishcode.errors import InputError

# Canonical word list is bit-exact across runs and platforms; frozen digest
# of the uint32 array computed from the deterministic construction.
MHD4_SHA256 = "0caf00e7172904455cb8a5ad1950d254df8c1f112c9771036635abff5a6fa1b9"


class TestGenerateMhd4:
    def test_exactly_140_words(self, mhd4):
        assert mhd4.size == 140

    def test_constant_weight_4(self, mhd4):
        assert all(int(w).bit_count() == 4 for w in mhd4.words)

    def test_min_pairwise_distance_is_4_exhaustive(self, mhd4):
        # Independent pure-python check over all 140*139/2 pairs.
        words = [int(w) for w in mhd4.words]
        dists = [
            (a ^ b).bit_count() for i, a in enumerate(words) for b in words[i + 1 :]
        ]
        assert min(dists) == 4
        assert len(dists) == 140 * 139 // 2

    def test_canonical_order_and_bit_exact_repeatability(self, mhd4):
        again = m.generate_mhd4()
        assert np.array_equal(mhd4.words, again.words)
        assert np.all(np.diff(mhd4.words.astype(np.int64)) > 0)
        assert hashlib.sha256(mhd4.words.tobytes()).hexdigest() == MHD4_SHA256

    def test_radius_1_spheres_disjoint(self, mhd4):
        seen = set()
        for w in mhd4.words:
            ball = {int(w)} | {int(w) ^ (1 << l) for l in range(16)}
            assert not (ball & seen)
            seen |= ball


class TestValidate:
    def test_mhd4_report(self, mhd4):
        report = m.validate(mhd4)
        assert report.distinct
        assert report.min_distance == 4
        assert report.weights == {4: 140}
        assert report.constant_weight == 4

    def test_duplicates_reported_not_raised(self):
        book = m.Codebook(length=3, words=np.array([0, 0], dtype=np.uint32), min_distance=0)
        report = m.validate(book)
        assert not report.distinct
        assert report.min_distance == 0

    def test_single_pair_min_distance(self):
        book = m.Codebook(length=3, words=np.array([0b000, 0b111], dtype=np.uint32), min_distance=0)
        assert m.validate(book).min_distance == 3

    def test_mixed_weights_histogram(self):
        book = m.Codebook(length=4, words=np.array([0b0001, 0b0011], dtype=np.uint32), min_distance=0)
        assert m.validate(book).weights == {1: 1, 2: 1}
        assert m.validate(book).constant_weight is None


class TestHammingDistance:
    def test_identity(self):
        assert m.hamming_distance(0b0000, 0b0000) == 0

    def test_complement_on_4_bits(self):
        assert m.hamming_distance(0b1010, 0b0101) == 4

    def test_single_bit_flip(self):
        rng = np.random.default_rng(0)
        for w in rng.integers(0, 1 << 16, size=50):
            l = int(rng.integers(16))
            assert m.hamming_distance(int(w), int(w) ^ (1 << l)) == 1


class TestRandomAssignment:
    def test_full_assignment_uses_every_code(self, mhd4):
        asn = m.random_assignment(mhd4, 140, seed=1)
        assert np.array_equal(np.sort(asn.code_indices), np.arange(140))
        assert asn.unused_indices.size == 0

    def test_partial_assignment_leaves_pool(self, mhd4):
        asn = m.random_assignment(mhd4, 130, seed=1)
        assert asn.n_molecules == 130
        assert asn.unused_indices.size == 10

    def test_same_seed_same_map(self, mhd4):
        a = m.random_assignment(mhd4, 50, seed=42)
        b = m.random_assignment(mhd4, 50, seed=42)
        assert np.array_equal(a.code_indices, b.code_indices)

    def test_too_many_molecules_rejected(self, mhd4):
        with pytest.raises(InputError):
            m.random_assignment(mhd4, 141, seed=0)

    def test_marginals_uniform_over_codes(self):
        # G=2 molecules onto K=3 codes; each molecule's marginal should be
        # uniform over the three codes across 10^4 seeded draws.
        book = m.Codebook(length=2, words=np.array([0, 1, 2], dtype=np.uint32), min_distance=1)
        counts = np.zeros((2, 3))
        for seed in range(10_000):
            asn = m.random_assignment(book, 2, seed=seed)
            counts[0, asn.code_indices[0]] += 1
            counts[1, asn.code_indices[1]] += 1
        for g in (0, 1):
            assert chisquare(counts[g]).pvalue > 0.001


class TestDirichletSampling:
    def test_sums_to_one_and_deterministic(self):
        a = m.sample_dirichlet_prior(17, 1.0, seed=9)
        b = m.sample_dirichlet_prior(17, 1.0, seed=9)
        assert abs(a.probs.sum() - 1.0) < 1e-9
        assert np.array_equal(a.probs, b.probs)

    def test_two_molecules(self):
        p = m.sample_dirichlet_prior(2, 1.0, seed=3)
        assert p.n_molecules == 2
        assert abs(p.probs.sum() - 1.0) < 1e-9

    def test_huge_alpha_concentrates_on_uniform(self):
        for seed in range(100):
            p = m.sample_dirichlet_prior(10, 1e6, seed=seed)
            assert np.all(np.abs(p.probs - 0.1) < 1e-2)

    def test_tiny_alpha_stays_strictly_positive(self):
        p = m.sample_dirichlet_prior(140, 1e-3, seed=4)
        assert np.all(p.probs > 0.0)
        assert abs(p.probs.sum() - 1.0) < 1e-9

    def test_matches_reference_sampler_statistically(self):
        # Sorted-entry means against numpy's own dirichlet at a moderate alpha.
        ours = np.sort([m.sample_dirichlet_prior(5, 0.7, seed=s).probs for s in range(2000)], axis=1)
        ref = np.sort(np.random.default_rng(0).dirichlet(np.full(5, 0.7), size=2000), axis=1)
        assert np.allclose(ours.mean(axis=0), ref.mean(axis=0), atol=0.02)

    def test_bad_arguments(self):
        with pytest.raises(InputError):
            m.sample_dirichlet_prior(10, 0.0, seed=0)
        with pytest.raises(InputError):
            m.sample_dirichlet_prior(1, 1.0, seed=0)


def _symmetric_dirichlet_loglik(probs: np.ndarray, alpha: float) -> float:
    g = probs.size
    return float(
        gammaln(g * alpha) - g * gammaln(alpha) + (alpha - 1.0) * np.log(probs).sum()
    )


class TestEstimateDirichletAlpha:
    def test_uniform_prior_hits_ceiling(self):
        prior = m.PriorDist(np.full(10, 0.1))
        assert m.estimate_dirichlet_alpha(prior) == 1e6

    def test_root_matches_grid_scan_oracle(self):
        prior = m.PriorDist(np.array([0.9, 0.1]))
        grid = np.logspace(-6, 6, 200_001)
        best = grid[np.argmax([_symmetric_dirichlet_loglik(prior.probs, a) for a in grid])]
        estimated = m.estimate_dirichlet_alpha(prior)
        assert abs(np.log(estimated) - np.log(best)) < 1e-3

    def test_score_vanishes_at_unclamped_root(self):
        for seed in range(5):
            prior = m.sample_dirichlet_prior(50, 0.5, seed=seed)
            alpha = m.estimate_dirichlet_alpha(prior)
            if 1e-6 < alpha < 1e6:
                assert abs(dirichlet_alpha_score(prior, alpha)) < 1e-8

    def test_recovers_truth_within_factor(self):
        for true_alpha in (0.01, 0.1, 1.0, 10.0):
            prior = m.sample_dirichlet_prior(1000, true_alpha, seed=123)
            estimated = m.estimate_dirichlet_alpha(prior)
            assert true_alpha / 1.5 <= estimated <= true_alpha * 1.5


class TestPriorDist:
    def test_rejects_zero_entries(self):
        with pytest.raises(InputError):
            m.PriorDist(np.array([0.5, 0.5, 0.0]))

    def test_rejects_bad_sum(self):
        with pytest.raises(InputError):
            m.PriorDist(np.array([0.5, 0.6]))

    def test_renormalized_within_tolerance(self):
        p = m.PriorDist.renormalized(np.array([0.5, 0.5 + 5e-7]))
        assert abs(p.probs.sum() - 1.0) < 1e-12
        with pytest.raises(InputError):
            m.PriorDist.renormalized(np.array([0.5, 0.6]))


class TestFileFormats:
    def test_codebook_tsv_round_trip(self, mhd4, tmp_path):
        path = tmp_path / "book.tsv"
        m.codebook.save_codebook_tsv(path, mhd4)
        names, loaded = m.codebook.load_codebook_tsv(path)
        assert np.array_equal(loaded.words, mhd4.words)
        assert loaded.min_distance == 4
        assert loaded.weight == 4
        assert names[0] == "code_000"
        first = path.read_text().splitlines()[1]
        # round 1 leftmost: word 54 = 0b110110 -> "0110110000000000"
        assert first == "code_000\t0110110000000000"

    def test_assignment_tsv_round_trip(self, mhd4, tmp_path):
        asn = m.random_assignment(mhd4, 20, seed=2, names=tuple(f"g{i}" for i in range(20)))
        path = tmp_path / "assign.tsv"
        m.codebook.save_assignment_tsv(path, asn)
        loaded = m.codebook.load_assignment_tsv(path, codebook=mhd4, molecule_names=[f"g{i}" for i in range(20)])
        assert np.array_equal(loaded.code_indices, asn.code_indices)

    def test_assignment_reorders_to_prior_names(self, mhd4, tmp_path):
        asn = m.random_assignment(mhd4, 3, seed=2, names=("a", "b", "c"))
        path = tmp_path / "assign.tsv"
        m.codebook.save_assignment_tsv(path, asn)
        loaded = m.codebook.load_assignment_tsv(path, codebook=mhd4, molecule_names=["c", "a", "b"])
        assert loaded.names == ("c", "a", "b")
        assert loaded.code_indices[0] == asn.code_indices[2]
        with pytest.raises(InputError):
            m.codebook.load_assignment_tsv(path, codebook=mhd4, molecule_names=["a", "zzz", "c"])

    def test_prior_csv_round_trip(self, tmp_path):
        prior = m.sample_dirichlet_prior(8, 1.0, seed=0)
        path = tmp_path / "prior.csv"
        m.codebook.save_prior_csv(path, prior, names=[f"g{i}" for i in range(8)])
        names, loaded = m.codebook.load_prior_csv(path)
        assert names == [f"g{i}" for i in range(8)]
        assert np.allclose(loaded.probs, prior.probs, rtol=0, atol=1e-15)

    def test_prior_csv_rejects_zero_and_bad_sum(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("molecule,probability\na,0.5\nb,0\n")
        with pytest.raises(InputError):
            m.codebook.load_prior_csv(bad)
        off = tmp_path / "off.csv"
        off.write_text("molecule,probability\na,0.5\nb,0.6\n")
        with pytest.raises(InputError):
            m.codebook.load_prior_csv(off)
