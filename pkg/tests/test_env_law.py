import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from brwre.env_law import (DensityPiece, Environment, EnvironmentLaw, InvalidLawError, LawAtom, MeanFamily,
                           OffspringDistribution, law_extremes, sample_environment, two_point_law, validate_law)

from conftest import two_atom_laws


class TestOffspringDistribution:
    def test_means(self):
        assert OffspringDistribution.explicit([0.25, 0, 0.75]).mean == pytest.approx(1.5)
        assert OffspringDistribution.geometric(2.5).mean == 2.5
        assert OffspringDistribution.bernoulli_pair(0.4, 3).mean == pytest.approx(1.8)

    def test_variances(self):
        assert OffspringDistribution.explicit([0.5, 0, 0.5]).variance == pytest.approx(1.0)
        assert OffspringDistribution.geometric(2.0).variance == pytest.approx(6.0)
        assert OffspringDistribution.bernoulli_pair(0.5, 2).variance == pytest.approx(1.0)

    @pytest.mark.parametrize("pmf", [[0.5, 0.6], [-0.1, 1.1], []])
    def test_bad_pmf_rejected(self, pmf):
        with pytest.raises(ValueError):
            OffspringDistribution.explicit(pmf)

    def test_pmf_tolerance(self):
        OffspringDistribution.explicit([0.1] * 10)

    def test_family_roundtrip(self):
        d = MeanFamily()(0.8)
        assert d.kind == "bernoulli_pair" and d.k == 2 and d.p0 == pytest.approx(0.6)
        with pytest.raises(ValueError):
            MeanFamily()(2.5)


class TestValidateLaw:
    def test_trivial_branching(self):
        law = EnvironmentLaw.deterministic(OffspringDistribution.explicit([0, 1]), 0.5)
        rep = validate_law(law)
        assert not rep.ok
        assert any("branching trivial" in v for v in rep.violations)

    def test_zero_drift(self):
        law = EnvironmentLaw.deterministic(OffspringDistribution.geometric(2), 0.0)
        rep = validate_law(law)
        assert not rep.ok
        assert any("drift not elliptic" in v for v in rep.violations)

    def test_death_probability(self):
        law = EnvironmentLaw.deterministic(OffspringDistribution.bernoulli_pair(0.99, 2), 0.5)
        rep = validate_law(law)
        assert any("death probability" in v for v in rep.violations)

    def test_case_c_ok_and_strong(self, case_c_law):
        rep = validate_law(case_c_law)
        assert rep.ok and rep.strong_ok

    def test_h_one_is_weak_only(self):
        law = EnvironmentLaw.deterministic(OffspringDistribution.geometric(2), 1.0)
        rep = validate_law(law)
        assert rep.ok and not rep.strong_ok

    def test_weights_must_sum_to_one(self):
        d = OffspringDistribution.geometric(1.5)
        law = EnvironmentLaw.atomic([LawAtom(d, 0.5, 0.5), LawAtom(d, 0.5, 0.4)])
        assert not validate_law(law).ok

    def test_zero_weight_atom_ignored(self):
        good = OffspringDistribution.geometric(1.5)
        bad = OffspringDistribution.explicit([1.0])
        law = EnvironmentLaw.atomic([LawAtom(good, 0.5, 1.0), LawAtom(bad, 0.0, 0.0)])
        assert validate_law(law).ok

    def test_density_law(self, density_law):
        rep = validate_law(density_law)
        assert rep.ok and rep.strong_ok

    def test_density_mass(self):
        law = EnvironmentLaw.density([DensityPiece(0.5, 1.0, 1.0)], 0.5)
        assert any("integrates" in v for v in validate_law(law).violations)

    def test_density_family_range(self):
        law = EnvironmentLaw.density([DensityPiece(2.0, 3.0, 1.0)], 0.5)
        assert not validate_law(law).ok

    def test_delta_range(self):
        law = EnvironmentLaw.deterministic(OffspringDistribution.geometric(2), 0.5, delta=0.6)
        assert not validate_law(law).ok


class TestSampleEnvironment:
    def test_degenerate_mixture(self):
        law = EnvironmentLaw.atomic([LawAtom(OffspringDistribution.geometric(2), 0.5, 1.0),
                                     LawAtom(OffspringDistribution.geometric(0.5), 0.5, 0.0)])
        env = sample_environment(law, 500, seed=1)
        assert np.all(env.mean == 2.0)

    def test_deterministic(self, case_a_law):
        assert sample_environment(case_a_law, 200, 7) == sample_environment(case_a_law, 200, 7)
        assert sample_environment(case_a_law, 200, 7) != sample_environment(case_a_law, 200, 8)

    def test_prefix_stable(self, case_a_law):
        short = sample_environment(case_a_law, 37, 11)
        long = sample_environment(case_a_law, 500, 11)
        assert np.array_equal(short.mean, long.mean[:37])

    def test_case_a_fraction(self, case_a_law):
        env = sample_environment(case_a_law, 10**5, seed=2024)
        frac = np.mean(np.isclose(env.mean, 10 / 9))
        assert abs(frac - 0.75) < 0.01

    def test_chi_square(self):
        fam = MeanFamily()
        w = [0.2, 0.5, 0.3]
        law = EnvironmentLaw.atomic([LawAtom(fam(m), 0.5, q) for m, q in zip([0.5, 1.0, 1.5], w)])
        env = sample_environment(law, 10**5, seed=5)
        observed = np.bincount(env.index, minlength=3)
        assert stats.chisquare(observed, np.array(w) * 10**5).pvalue > 1e-3

    def test_sites_elliptic(self, case_a_law):
        env = sample_environment(case_a_law, 2000, seed=3)
        d = case_a_law.delta
        for dist, h in env.sites[:200]:
            assert dist.prob_zero <= 1 - d
            assert d <= h <= 1
        assert np.all(env.table.p0[env.index] <= 1 - d)
        assert np.all((env.drift >= d) & (env.drift <= 1))

    def test_density_sampling_matches_cdf(self, density_law):
        env = sample_environment(density_law, 20000, seed=9)

        def cdf(x):
            x = np.asarray(x)
            return np.where(x < 1, 1.6 * (np.clip(x, 0.5, 1) - 0.5), 0.8 + 0.2 * (np.clip(x, 1, 2) - 1))

        assert stats.kstest(env.mean, cdf).pvalue > 1e-3
        assert np.all((env.mean >= 0.5) & (env.mean <= 2.0))

    def test_invalid_law_rejected(self):
        law = EnvironmentLaw.deterministic(OffspringDistribution.explicit([1.0]), 0.5)
        with pytest.raises(InvalidLawError):
            sample_environment(law, 10, 0)
        env = sample_environment(law, 10, 0, strict=False)
        assert np.all(env.mean == 0)

    def test_site_roundtrip(self):
        sites = [(OffspringDistribution.explicit([0.2, 0.3, 0.5]), 0.4),
                 (OffspringDistribution.geometric(1.2), 1.0),
                 (OffspringDistribution.bernoulli_pair(0.1, 3), 0.7)]
        env = Environment.from_sites(sites)
        assert env.sites == sites


class TestLawExtremes:
    def test_case_a_at_h_ls(self):
        top, lam = law_extremes(two_point_law(0.75, 10 / 9, 2 / 5, drift=0.1))
        assert top == pytest.approx(10 / 9, abs=1e-15)
        assert lam == pytest.approx(1.0, abs=1e-15)

    def test_deterministic(self):
        top, lam = law_extremes(EnvironmentLaw.deterministic(OffspringDistribution.geometric(1.7), 0.3))
        assert (top, lam) == (pytest.approx(1.7), pytest.approx(1.7 * 0.7))

    def test_density(self, density_law):
        top, lam = law_extremes(density_law)
        assert top == 2.0
        assert 1 - 1 / top == 0.5

    @given(two_atom_laws(), st.floats(0.05, 0.95))
    @settings(max_examples=50, deadline=None)
    def test_permutation_and_split_invariance(self, law, frac):
        atoms = list(law.atoms)
        perm = EnvironmentLaw.atomic(atoms[::-1], delta=law.delta)
        first = atoms[0]
        split = EnvironmentLaw.atomic(
            [LawAtom(first.dist, first.drift, first.weight * frac),
             LawAtom(first.dist, first.drift, first.weight * (1 - frac))] + atoms[1:], delta=law.delta)
        assert law_extremes(perm) == law_extremes(law)
        assert law_extremes(split) == law_extremes(law)


def test_law_id_stable(case_a_law):
    assert case_a_law.law_id == two_point_law(0.75, 10 / 9, 2 / 5, drift=0.3).law_id
    assert case_a_law.law_id != case_a_law.with_drift(0.4).law_id


def test_with_drift_keeps_offspring(density_law):
    other = density_law.with_drift(0.8)
    assert other.pieces == density_law.pieces and other.drift == 0.8
    assert math.isclose(law_extremes(other)[1], 2 * 0.2)
