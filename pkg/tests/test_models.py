"""Tests for models.py - distributions, specs, history sampling and kernels."""

import math

import numpy as np
import pytest
from scipy import integrate

from models import (
    Categorical, Configuration, CountTimes, Defective, Exponential, Fixed, Gamma, Geometric,
    InfectionHistory, Kernel, MarkovSIR, Multitype, PointMass, Poisson, ReedFrost, Uniform,
    backward_kernels, check_type, forward_kernels, make_rng, moments, relative_intensity_laplace,
    sample_histories, sample_history,
)


class TestMakeRng:
    """Tests for master stream construction."""

    def test_same_seed_same_stream(self):
        """Equal seeds reproduce the same draws."""
        assert np.array_equal(make_rng(7).random(5), make_rng(7).random(5))

    def test_different_seeds_differ(self):
        assert not np.array_equal(make_rng(7).random(5), make_rng(8).random(5))

    def test_missing_seed_raises(self):
        with pytest.raises(ValueError, match="seed is required"):
            make_rng(None)


class TestTimeDistributions:
    """Closed-form transforms against their definitions."""

    def test_exponential_laplace(self):
        assert Exponential(2.0).laplace(1.0) == pytest.approx(2.0 / 3.0)
        assert Exponential(2.0).laplace_moment(0.0) == pytest.approx(0.5)

    def test_uniform_laplace(self):
        """int_0^1 e^{-t} dt = 1 - e^{-1}."""
        assert Uniform(0.0, 1.0).laplace(1.0) == pytest.approx(1.0 - math.exp(-1.0))
        assert Uniform(0.0, 1.0).laplace(0.0) == pytest.approx(1.0)

    def test_uniform_mean(self):
        assert Uniform(1.0, 3.0).mean() == pytest.approx(2.0)

    def test_gamma_tail_is_survival_at_zero_theta(self):
        """The tail transform with theta = 0 is the survival function."""
        g = Gamma(2.0, 1.0)
        assert g.tail(1.0, 0.0) == pytest.approx(2.0 * math.exp(-1.0))

    def test_gamma_laplace_matches_quadrature(self):
        g = Gamma(2.5, 1.5)
        direct = integrate.quad(lambda v: math.exp(-0.7 * v) * g.pdf(v), 0.0, np.inf)[0]
        assert g.laplace(0.7) == pytest.approx(direct, rel=1e-8)

    def test_uniform_tail(self):
        assert Uniform(0.0, 1.0).tail(0.25, 0.0) == pytest.approx(0.75)
        assert Uniform(0.0, 1.0).tail(2.0, 0.0) == pytest.approx(0.0)

    def test_point_mass_has_no_density(self):
        with pytest.raises(ValueError, match="no density"):
            PointMass(1.0).pdf(1.0)

    def test_defective_scales_transforms(self):
        d = Defective(Exponential(1.0), 0.4)
        assert d.total_mass == pytest.approx(0.4)
        assert d.laplace(1.0) == pytest.approx(0.2)
        assert d.sf(1e9) == pytest.approx(0.6)

    def test_defective_samples_hit_infinity(self, rng):
        """Roughly 1 - mass of the draws sit at infinity."""
        draws = Defective(Exponential(1.0), 0.4).sample(rng, 20_000)
        assert np.mean(np.isinf(draws)) == pytest.approx(0.6, abs=0.02)

    def test_defective_does_not_nest(self):
        with pytest.raises(ValueError, match="do not nest"):
            Defective(Defective(Exponential(1.0), 0.5), 0.5)

    @pytest.mark.parametrize("build", [
        lambda: Exponential(0.0),
        lambda: Gamma(-1.0, 1.0),
        lambda: Uniform(1.0, 1.0),
        lambda: PointMass(-1.0),
        lambda: Defective(Exponential(1.0), 1.5),
    ])
    def test_invalid_parameters_raise(self, build):
        with pytest.raises(ValueError):
            build()


class TestOffspringLaws:
    """Tests for contact-count laws."""

    def test_geometric_moments(self):
        law = Geometric(2.0)
        assert law.mean == 2.0
        assert law.second_moment == pytest.approx(10.0)

    def test_geometric_sample_mean(self, rng):
        assert Geometric(2.0).sample(rng, 50_000).mean() == pytest.approx(2.0, abs=0.05)

    def test_pgf_at_one(self):
        for law in (Poisson(1.3), Geometric(0.7), Fixed(3), Categorical((0.2, 0.5, 0.3))):
            assert float(law.pgf(1.0)) == pytest.approx(1.0)

    def test_categorical_validation(self):
        with pytest.raises(ValueError, match="sum to 1"):
            Categorical((0.5, 0.6))

    def test_fixed_negative_raises(self):
        with pytest.raises(ValueError, match="must be >= 0"):
            Fixed(-1)


class TestSpecs:
    """Validation and derived quantities of model specs."""

    def test_markov_sir_offspring(self, markov_sir):
        assert markov_sir.offspring.mean == pytest.approx(2.0)
        assert markov_sir.contact_time == Exponential(1.0)

    def test_markov_sir_rejects_zero_rate(self):
        with pytest.raises(ValueError, match="beta > 0"):
            MarkovSIR(0.0, 1.0)

    def test_count_times_rejects_lattice(self):
        with pytest.raises(ValueError, match="non-lattice"):
            CountTimes(Poisson(2.0), PointMass(1.0))

    def test_count_times_rejects_defective(self):
        with pytest.raises(ValueError, match="proper distribution"):
            CountTimes(Poisson(2.0), Defective(Exponential(1.0), 0.5))

    def test_reed_frost_rejects_nonpositive(self):
        with pytest.raises(ValueError, match="must be positive"):
            ReedFrost(0.0)

    def test_multitype_broadcasts_times(self, two_type):
        assert two_type.n_types == 2
        assert two_type.times[1][0] == Exponential(1.0)

    def test_multitype_rejects_reducible(self):
        with pytest.raises(ValueError, match="irreducible"):
            Multitype.build([0.5, 0.5], [[1.0, 0.0], [0.0, 1.0]], Exponential(1.0))

    def test_multitype_rejects_bad_proportions(self):
        with pytest.raises(ValueError, match="sum to 1"):
            Multitype.build([0.5, 0.6], [[1.0, 1.0], [1.0, 1.0]], Exponential(1.0))

    def test_multitype_rejects_shape_mismatch(self):
        with pytest.raises(ValueError, match="2x2"):
            Multitype.build([0.5, 0.5], [[1.0, 1.0]], Exponential(1.0))

    def test_regular_configuration(self, volz_regular):
        assert volz_regular.degrees.tolist() == [3]
        assert volz_regular.mean_degree == pytest.approx(3.0)
        assert volz_regular.factorial_moment2 == pytest.approx(6.0)
        assert volz_regular.size_biased.tolist() == [1.0]
        assert volz_regular.is_volz

    def test_heterogeneous_configuration(self, volz_heterogeneous):
        spec = volz_heterogeneous
        assert spec.degrees.tolist() == [1, 2, 3, 4]
        assert spec.mean_degree == pytest.approx(2.5)
        assert spec.factorial_moment2 == pytest.approx(4.8)
        assert spec.size_biased.sum() == pytest.approx(1.0)
        assert spec.pgf(1.0, 1) == pytest.approx(2.5)

    def test_configuration_skips_empty_classes(self):
        spec = Configuration.volz(1.0, 1.0, [0.5, 0.0, 0.5])
        assert spec.degrees.tolist() == [1, 3]
        assert spec.n_types == 2

    def test_non_exponential_is_not_volz(self):
        spec = Configuration((0.0, 1.0), Gamma(2.0, 2.0), Exponential(1.0))
        assert spec.is_identical
        assert not spec.is_volz

    def test_check_type(self, two_type):
        check_type(two_type, 1)
        with pytest.raises(ValueError, match="invalid type index"):
            check_type(two_type, 2)


class TestHistories:
    """Tests for potential infection history sampling."""

    def test_history_validation(self):
        with pytest.raises(ValueError, match="positive and non-decreasing"):
            InfectionHistory(np.array([0.5, 0.2]), np.array([0, 0]))
        with pytest.raises(ValueError, match="after removal"):
            InfectionHistory(np.array([0.5, 2.0]), np.array([0, 0]), removal=1.0)

    def test_markov_contacts_inside_period(self, markov_sir, rng):
        for _ in range(50):
            h = sample_history(markov_sir, 0, rng)
            assert h.removal is not None
            assert np.all(h.times <= h.removal)
            assert np.all(np.diff(h.times) >= 0)

    def test_markov_mean_contacts(self, markov_sir, rng):
        """Contacts per infective average beta / gamma."""
        batch = sample_histories(markov_sir, np.zeros(20_000, dtype=int), rng)
        assert len(batch.times) / batch.size == pytest.approx(2.0, abs=0.1)

    def test_markov_count_law(self, markov_sir, rng):
        """Contact counts are geometric: P(k) = (2/3)^k / 3 for beta = 2, gamma = 1."""
        n = 100_000
        counts = np.diff(sample_histories(markov_sir, np.zeros(n, dtype=int), rng).offsets)
        for k in range(6):
            p = (2 / 3) ** k / 3
            assert abs(np.mean(counts == k) - p) < 4 * math.sqrt(p * (1 - p) / n)

    def test_batch_is_grouped_by_owner(self, two_type, rng):
        batch = sample_histories(two_type, [0, 1, 1, 0], rng)
        assert batch.offsets[0] == 0 and batch.offsets[-1] == len(batch.times)
        for i in range(batch.size):
            h = batch.history(i)
            assert np.all(np.diff(h.times) >= 0)
            assert set(h.targets.tolist()) <= {0, 1}

    def test_reed_frost_unit_delays(self, reed_frost, rng):
        batch = sample_histories(reed_frost, np.zeros(100, dtype=int), rng)
        assert np.all(batch.times == 1.0)

    def test_configuration_root_slots(self, volz_regular, rng):
        """A root has l acquaintance slots, everyone else l - 1."""
        roots = sample_histories(volz_regular, [0, 0], rng, roots=True)
        others = sample_histories(volz_regular, [0, 0], rng)
        assert roots.candidates.tolist() == [3, 3]
        assert others.candidates.tolist() == [2, 2]
        assert np.all(np.diff(others.offsets) <= 2)

    def test_volz_acquaintance_probability(self, volz_regular, rng):
        """Each of the two non-root slots is realized with probability U(0) = alpha / (alpha + beta)."""
        u0 = relative_intensity_laplace(volz_regular, 0.0)[0, 0]
        assert u0 == pytest.approx(2 / 3)
        n = 20_000
        counts = np.diff(sample_histories(volz_regular, np.zeros(n, dtype=int), rng).offsets)
        assert abs(counts.mean() - 2 * u0) < 4 * counts.std() / math.sqrt(n)

    def test_same_seed_same_history(self, count_times_uniform):
        a = sample_history(count_times_uniform, 0, make_rng(3))
        b = sample_history(count_times_uniform, 0, make_rng(3))
        assert np.array_equal(a.times, b.times)

    def test_invalid_type_raises(self, markov_sir, rng):
        with pytest.raises(ValueError, match="invalid type index"):
            sample_history(markov_sir, 1, rng)


class TestKernels:
    """Tests for contact kernels and their transforms."""

    def test_markov_kernel_at_lambda(self, markov_sir):
        kernel = forward_kernels(markov_sir)[0][0]
        assert kernel.laplace(1.0) == pytest.approx(1.0)
        assert kernel.total == pytest.approx(2.0)

    def test_censored_exponential_kernel(self):
        """2 * Exp(1) contacts censored by an Exp(1/2) period."""
        kernel = Kernel(2.0, Exponential(1.0), Exponential(0.5))
        assert kernel.laplace(0.5) == pytest.approx(1.0)
        assert kernel.laplace_moment(0.5) == pytest.approx(0.5)
        assert kernel.tail(0.0) == pytest.approx(kernel.total)

    def test_point_mass_censor(self):
        kernel = Kernel(1.0, Exponential(1.0), PointMass(1.0))
        assert kernel.laplace(0.5) == pytest.approx((1.0 - math.exp(-1.5)) / 1.5)

    def test_quadrature_fallback(self):
        """Uniform contacts censored by a uniform period: total mass 0.875."""
        kernel = Kernel(1.0, Uniform(0.0, 1.0), Uniform(0.5, 1.5))
        assert kernel.total == pytest.approx(0.875, rel=1e-8)
        assert kernel.tail(0.0) == pytest.approx(0.875, rel=1e-4)
        assert kernel.tail(0.75) == pytest.approx(0.15625, rel=1e-3)

    def test_backward_kernels_transpose(self):
        spec = Multitype.build([0.5, 0.5], [[1.0, 2.0], [0.5, 1.0]], Exponential(1.0))
        fk, bk = forward_kernels(spec), backward_kernels(spec)
        assert bk[0][1].weight == fk[1][0].weight
        assert bk[1][0].weight == fk[0][1].weight

    def test_relative_intensity_laplace(self, count_times_uniform):
        assert relative_intensity_laplace(count_times_uniform, 1.0) == pytest.approx(1.0 - math.exp(-1.0))

    def test_relative_intensity_laplace_matrix(self, volz_regular):
        U = relative_intensity_laplace(volz_regular, 0.5)
        assert U.shape == (1, 1)
        assert U[0, 0] == pytest.approx(0.5)

    def test_relative_intensity_negative_raises(self, markov_sir):
        with pytest.raises(ValueError, match="nonnegative"):
            relative_intensity_laplace(markov_sir, -1.0)

    def test_moments(self, markov_sir, volz_regular):
        assert moments(markov_sir) == (2.0, pytest.approx(10.0))
        mean, _ = moments(volz_regular)
        assert mean[0, 0] == pytest.approx(4.0 / 3.0, rel=1e-8)
