"""Branching random walk in random environment on the half-line.

Survival criteria, quenched first-moment growth, and particle simulation
for a cloud that branches with site-dependent offspring laws and then
steps right with site-dependent probability or stays.
"""
from .criteria import (CriticalDrifts, SurvivalClassification, classify, classify_local, classify_regimes,
                       critical_drifts, embedded_offspring_mean, gs_functional, phi, phi_derivative)
from .env_law import (DensityPiece, Environment, EnvironmentLaw, InvalidLawError, LawAtom, MeanFamily,
                      OffspringDistribution, ValidationReport, law_extremes, sample_environment,
                      two_point_law, validate_law)
from .moments import (GrowthProfile, MomentProfile, estimate_beta, expected_profile, expected_total,
                      feynman_kac_total, max_beta)
from .particle_sim import (EmbeddedSample, ParticleField, Trajectory, embedded_first_passage,
                           empirical_growth_rate, run, step, survival_probability)

__version__ = "0.1.0"
