"""Environment model: law parameter domains, validation checks, lattice
heuristic."""

import dataclasses
import math

import pytest

from bpire import (
    EnvAtom,
    EnvironmentModel,
    GeometricImmigration,
    NoImmigration,
    PoissonImmigration,
    ShiftedGeometric,
    ShiftedPoisson,
    non_lattice_heuristic,
    validate,
)
from conftest import make_env_a, make_skewed_env


def test_shifted_poisson_moments():
    law = ShiftedPoisson(lam=1.5)
    assert law.mean == 2.5
    assert law.variance == 1.5


def test_shifted_geometric_moments():
    # X = 1 + K with P(K = k) = q (1-q)^k: mean 1 + (1-q)/q, var (1-q)/q^2.
    law = ShiftedGeometric(q=0.25)
    assert law.mean == pytest.approx(4.0)
    assert law.variance == pytest.approx(12.0)


@pytest.mark.parametrize("lam", [0.0, -1.0, math.inf, math.nan])
def test_shifted_poisson_rejects_bad_rate(lam):
    with pytest.raises(ValueError):
        ShiftedPoisson(lam=lam)


@pytest.mark.parametrize("q", [0.0, 1.0, -0.1, 1.1, math.nan])
def test_shifted_geometric_rejects_bad_q(q):
    with pytest.raises(ValueError):
        ShiftedGeometric(q=q)


def test_immigration_means():
    assert PoissonImmigration(nu=0.0).mean == 0.0
    assert PoissonImmigration(nu=2.5).mean == 2.5
    assert GeometricImmigration(s=0.5).mean == pytest.approx(1.0)
    assert GeometricImmigration(s=1.0).mean == 0.0
    assert NoImmigration().mean == 0.0


def test_immigration_rejects_bad_params():
    with pytest.raises(ValueError):
        PoissonImmigration(nu=-0.5)
    with pytest.raises(ValueError):
        GeometricImmigration(s=0.0)
    with pytest.raises(ValueError):
        GeometricImmigration(s=1.5)


def test_atom_prob_domain():
    law = ShiftedPoisson(lam=1.0)
    with pytest.raises(ValueError):
        EnvAtom(offspring=law, immigration=NoImmigration(), prob=0.0)
    with pytest.raises(ValueError):
        EnvAtom(offspring=law, immigration=NoImmigration(), prob=1.2)


def test_environment_requires_atoms():
    with pytest.raises(ValueError):
        EnvironmentModel(atoms=())


def test_environment_is_frozen():
    env = make_env_a()
    with pytest.raises(dataclasses.FrozenInstanceError):
        env.atoms = ()


def test_offspring_means_and_probs():
    env = make_env_a()
    assert env.offspring_means == (2.0, 3.0)
    assert env.probs == (0.5, 0.5)


def test_has_immigration_detects_degenerate_laws():
    assert make_env_a(immigration=True).has_immigration()
    assert not make_env_a(immigration=False).has_immigration()
    # zero-mean immigration laws count as no immigration
    env = EnvironmentModel(
        atoms=(
            EnvAtom(
                offspring=ShiftedPoisson(lam=1.0),
                immigration=PoissonImmigration(nu=0.0),
                prob=1.0,
            ),
        )
    )
    assert not env.has_immigration()
    env = EnvironmentModel(
        atoms=(
            EnvAtom(
                offspring=ShiftedPoisson(lam=1.0),
                immigration=GeometricImmigration(s=1.0),
                prob=1.0,
            ),
        )
    )
    assert not env.has_immigration()


def test_validate_reference_environment():
    report = validate(make_env_a())
    assert report.ok
    assert report.check("prob_sum").passed
    assert report.check("mean_log_positive").passed
    assert report.check("sigma_positive").passed
    assert report.check("offspring_nondegenerate").passed


def test_validate_flags_bad_probability_mass():
    env = EnvironmentModel(
        atoms=(
            EnvAtom(
                offspring=ShiftedPoisson(lam=1.0),
                immigration=NoImmigration(),
                prob=0.5,
            ),
            EnvAtom(
                offspring=ShiftedPoisson(lam=2.0),
                immigration=NoImmigration(),
                prob=0.4,
            ),
        )
    )
    report = validate(env)
    assert not report.ok
    assert not report.check("prob_sum").passed
    # a failed check never raises: the report carries the failure
    assert [c.name for c in report.failures()] == ["prob_sum"]


def test_validate_flags_zero_variance():
    env = EnvironmentModel(
        atoms=(
            EnvAtom(
                offspring=ShiftedPoisson(lam=1.0),
                immigration=NoImmigration(),
                prob=1.0,
            ),
        )
    )
    report = validate(env)
    assert not report.check("sigma_positive").passed
    assert report.check("mean_log_positive").passed  # log m = log 2 > 0


def test_validation_report_unknown_name():
    report = validate(make_env_a())
    with pytest.raises(KeyError):
        report.check("no_such_check")


def test_lattice_heuristic_flags_integer_log_ratio(skewed_env):
    # log 8 / log 2 = 3 exactly: the walk's step law is lattice
    diag = non_lattice_heuristic(skewed_env)
    assert diag.status == "warning"
    assert diag.flagged
    assert any(
        pair.numerator == 3 and pair.denominator == 1 for pair in diag.pairs
    ) or any(pair.numerator == 1 and pair.denominator == 3 for pair in diag.pairs)


def test_lattice_heuristic_accepts_reference_environment(env_a):
    # log 3 / log 2 is irrational and far from small fractions
    diag = non_lattice_heuristic(env_a)
    assert diag.status == "ok"
    assert not diag.flagged


def test_lattice_heuristic_single_atom_inapplicable():
    env = EnvironmentModel(
        atoms=(
            EnvAtom(
                offspring=ShiftedPoisson(lam=1.0),
                immigration=NoImmigration(),
                prob=1.0,
            ),
        )
    )
    assert non_lattice_heuristic(env).status == "inapplicable"


def test_skewed_env_means():
    env = make_skewed_env()
    assert env.offspring_means == (2.0, 8.0)
    assert env.probs == (0.75, 0.25)
