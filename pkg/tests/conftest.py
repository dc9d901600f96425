"""Shared environment builders for the test suite."""

import pytest

from bpire import (
    EnvAtom,
    EnvironmentModel,
    NoImmigration,
    PoissonImmigration,
    ShiftedPoisson,
)


def make_env_a(immigration: bool = True) -> EnvironmentModel:
    """Two-atom reference environment: offspring means 2 and 3 with equal
    probability, unit-mean Poisson immigration on both atoms (or none)."""
    imm = PoissonImmigration(nu=1.0) if immigration else NoImmigration()
    return EnvironmentModel(
        atoms=(
            EnvAtom(offspring=ShiftedPoisson(lam=1.0), immigration=imm, prob=0.5),
            EnvAtom(offspring=ShiftedPoisson(lam=2.0), immigration=imm, prob=0.5),
        )
    )


def make_skewed_env() -> EnvironmentModel:
    """Two-point environment with offspring means 2 (prob .75) and 8
    (prob .25): the log-means are in exact ratio 1:3, so the step law of the
    associated walk is lattice."""
    return EnvironmentModel(
        atoms=(
            EnvAtom(
                offspring=ShiftedPoisson(lam=1.0),
                immigration=NoImmigration(),
                prob=0.75,
            ),
            EnvAtom(
                offspring=ShiftedPoisson(lam=7.0),
                immigration=NoImmigration(),
                prob=0.25,
            ),
        )
    )


@pytest.fixture
def env_a() -> EnvironmentModel:
    return make_env_a(immigration=True)


@pytest.fixture
def env_a_pure() -> EnvironmentModel:
    return make_env_a(immigration=False)


@pytest.fixture
def skewed_env() -> EnvironmentModel:
    return make_skewed_env()
