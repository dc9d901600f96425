"""Environment models for branching processes in an i.i.d. random environment.

An environment is a finite mixture of atoms.  Each atom fixes one offspring
law and one immigration law; every generation draws an atom index i.i.d. and
all individuals of that generation reproduce under the atom's offspring law
while immigration arrives under its immigration law.

Offspring laws are shifted by one so that individuals always leave at least
one descendant (``P(X = 0) = 0``), which keeps the population alive and makes
``log Z_n`` well defined along every path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union


@dataclass(frozen=True)
class ShiftedPoisson:
    """Offspring law ``X = 1 + Poisson(lam)``.

    Mean ``1 + lam``, per-individual variance ``lam``.  Requires ``lam > 0``
    so that ``P(X = 1) < 1``.
    """

    lam: float

    def __post_init__(self) -> None:
        if not (self.lam > 0.0) or not math.isfinite(self.lam):
            raise ValueError(f"ShiftedPoisson requires lam > 0, got {self.lam}")

    @property
    def mean(self) -> float:
        return 1.0 + self.lam

    @property
    def variance(self) -> float:
        return self.lam


@dataclass(frozen=True)
class ShiftedGeometric:
    """Offspring law ``X = 1 + G`` where ``G`` counts failures before the
    first success of a Bernoulli(q) sequence: ``P(G = k) = q (1-q)^k``.

    Mean ``1 + (1-q)/q``, per-individual variance ``(1-q)/q**2``.  Requires
    ``0 < q < 1``; ``q = 1`` would make ``X`` identically one.
    """

    q: float

    def __post_init__(self) -> None:
        if not (0.0 < self.q < 1.0):
            raise ValueError(f"ShiftedGeometric requires 0 < q < 1, got {self.q}")

    @property
    def mean(self) -> float:
        return 1.0 + (1.0 - self.q) / self.q

    @property
    def variance(self) -> float:
        return (1.0 - self.q) / (self.q * self.q)


OffspringLaw = Union[ShiftedPoisson, ShiftedGeometric]


@dataclass(frozen=True)
class PoissonImmigration:
    """``Y ~ Poisson(nu)`` immigrants per generation, ``nu >= 0``."""

    nu: float

    def __post_init__(self) -> None:
        if not (self.nu >= 0.0) or not math.isfinite(self.nu):
            raise ValueError(f"PoissonImmigration requires nu >= 0, got {self.nu}")

    @property
    def mean(self) -> float:
        return self.nu


@dataclass(frozen=True)
class GeometricImmigration:
    """``P(Y = k) = s (1-s)^k`` immigrants per generation, ``0 < s <= 1``."""

    s: float

    def __post_init__(self) -> None:
        if not (0.0 < self.s <= 1.0):
            raise ValueError(f"GeometricImmigration requires 0 < s <= 1, got {self.s}")

    @property
    def mean(self) -> float:
        return (1.0 - self.s) / self.s


@dataclass(frozen=True)
class NoImmigration:
    """No immigration: ``Y = 0`` every generation."""

    @property
    def mean(self) -> float:
        return 0.0


ImmigrationLaw = Union[PoissonImmigration, GeometricImmigration, NoImmigration]


@dataclass(frozen=True)
class EnvAtom:
    """One environment state: an offspring law, an immigration law and the
    probability of drawing this state in any given generation."""

    offspring: OffspringLaw
    immigration: ImmigrationLaw
    prob: float

    def __post_init__(self) -> None:
        if not (0.0 < self.prob <= 1.0):
            raise ValueError(f"atom probability must lie in (0, 1], got {self.prob}")


@dataclass(frozen=True)
class EnvironmentModel:
    """Finite-atom environment: generations draw atoms i.i.d. from ``atoms``.

    Construction only checks per-field sanity; cross-atom requirements (the
    probabilities summing to one, a strictly positive variance of ``log m``
    when an experiment needs it) are reported by :func:`validate` so callers
    can decide what is fatal for their use case.
    """

    atoms: tuple[EnvAtom, ...]

    def __post_init__(self) -> None:
        if len(self.atoms) == 0:
            raise ValueError("environment needs at least one atom")
        object.__setattr__(self, "atoms", tuple(self.atoms))

    @property
    def probs(self) -> tuple[float, ...]:
        return tuple(a.prob for a in self.atoms)

    @property
    def offspring_means(self) -> tuple[float, ...]:
        return tuple(a.offspring.mean for a in self.atoms)

    def has_immigration(self) -> bool:
        """True when some atom can produce at least one immigrant."""
        return any(a.immigration.mean > 0.0 for a in self.atoms)


def mean_offspring(atom: EnvAtom) -> float:
    """Conditional offspring mean ``m = E[X | atom]``."""
    return atom.offspring.mean


@dataclass(frozen=True)
class ValidationCheck:
    name: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of :func:`validate`: one entry per structural check.

    ``ok`` is True only when every check passed.  The report is a pure
    function of the environment, so validating the same model twice yields
    equal reports.
    """

    checks: tuple[ValidationCheck, ...]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> tuple[ValidationCheck, ...]:
        return tuple(c for c in self.checks if not c.passed)

    def check(self, name: str) -> ValidationCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def validate(env: EnvironmentModel) -> ValidationReport:
    """Check the structural requirements the statistical machinery relies on.

    Checks performed:

    * ``prob_sum``        -- atom probabilities sum to 1 within 1e-12;
    * ``mean_log_positive`` -- ``E log m > 0`` (supercritical growth);
    * ``sigma_positive``  -- ``Var(log m) > 0``, i.e. at least two atoms with
      distinct offspring means (needed whenever results are standardised by
      ``sigma``);
    * ``offspring_nondegenerate`` -- every offspring law has ``P(X = 1) < 1``
      (guaranteed by the law constructors, re-checked for completeness).

    Failures are returned as entries, not raised: a single-atom environment
    fails ``sigma_positive`` but is still perfectly usable for experiments
    that never standardise.
    """
    checks: list[ValidationCheck] = []

    total = math.fsum(a.prob for a in env.atoms)
    checks.append(
        ValidationCheck(
            "prob_sum",
            abs(total - 1.0) <= 1e-12,
            f"atom probabilities sum to {total!r}",
        )
    )

    # Moments of log m under the atom mixture.
    logm = [math.log(a.offspring.mean) for a in env.atoms]
    mu = math.fsum(p * lm for p, lm in zip(env.probs, logm))
    var = math.fsum(p * (lm - mu) ** 2 for p, lm in zip(env.probs, logm))
    checks.append(
        ValidationCheck(
            "mean_log_positive",
            mu > 0.0,
            f"E log m = {mu!r}",
        )
    )
    checks.append(
        ValidationCheck(
            "sigma_positive",
            var > 0.0,
            f"Var(log m) = {var!r}"
            + ("" if var > 0.0 else " (all atoms share one offspring mean)"),
        )
    )

    degenerate = [
        i
        for i, a in enumerate(env.atoms)
        if isinstance(a.offspring, ShiftedPoisson) and a.offspring.lam <= 0.0
        or isinstance(a.offspring, ShiftedGeometric) and a.offspring.q >= 1.0
    ]
    checks.append(
        ValidationCheck(
            "offspring_nondegenerate",
            not degenerate,
            "all offspring laws satisfy P(X=1) < 1"
            if not degenerate
            else f"atoms {degenerate} have X = 1 almost surely",
        )
    )

    return ValidationReport(tuple(checks))


@dataclass(frozen=True)
class LatticePair:
    """A pair of atoms whose log-mean ratio looks rational: evidence that the
    step distribution of the associated random walk may live on a lattice."""

    atom_i: int
    atom_j: int
    ratio: float
    numerator: int
    denominator: int


@dataclass(frozen=True)
class LatticeDiagnostic:
    """Result of :func:`non_lattice_heuristic`.

    ``status`` is one of:

    * ``"inapplicable"`` -- fewer than two distinct values of ``log m``;
    * ``"warning"``      -- some ratio of log-means is within ``tol`` of a
      rational with denominator at most ``max_denominator``;
    * ``"ok"``           -- no such pair found.

    This is a heuristic, not a proof.  It only inspects pairwise ratios
    ``log m_i / log m_j``, so it detects arithmetic progressions through
    zero (span lattices of the form ``d * Z``) but not every lattice; a
    two-point law is always lattice (its support is trivially an arithmetic
    progression with some offset) even when this check reports ``"ok"``.
    """

    status: str
    pairs: tuple[LatticePair, ...] = field(default_factory=tuple)

    @property
    def flagged(self) -> bool:
        return self.status == "warning"


def non_lattice_heuristic(
    env: EnvironmentModel,
    max_denominator: int = 64,
    tol: float = 1e-9,
) -> LatticeDiagnostic:
    """Flag environments whose ``log m`` values have near-rational ratios.

    For every pair of distinct log-means the ratio ``r = log m_i / log m_j``
    (ordered so ``|r| <= 1``) is compared against fractions ``p/d`` for
    ``d <= max_denominator``; a match within ``tol`` produces a warning pair.
    """
    logm = sorted({math.log(a.offspring.mean) for a in env.atoms})
    if len(logm) < 2:
        return LatticeDiagnostic(status="inapplicable")

    index_of = {}
    for i, a in enumerate(env.atoms):
        index_of.setdefault(math.log(a.offspring.mean), i)

    pairs: list[LatticePair] = []
    for i in range(len(logm)):
        for j in range(i + 1, len(logm)):
            small, big = logm[i], logm[j]
            if big == 0.0:
                continue
            ratio = small / big
            for d in range(1, max_denominator + 1):
                p = round(ratio * d)
                if abs(ratio - p / d) < tol and math.gcd(abs(p), d) == 1:
                    pairs.append(
                        LatticePair(
                            atom_i=index_of[small],
                            atom_j=index_of[big],
                            ratio=ratio,
                            numerator=p,
                            denominator=d,
                        )
                    )
                    break

    if pairs:
        return LatticeDiagnostic(status="warning", pairs=tuple(pairs))
    return LatticeDiagnostic(status="ok")
