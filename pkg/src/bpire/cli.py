"""Configuration-driven command line for running experiments to CSV.

One JSON config document describes the environment and the experiment; the
CLI runs it and writes one CSV per experiment (plus ``fit.csv`` for decay
fits and a ``run_manifest.json`` echoing the config) into the output
directory.  Flags cover only paths, seed override and parallelism -- the
config is the archivable record of what ran.

Exit codes:

* 0 -- success;
* 1 -- malformed config (JSON syntax, unknown or missing keys, bad types);
* 2 -- validation failure (environment checks, or an experiment
  precondition such as a zero-variance environment in a rate experiment);
* 3 -- statistics inconclusive or a statistical gate failed (decay SE gate,
  decay CI including 1, unstable Berry-Esseen constant, exploding Laplace
  column, unbounded moment ratio);
* 4 -- I/O failure (unreadable config, unwritable output directory).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from . import __version__
from .env_model import (
    EnvAtom,
    EnvironmentModel,
    GeometricImmigration,
    ImmigrationLaw,
    NoImmigration,
    OffspringLaw,
    PoissonImmigration,
    ShiftedGeometric,
    ShiftedPoisson,
    non_lattice_heuristic,
    validate,
)
from .analytics import hypothesis_report, log_mean_moments
from .mc_verify import (
    ElogWConfig,
    berry_esseen_sup,
    clt_rate_experiment,
    estimate_elogw,
    increment_decay,
    laplace_decay,
    moment_stability,
    walk_oracle_rate,
)
from .sampler import PROMOTION_THRESHOLD

KINDS = (
    "rate",
    "walk-oracle",
    "elogw",
    "decay",
    "berry-esseen",
    "laplace",
    "moments",
    "validate",
)


class ConfigError(Exception):
    """Structurally invalid config: maps to exit code 1."""


class ValidationFailure(Exception):
    """Semantically invalid model or unmet experiment precondition: exit 2."""


@dataclass(frozen=True)
class GridSpec:
    """Arithmetic grid ``min, min+step, ..., max`` (inclusive within half a
    step of float slack)."""

    min: float
    max: float
    step: float

    def __post_init__(self) -> None:
        if not (self.step > 0.0):
            raise ConfigError(f"x_grid.step must be positive, got {self.step}")
        if self.max < self.min:
            raise ConfigError("x_grid.max must not be below x_grid.min")

    def values(self) -> list[float]:
        count = int(math.floor((self.max - self.min) / self.step + 1e-9)) + 1
        return [self.min + i * self.step for i in range(count)]


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    environment: EnvironmentModel
    x_grid: GridSpec | None = None
    n_list: tuple[int, ...] | None = None
    replicates: int = 10**5
    master_seed: int = 0
    horizon: int = 30
    q: float = 1.0
    r: float | None = None
    delta: float = 2.0
    p: float = 2.0
    promotion_threshold: int = PROMOTION_THRESHOLD
    threads: int = 0


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}")


def _require(obj: dict, key: str, where: str) -> Any:
    if key not in obj:
        raise ConfigError(f"missing key {key!r} in {where}")
    return obj[key]


def _as_number(v: Any, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where} must be a number, got {v!r}")
    return float(v)


def _as_int(v: Any, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where} must be an integer, got {v!r}")
    return v


def _parse_offspring(obj: Any, where: str) -> OffspringLaw:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    kind = _require(obj, "kind", where)
    if kind == "shifted_poisson":
        _check_keys(obj, {"kind", "lam"}, where)
        return ShiftedPoisson(lam=_as_number(_require(obj, "lam", where), f"{where}.lam"))
    if kind == "shifted_geometric":
        _check_keys(obj, {"kind", "q"}, where)
        return ShiftedGeometric(q=_as_number(_require(obj, "q", where), f"{where}.q"))
    raise ConfigError(
        f"{where}.kind must be 'shifted_poisson' or 'shifted_geometric', got {kind!r}"
    )


def _parse_immigration(obj: Any, where: str) -> ImmigrationLaw:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    kind = _require(obj, "kind", where)
    if kind == "poisson":
        _check_keys(obj, {"kind", "nu"}, where)
        return PoissonImmigration(nu=_as_number(_require(obj, "nu", where), f"{where}.nu"))
    if kind == "geometric":
        _check_keys(obj, {"kind", "s"}, where)
        return GeometricImmigration(s=_as_number(_require(obj, "s", where), f"{where}.s"))
    if kind == "none":
        _check_keys(obj, {"kind"}, where)
        return NoImmigration()
    raise ConfigError(
        f"{where}.kind must be 'poisson', 'geometric' or 'none', got {kind!r}"
    )


def _parse_environment(obj: Any, where: str = "environment") -> EnvironmentModel:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    _check_keys(obj, {"atoms"}, where)
    atoms_obj = _require(obj, "atoms", where)
    if not isinstance(atoms_obj, list) or not atoms_obj:
        raise ConfigError(f"{where}.atoms must be a nonempty array")
    atoms = []
    for i, a in enumerate(atoms_obj):
        aw = f"{where}.atoms[{i}]"
        if not isinstance(a, dict):
            raise ConfigError(f"{aw} must be an object")
        _check_keys(a, {"offspring", "immigration", "prob"}, aw)
        try:
            atoms.append(
                EnvAtom(
                    offspring=_parse_offspring(_require(a, "offspring", aw), f"{aw}.offspring"),
                    immigration=_parse_immigration(
                        _require(a, "immigration", aw), f"{aw}.immigration"
                    ),
                    prob=_as_number(_require(a, "prob", aw), f"{aw}.prob"),
                )
            )
        except ValueError as exc:  # law parameter out of domain
            raise ValidationFailure(f"{aw}: {exc}") from exc
    return EnvironmentModel(atoms=tuple(atoms))


_CONFIG_KEYS = {f.name for f in fields(ExperimentConfig)}


def parse_config(doc: Any) -> ExperimentConfig:
    """Strictly parse a decoded JSON document into an ExperimentConfig."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(doc, _CONFIG_KEYS, "config")
    kind = _require(doc, "kind", "config")
    if kind not in KINDS:
        raise ConfigError(f"config.kind must be one of {sorted(KINDS)}, got {kind!r}")
    env = _parse_environment(_require(doc, "environment", "config"))

    x_grid = None
    if "x_grid" in doc:
        g = doc["x_grid"]
        if not isinstance(g, dict):
            raise ConfigError("config.x_grid must be an object")
        _check_keys(g, {"min", "max", "step"}, "config.x_grid")
        x_grid = GridSpec(
            min=_as_number(_require(g, "min", "config.x_grid"), "config.x_grid.min"),
            max=_as_number(_require(g, "max", "config.x_grid"), "config.x_grid.max"),
            step=_as_number(_require(g, "step", "config.x_grid"), "config.x_grid.step"),
        )

    n_list = None
    if "n_list" in doc:
        raw = doc["n_list"]
        if not isinstance(raw, list) or not raw:
            raise ConfigError("config.n_list must be a nonempty array of integers")
        n_list = tuple(_as_int(v, "config.n_list entry") for v in raw)

    kwargs: dict[str, Any] = {}
    if "replicates" in doc:
        kwargs["replicates"] = _as_int(doc["replicates"], "config.replicates")
        if kwargs["replicates"] < 1:
            raise ConfigError("config.replicates must be at least 1")
    if "master_seed" in doc:
        seed = _as_int(doc["master_seed"], "config.master_seed")
        if not (0 <= seed < 2**64):
            raise ConfigError("config.master_seed must be an unsigned 64-bit integer")
        kwargs["master_seed"] = seed
    if "horizon" in doc:
        kwargs["horizon"] = _as_int(doc["horizon"], "config.horizon")
        if kwargs["horizon"] < 0:
            raise ConfigError("config.horizon must be nonnegative")
    if "q" in doc:
        kwargs["q"] = _as_number(doc["q"], "config.q")
    if "r" in doc:
        kwargs["r"] = _as_number(doc["r"], "config.r")
    if "delta" in doc:
        kwargs["delta"] = _as_number(doc["delta"], "config.delta")
    if "p" in doc:
        kwargs["p"] = _as_number(doc["p"], "config.p")
    if "promotion_threshold" in doc:
        kwargs["promotion_threshold"] = _as_int(
            doc["promotion_threshold"], "config.promotion_threshold"
        )
        if kwargs["promotion_threshold"] < 2:
            raise ConfigError("config.promotion_threshold must be at least 2")
    if "threads" in doc:
        kwargs["threads"] = _as_int(doc["threads"], "config.threads")
        if kwargs["threads"] < 0:
            raise ConfigError("config.threads must be nonnegative (0 = auto)")

    return ExperimentConfig(kind=kind, environment=env, x_grid=x_grid, n_list=n_list, **kwargs)


def _serialize_offspring(law: OffspringLaw) -> dict:
    if isinstance(law, ShiftedPoisson):
        return {"kind": "shifted_poisson", "lam": law.lam}
    if isinstance(law, ShiftedGeometric):
        return {"kind": "shifted_geometric", "q": law.q}
    raise TypeError(f"unknown offspring law {law!r}")


def _serialize_immigration(law: ImmigrationLaw) -> dict:
    if isinstance(law, PoissonImmigration):
        return {"kind": "poisson", "nu": law.nu}
    if isinstance(law, GeometricImmigration):
        return {"kind": "geometric", "s": law.s}
    if isinstance(law, NoImmigration):
        return {"kind": "none"}
    raise TypeError(f"unknown immigration law {law!r}")


def serialize_config(cfg: ExperimentConfig) -> dict:
    """Inverse of :func:`parse_config`: parse(serialize(c)) == c."""
    doc: dict[str, Any] = {
        "kind": cfg.kind,
        "environment": {
            "atoms": [
                {
                    "offspring": _serialize_offspring(a.offspring),
                    "immigration": _serialize_immigration(a.immigration),
                    "prob": a.prob,
                }
                for a in cfg.environment.atoms
            ]
        },
        "replicates": cfg.replicates,
        "master_seed": cfg.master_seed,
        "horizon": cfg.horizon,
        "q": cfg.q,
        "delta": cfg.delta,
        "p": cfg.p,
        "promotion_threshold": cfg.promotion_threshold,
        "threads": cfg.threads,
    }
    if cfg.x_grid is not None:
        doc["x_grid"] = {"min": cfg.x_grid.min, "max": cfg.x_grid.max, "step": cfg.x_grid.step}
    if cfg.n_list is not None:
        doc["n_list"] = list(cfg.n_list)
    if cfg.r is not None:
        doc["r"] = cfg.r
    return doc


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _need(cfg: ExperimentConfig, field: str) -> Any:
    value = getattr(cfg, field)
    if value is None:
        raise ConfigError(f"config.{field} is required for kind {cfg.kind!r}")
    return value


def _validate_environment(cfg: ExperimentConfig) -> None:
    report = validate(cfg.environment)
    required = {"prob_sum", "mean_log_positive", "offspring_nondegenerate"}
    bad = [c for c in report.failures() if c.name in required]
    if bad:
        msgs = "; ".join(f"{c.name}: {c.detail}" for c in bad)
        raise ValidationFailure(f"environment failed validation: {msgs}")


def run_experiment(cfg: ExperimentConfig, out_dir: Path) -> int:
    """Run one configured experiment, write artifacts, return the exit code."""
    t0 = time.monotonic()
    out_dir.mkdir(parents=True, exist_ok=True)
    status = 0

    if cfg.kind == "validate":
        report = validate(cfg.environment)
        print("validation checks:")
        for c in report.checks:
            print(f"  [{'ok' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
        hyp = hypothesis_report(
            cfg.environment, p=cfg.p, delta=cfg.delta, r=cfg.r if cfg.r is not None else 3.0
        )
        print("hypothesis audit:")
        for e in hyp.entries:
            print(f"  [{'ok' if e.passed else 'FAIL'}] {e.name} = {e.value:.6g} ({e.detail})")
        lat = non_lattice_heuristic(cfg.environment)
        print(f"lattice heuristic: {lat.status}")
        for pair in lat.pairs:
            print(
                f"  atoms {pair.atom_i},{pair.atom_j}: log-mean ratio "
                f"{pair.ratio:.12g} ~ {pair.numerator}/{pair.denominator}"
            )
        status = 0 if report.ok else 2
    elif cfg.kind in ("rate", "walk-oracle"):
        _validate_environment(cfg)
        x_values = _need(cfg, "x_grid").values()
        n_list = _need(cfg, "n_list")
        try:
            if cfg.kind == "rate":
                curve = clt_rate_experiment(
                    cfg.environment,
                    x_values,
                    n_list,
                    cfg.replicates,
                    cfg.master_seed,
                    e_log_w_config=ElogWConfig(
                        horizon=cfg.horizon, replicates=cfg.replicates
                    ),
                    threads=cfg.threads,
                    threshold=cfg.promotion_threshold,
                )
            else:
                curve = walk_oracle_rate(
                    cfg.environment,
                    x_values,
                    n_list,
                    cfg.replicates,
                    cfg.master_seed,
                    threads=cfg.threads,
                )
        except ValueError as exc:
            raise ValidationFailure(str(exc)) from exc
        for w in curve.warnings:
            print(f"warning: {w}", file=sys.stderr)
        name = "rate.csv" if cfg.kind == "rate" else "walk_oracle.csv"
        _write_csv(
            out_dir / name,
            ["x", "n", "dhat", "se", "g_pred", "q_pred"],
            [
                [_fmt(r.x), str(r.n), _fmt(r.dhat), _fmt(r.se), _fmt(r.g), _fmt(r.q_only)]
                for r in curve.rows
            ],
        )
        print(f"wrote {name} ({len(curve.rows)} rows); E log W = {_fmt(curve.e_log_w)}")
    elif cfg.kind == "elogw":
        _validate_environment(cfg)
        est = estimate_elogw(
            cfg.environment,
            horizon=cfg.horizon,
            replicates=cfg.replicates,
            master_seed=cfg.master_seed,
            threads=cfg.threads,
            threshold=cfg.promotion_threshold,
        )
        _write_csv(
            out_dir / "elogw.csv",
            ["N", "mean", "se", "last_increment_estimate", "last_increment_se"],
            [
                [
                    str(est.horizon),
                    _fmt(est.mean),
                    _fmt(est.se),
                    _fmt(est.increment_estimate),
                    _fmt(est.increment_se),
                ]
            ],
        )
        print(f"wrote elogw.csv: mean = {_fmt(est.mean)} +- {_fmt(est.se)}")
    elif cfg.kind == "decay":
        _validate_environment(cfg)
        series = increment_decay(
            cfg.environment,
            cfg.q,
            _need(cfg, "n_list"),
            cfg.replicates,
            cfg.master_seed,
            threads=cfg.threads,
            threshold=cfg.promotion_threshold,
        )
        _write_csv(
            out_dir / "decay.csv",
            ["n", "estimate", "se", "qualifies"],
            [
                [str(r.n), _fmt(r.estimate), _fmt(r.se), "true" if r.qualifies else "false"]
                for r in series.rows
            ],
        )
        fit_rows = []
        if series.status == "ok":
            fit_rows.append(
                [
                    _fmt(series.slope),
                    _fmt(series.rho_hat),
                    _fmt(series.rho_ci[0]),
                    _fmt(series.rho_ci[1]),
                ]
            )
        _write_csv(out_dir / "fit.csv", ["slope", "rho_hat", "ci_lo", "ci_hi"], fit_rows)
        if series.status != "ok":
            print("decay fit inconclusive: fewer than 3 rows pass the 5-SE gate")
            status = 3
        elif series.rho_ci[0] <= 1.0:
            print(f"decay fit rho CI {series.rho_ci} does not exclude 1")
            status = 3
        else:
            print(
                f"wrote decay.csv and fit.csv: rho_hat = {_fmt(series.rho_hat)}, "
                f"99% CI ({_fmt(series.rho_ci[0])}, {_fmt(series.rho_ci[1])})"
            )
    elif cfg.kind == "berry-esseen":
        _validate_environment(cfg)
        try:
            result = berry_esseen_sup(
                cfg.environment,
                _need(cfg, "n_list"),
                cfg.replicates,
                _need(cfg, "x_grid").values(),
                cfg.master_seed,
                threads=cfg.threads,
                threshold=cfg.promotion_threshold,
            )
        except ValueError as exc:
            raise ValidationFailure(str(exc)) from exc
        for w in result.warnings:
            print(f"warning: {w}", file=sys.stderr)
        _write_csv(
            out_dir / "berry_esseen.csv",
            ["n", "sup_dev", "se_max", "c_fit"],
            [
                [str(r.n), _fmt(r.sup_dev), _fmt(r.se_max), _fmt(r.c_fit)]
                for r in result.rows
            ],
        )
        if not result.stable:
            print("berry-esseen constant not stable within factor 2 across n")
            status = 3
        else:
            print(f"wrote berry_esseen.csv: C = {_fmt(result.c)} (stable)")
    elif cfg.kind == "laplace":
        _validate_environment(cfg)
        t_values = [math.exp(x) for x in _need(cfg, "x_grid").values()]
        try:
            result = laplace_decay(
                cfg.environment,
                t_values,
                cfg.horizon,
                cfg.replicates,
                cfg.master_seed,
                r=cfg.r if cfg.r is not None else 2.0,
                threads=cfg.threads,
                threshold=cfg.promotion_threshold,
            )
        except ValueError as exc:
            raise ValidationFailure(str(exc)) from exc
        _write_csv(
            out_dir / "laplace.csv",
            ["t", "phi_hat", "se", "logt_pow_r_times_phi"],
            [
                [_fmt(r.t), _fmt(r.phi_hat), _fmt(r.se), _fmt(r.weighted)]
                for r in result.rows
            ],
        )
        if not result.bounded:
            print("laplace weighted column explodes across the grid")
            status = 3
        else:
            print(f"wrote laplace.csv ({len(result.rows)} rows), bounded")
    elif cfg.kind == "moments":
        _validate_environment(cfg)
        r_value = cfg.r if cfg.r is not None else 2.0
        result = moment_stability(
            cfg.environment,
            r_value,
            _need(cfg, "n_list"),
            cfg.replicates,
            cfg.master_seed,
            threads=cfg.threads,
            threshold=cfg.promotion_threshold,
        )
        _write_csv(
            out_dir / "moments.csv",
            ["n", "r", "estimate", "se"],
            [
                [str(row.n), _fmt(r_value), _fmt(row.estimate), _fmt(row.se)]
                for row in result.rows
            ],
        )
        if not result.bounded:
            print(f"moment ratio {result.ratio:.3g} exceeds 2 beyond SE slack")
            status = 3
        else:
            print(f"wrote moments.csv ({len(result.rows)} rows), bounded")
    else:  # pragma: no cover - kind checked at parse time
        raise ConfigError(f"unhandled kind {cfg.kind!r}")

    manifest = {
        "config": serialize_config(cfg),
        "version": __version__,
        "wall_time_s": round(time.monotonic() - t0, 3),
        "exit_status": status,
    }
    with open(out_dir / "run_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return status


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="bpire",
        description="Run branching-process-in-random-environment experiments "
        "from a JSON config and write CSV results.",
    )
    parser.add_argument("--config", required=True, help="path to the JSON config document")
    parser.add_argument("--out", required=True, help="output directory for CSV artifacts")
    parser.add_argument("--seed", type=int, default=None, help="master seed override (u64)")
    parser.add_argument(
        "--threads", type=int, default=None, help="worker processes (0 = one per CPU)"
    )
    args = parser.parse_args(argv)

    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 4

    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        print(
            f"error: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}",
            file=sys.stderr,
        )
        return 1

    try:
        cfg = parse_config(doc)
        if args.seed is not None:
            if not (0 <= args.seed < 2**64):
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg = dataclasses.replace(cfg, master_seed=args.seed)
        if args.threads is not None:
            if args.threads < 0:
                raise ConfigError("--threads must be nonnegative (0 = auto)")
            cfg = dataclasses.replace(cfg, threads=args.threads)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        return run_experiment(cfg, Path(args.out))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
