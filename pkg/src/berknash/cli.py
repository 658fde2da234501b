"""Command-line interface.

Model configs are YAML (JSON is accepted, being a subset). A config holds
either a named generator with its parameters or explicit arrays::

    schema_version: 1
    generator:
      name: effort_task
      params: {c: 0.45, q0: 0.3, q1: 0.6}
    solver: {slack: 1.0e-8}
    seed: 0

Exit codes: 0 success, 2 no equilibrium found, 3 regularity or structure
failure under ``--strict``, 4 config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from functools import partial

import numpy as np
import yaml

from . import __version__
from .comparative_statics import SWEEP_COLUMNS, ShockSpec, sweep
from .equilibrium import (
    Equilibrium,
    NoEquilibriumError,
    ResidualReport,
    SolverOptions,
    solve_berk_nash,
    solve_subjective,
    verify_equilibrium,
)
from .examples_registry import GENERATORS
from .learning_sim import CSV_COLUMNS, simulate_learning
from .mdp_core import Grid, JointDistribution, Kernel, Mdp, Policy
from .smdp_models import (
    Belief,
    ModelFamily,
    Smdp,
    check_likelihood_ratio_property,
    check_monotone_structure,
    check_regularity,
)
from .welfare import welfare_report

__all__ = ["ConfigError", "ModelConfig", "build_smdp", "emit_config", "main", "parse_config", "run_subcommand"]

SCHEMA_VERSION = 1
EXIT_OK, EXIT_NO_EQ, EXIT_STRICT, EXIT_CONFIG = 0, 2, 3, 4
TOP_FIELDS = {"schema_version", "generator", "model", "solver", "seed"}
MODEL_FIELDS = {
    "states",
    "actions",
    "payoff",
    "outcome_payoff",
    "discount",
    "true_kernel",
    "theta_grid",
    "model_kernels",
}
SOLVER_FIELDS = {f.name for f in dataclasses.fields(SolverOptions)}
EXAMPLE_PARAMS = {
    "effort_task": {"c": 0.45, "q0": 0.3, "q1": 0.6},
    "ar1": {"rho": 0.6},
    "savings": {},
}
ROW_TOL = 1e-12


class ConfigError(ValueError):
    """Invalid config; ``errors`` lists messages prefixed by field paths."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class ModelConfig:
    schema_version: int
    generator: str | None = None
    params: dict = field(default_factory=dict)
    model: dict | None = None
    solver: dict = field(default_factory=dict)
    seed: int | None = None

    def to_dict(self) -> dict:
        out = {"schema_version": self.schema_version}
        if self.generator is not None:
            out["generator"] = {"name": self.generator, "params": dict(self.params)}
        if self.model is not None:
            out["model"] = self.model
        if self.solver:
            out["solver"] = dict(self.solver)
        if self.seed is not None:
            out["seed"] = self.seed
        return out

    def solver_options(self, **overrides) -> SolverOptions:
        return SolverOptions(**{**self.solver, **overrides})


def _shape(a):
    try:
        return np.asarray(a, dtype=float).shape
    except (TypeError, ValueError):
        return None


def _check_grid(value, path, errors):
    pts = value.get("points") if isinstance(value, dict) else value
    if isinstance(value, dict):
        for k in value:
            if k not in ("points", "label", "coords"):
                errors.append(f"{path}.{k}: unknown field")
    shp = _shape(pts)
    if shp is None or len(shp) != 1 or shp[0] == 0:
        errors.append(f"{path}: expected a nonempty list of numbers")
        return None
    if np.any(np.diff(np.asarray(pts, float)) <= 0):
        errors.append(f"{path}: points must be strictly increasing")
    return shp[0]


def _check_rows(arr, path, errors):
    a = np.asarray(arr, float)
    if np.any(a < 0):
        errors.append(f"{path}: negative probability")
    bad = np.argwhere(np.abs(a.sum(axis=-1) - 1.0) > ROW_TOL)
    for idx in bad[:10]:
        where = "".join(f"[{int(i)}]" for i in idx)
        errors.append(f"{path}{where}: row sums to {a[tuple(idx)].sum():.17g}, expected 1")


def _validate_model(model, errors):
    if not isinstance(model, dict):
        errors.append("model: expected a mapping")
        return
    for k in model:
        if k not in MODEL_FIELDS:
            errors.append(f"model.{k}: unknown field")
    for k in ("states", "actions", "discount", "true_kernel", "theta_grid", "model_kernels"):
        if k not in model:
            errors.append(f"model.{k}: required field missing")
    if errors:
        return
    S = _check_grid(model["states"], "model.states", errors)
    X = _check_grid(model["actions"], "model.actions", errors)
    n = _check_grid(model["theta_grid"], "model.theta_grid", errors)
    if None in (S, X, n):
        return
    d = model["discount"]
    if not isinstance(d, (int, float)) or not 0 <= d < 1:
        errors.append("model.discount: must be a number in [0, 1)")
    if "payoff" not in model and "outcome_payoff" not in model:
        errors.append("model.payoff: required field missing (or give model.outcome_payoff)")
    for key, want in (
        ("payoff", (S, X)),
        ("outcome_payoff", (S, X, S)),
        ("true_kernel", (S, X, S)),
        ("model_kernels", (n, S, X, S)),
    ):
        if key not in model:
            continue
        shp = _shape(model[key])
        if shp != want:
            errors.append(f"model.{key}: shape {shp} does not match expected {want}")
        elif key in ("true_kernel", "model_kernels"):
            _check_rows(model[key], f"model.{key}", errors)


def _validate_generator(gen, errors):
    if not isinstance(gen, dict):
        errors.append("generator: expected a mapping with name and params")
        return None, {}
    for k in gen:
        if k not in ("name", "params"):
            errors.append(f"generator.{k}: unknown field")
    name = gen.get("name")
    if name not in GENERATORS:
        errors.append(f"generator.name: unknown generator {name!r}; choose from {sorted(GENERATORS)}")
        return name, {}
    params = gen.get("params") or {}
    if not isinstance(params, dict):
        errors.append("generator.params: expected a mapping")
        return name, {}
    spec_cls = GENERATORS[name][0]
    names = {f.name for f in dataclasses.fields(spec_cls)}
    bad = False
    for k in params:
        if k not in names:
            errors.append(f"generator.params.{k}: unknown field for {name}")
            bad = True
    if not bad:
        try:
            spec_cls(**_spec_args(params))
        except (TypeError, ValueError) as exc:
            errors.append(f"generator.params: {exc}")
    return name, params


def _spec_args(params: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in params.items()}


def parse_config(text: str) -> ModelConfig:
    """Parse and validate a YAML or JSON model config.

    Raises
    ------
    ConfigError
        With one message per problem, each naming its field path.
    """
    # JSON first: YAML 1.1 reads exponents without a dot (1e-08) as strings
    try:
        data = json.loads(text)
    except ValueError:
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError([f"parse error: {exc}"]) from None
    if not isinstance(data, dict):
        raise ConfigError(["<root>: expected a mapping"])
    errors = []
    for k in data:
        if k not in TOP_FIELDS:
            errors.append(f"{k}: unknown field")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        errors.append(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    has_gen, has_model = "generator" in data, "model" in data
    if has_gen == has_model:
        errors.append("<root>: give exactly one of generator and model")
    name, params = None, {}
    if has_gen:
        name, params = _validate_generator(data["generator"], errors)
    if has_model:
        _validate_model(data["model"], errors)
    solver = data.get("solver") or {}
    if not isinstance(solver, dict):
        errors.append("solver: expected a mapping")
        solver = {}
    for k in solver:
        if k not in SOLVER_FIELDS:
            errors.append(f"solver.{k}: unknown field")
    if not errors:
        try:
            SolverOptions(**solver)
        except (TypeError, ValueError) as exc:
            errors.append(f"solver: {exc}")
    seed = data.get("seed")
    if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool) or seed < 0):
        errors.append("seed: expected a nonnegative integer")
    if errors:
        raise ConfigError(errors)
    return ModelConfig(
        schema_version=version,
        generator=name if has_gen else None,
        params=dict(params),
        model=data["model"] if has_model else None,
        solver=dict(solver),
        seed=seed,
    )


def _grid(value, label) -> Grid:
    if isinstance(value, dict):
        return Grid(value["points"], value.get("label", label), value.get("coords"))
    return Grid(value, label)


def build_smdp(cfg: ModelConfig, **overrides) -> Smdp:
    """Instantiate the model described by a config."""
    if cfg.generator is not None:
        spec_cls, builder = GENERATORS[cfg.generator]
        return builder(spec_cls(**_spec_args({**cfg.params, **overrides})))
    if overrides:
        raise ConfigError(["model: parameter overrides need a generator config"])
    m = cfg.model
    mdp = Mdp(
        _grid(m["states"], "states"),
        _grid(m["actions"], "actions"),
        Kernel(m["true_kernel"]),
        m.get("payoff"),
        m["discount"],
        m.get("outcome_payoff"),
    )
    fam = ModelFamily(_grid(m["theta_grid"], "theta"), kernels=m["model_kernels"])
    return Smdp(mdp, fam, name="explicit")


def emit_config(cfg: ModelConfig, fmt: str = "yaml") -> str:
    """Serialise a config; floats keep full precision."""
    d = cfg.to_dict()
    if fmt == "json":
        return json.dumps(d, indent=2) + "\n"
    return yaml.safe_dump(d, sort_keys=False)


def example_config(name: str) -> ModelConfig:
    """Generator config with every spec field at its default value."""
    spec_cls = GENERATORS[name][0]
    spec = spec_cls(**EXAMPLE_PARAMS[name])
    params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(spec).items()}
    return ModelConfig(SCHEMA_VERSION, generator=name, params=params, seed=0)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, default=_default) + "\n"


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _load(args) -> ModelConfig:
    if not args.model:
        raise ConfigError(["--model: a config path is required"])
    try:
        with open(args.model) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError([f"--model: {exc}"]) from None
    return parse_config(text)


def _smdp(cfg: ModelConfig) -> Smdp:
    try:
        return build_smdp(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError([f"model: {exc}"]) from None


def _opts(cfg: ModelConfig, args) -> SolverOptions:
    extra = {"verify_tol": args.tol} if args.tol is not None else {}
    return cfg.solver_options(**extra)


def _write(args, text: str):
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _strict_failures(smdp: Smdp) -> dict:
    reg = check_regularity(smdp)
    out = {"regularity": reg.summary()}
    failed = []
    if not reg.interior_absolute_continuity_ok:
        failed.append("absolute_continuity")
    try:
        mono = check_monotone_structure(smdp)
        out["monotone"] = dataclasses.asdict(mono) | {"passed": mono.passed}
        if not mono.passed:
            failed.append("monotone_structure")
    except ValueError as exc:
        out["monotone"] = {"error": str(exc)}
        failed.append("monotone_structure")
    try:
        lr = check_likelihood_ratio_property(smdp)
        out["likelihood_ratio"] = dataclasses.asdict(lr) | {"passed": lr.passed}
        if not lr.passed:
            failed.append("likelihood_ratio")
    except ValueError as exc:
        out["likelihood_ratio"] = {"error": str(exc)}
        failed.append("likelihood_ratio")
    out["failed"] = failed
    return out


def _cmd_solve(args) -> int:
    cfg = _load(args)
    smdp = _smdp(cfg)
    if args.strict:
        reg = check_regularity(smdp)
        if not reg.interior_absolute_continuity_ok:
            sys.stderr.write("regularity check failed: " + json.dumps(reg.summary()) + "\n")
            return EXIT_STRICT
    try:
        eqs = solve_berk_nash(smdp, _opts(cfg, args))
    except NoEquilibriumError as exc:
        sys.stderr.write(f"{exc}\n")
        _write(args, _json({"model": smdp.name, "equilibria": [], "diagnostics": exc.diagnostics}))
        return EXIT_NO_EQ
    _write(args, _json({"model": smdp.name, "equilibria": [e.summary() for e in eqs]}))
    return EXIT_OK


def _cmd_verify(args) -> int:
    cfg = _load(args)
    smdp = _smdp(cfg)
    if not args.candidate:
        raise ConfigError(["--candidate: a candidate JSON path is required"])
    try:
        with open(args.candidate) as fh:
            cand = json.load(fh)
        m = JointDistribution(np.asarray(cand["m_star"], float))
        theta = float(cand["theta_star"])
        policy = Policy(cand["policy"]) if "policy" in cand else m.conditional_policy()
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise ConfigError([f"--candidate: {exc}"]) from None
    if m.mass.shape != (smdp.mdp.n_states, smdp.mdp.n_actions):
        raise ConfigError([f"--candidate.m_star: shape {m.mass.shape} does not match the model"])
    mu = Belief.dirac(smdp.family.n_theta, smdp.theta_grid.nearest(theta))
    opts = _opts(cfg, args)
    v = solve_subjective(smdp.subjective_mdp(mu, smdp.family_for(m)), opts)
    eq = Equilibrium(m, mu, theta, policy, v, ResidualReport(0.0, 0.0, 0.0))
    tol = args.tol if args.tol is not None else 1e-8
    rep = verify_equilibrium(smdp, eq, tol)
    _write(args, _json({"residuals": rep.as_dict(), "worst": rep.worst, "ok": rep.ok(tol), "tol": tol}))
    return EXIT_OK


def _cmd_simulate(args) -> int:
    cfg = _load(args)
    smdp = _smdp(cfg)
    seed = args.seed if args.seed is not None else (cfg.seed or 0)
    prior = Belief.uniform(smdp.family.n_theta)
    tr = simulate_learning(smdp, prior, args.periods, seed=seed, mode=args.mode)
    if args.out == "json":
        _write(args, _json([dict(zip(CSV_COLUMNS, r)) for r in tr.rows()]))
    else:
        _write(args, tr.to_csv())
    return EXIT_OK


def _target_for(param: str) -> str:
    if param in ("discount", "delta"):
        return "discount"
    if param.startswith("theta_"):
        return "theta_bounds"
    if param in ("q0", "q1", "rho", "mu1", "mu2", "sigma", "alpha_star", "beta_star", "gamma_star"):
        return "true_kernel"
    return "payoff"


def _sweep_builder(name, params, param, value):
    spec_cls, builder = GENERATORS[name]
    return builder(spec_cls(**_spec_args({**params, param: value})))


def _cmd_sweep(args) -> int:
    cfg = _load(args)
    if cfg.generator is None:
        raise ConfigError(["model: sweeps need a generator config"])
    if not args.param or not args.values:
        raise ConfigError(["--param/--values: both are required for sweep"])
    try:
        values = tuple(float(v) for v in args.values.split(","))
        shock = ShockSpec(args.param, values, _target_for(args.param))
    except ValueError as exc:
        raise ConfigError([f"--values: {exc}"]) from None
    names = {f.name for f in dataclasses.fields(GENERATORS[cfg.generator][0])}
    if args.param not in names:
        raise ConfigError([f"--param: {args.param!r} is not a field of {cfg.generator}"])
    builder = partial(_sweep_builder, cfg.generator, cfg.params, args.param)
    res = sweep(builder, shock, _opts(cfg, args), jobs=args.jobs)
    if args.out == "json":
        _write(args, _json([dict(zip(SWEEP_COLUMNS, r)) for r in res.rows()]))
    else:
        _write(args, res.to_csv())
    return EXIT_OK


def _cmd_welfare(args) -> int:
    cfg = _load(args)
    smdp = _smdp(cfg)
    try:
        eqs = solve_berk_nash(smdp, _opts(cfg, args))
    except NoEquilibriumError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_NO_EQ
    rep = welfare_report(smdp, eqs[-1])
    _write(args, rep.to_json() + "\n")
    return EXIT_OK


def _cmd_example(args) -> int:
    if args.name not in GENERATORS:
        raise ConfigError([f"example: unknown generator {args.name!r}; choose from {sorted(GENERATORS)}"])
    cfg = example_config(args.name)
    _write(args, emit_config(cfg, "json" if args.out == "json" else "yaml"))
    return EXIT_OK


def _cmd_check(args) -> int:
    cfg = _load(args)
    smdp = _smdp(cfg)
    out = _strict_failures(smdp)
    out["misspecified"] = smdp.misspecified
    _write(args, _json(out))
    return EXIT_STRICT if args.strict and out["failed"] else EXIT_OK


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", help="path to a YAML or JSON model config")
    common.add_argument("--tol", type=float, help="residual tolerance for accepting equilibria")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out", choices=("json", "csv"), help="output format")
    common.add_argument("--output", help="write to this path instead of stdout")
    common.add_argument("--strict", action="store_true", help="fail with exit 3 on regularity problems")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    p = argparse.ArgumentParser(prog="berknash", description="Berk-Nash equilibrium solver suite")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve for equilibria (JSON)")
    v = sub.add_parser("verify", parents=[common], help="residuals of a candidate equilibrium")
    v.add_argument("--candidate", help="candidate JSON with m_star, theta_star and optional policy")
    s = sub.add_parser("simulate", parents=[common], help="learning trajectory (CSV)")
    s.add_argument("--periods", type=int, default=1000)
    s.add_argument("--mode", choices=("anticipated", "belief_dp"), default="anticipated")
    w = sub.add_parser("sweep", parents=[common], help="comparative-statics sweep (CSV)")
    w.add_argument("--param", help="generator parameter to vary")
    w.add_argument("--values", help="comma-separated strictly monotone values")
    sub.add_parser("welfare", parents=[common], help="welfare comparison (JSON)")
    e = sub.add_parser("example", parents=[common], help="emit a generator config")
    e.add_argument("name", help=f"one of {sorted(GENERATORS)}")
    sub.add_parser("check", parents=[common], help="regularity and structure reports (JSON)")
    return p


COMMANDS = {
    "solve": _cmd_solve,
    "verify": _cmd_verify,
    "simulate": _cmd_simulate,
    "sweep": _cmd_sweep,
    "welfare": _cmd_welfare,
    "example": _cmd_example,
    "check": _cmd_check,
}


def run_subcommand(argv) -> int:
    """Run one CLI invocation and return its exit code."""
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        for msg in exc.errors:
            sys.stderr.write(f"config error: {msg}\n")
        return EXIT_CONFIG


def main(argv=None) -> int:
    return run_subcommand(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
