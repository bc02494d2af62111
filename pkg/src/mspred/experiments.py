"""Config-driven Monte Carlo experiment runner with CSV persistence.

Every run is a pure function of its config: per-replica seeds are derived by
a stable hash of (master_seed, kind, N, replica), cells are batched by fixed
replica index, and records are sorted before writing, so output bytes do not
depend on the worker count.

CSV schema (fixed): kind, class, N, replica, seed, quantity, value,
theory_ref.  For the horizon-swept kinds (bias_vs_horizon, nonlinear) the N
column carries the horizon; for all other kinds it is the training-set size.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import control as ctl
from . import nonlinear as nl
from . import theory
from .lti import LtiSystem, kalman_innovations, make_system, simulate, build_rollout_wellspec
from .predictors import (
    IntermediateFitConfig,
    PredictorClass,
    population_loss_misspec,
    population_loss_wellspec,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentRecord",
    "EXPERIMENT_KINDS",
    "CSV_COLUMNS",
    "derive_seed",
    "parse_config",
    "format_config",
    "load_config",
    "run",
    "theory_report",
    "wellspec_system",
    "misspec_system",
    "control_misspec_system",
    "double_pole_misspec_system",
    "koopman_system",
]


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


EXPERIMENT_KINDS: dict[str, str] = {
    "wellspec_convergence": "N-scaled excess loss vs N on the fully observed two-state system, against the three rate asymptotes",
    "misspec_convergence": "loss vs N on the partially observed two-state system, against the three bias levels",
    "bias_vs_horizon": "single-step vs multi-step bias as a function of the horizon on the double-pole partially observed system",
    "lqr_wellspec": "clipped closed-loop cost vs N for MPC gains from each predictor class (fully observed)",
    "spectral_radius_misspec": "closed-loop spectral radius vs N for MPC gains fitted under partial observation",
    "nonlinear": "H-step evaluation loss of the three classes on the lifted nonlinear benchmark",
}

CSV_COLUMNS = ("kind", "class", "N", "replica", "seed", "quantity", "value", "theory_ref")

_HORIZON_SWEPT = ("bias_vs_horizon", "nonlinear")


def derive_seed(master_seed: int, *parts) -> int:
    """Stable 63-bit seed from the master seed and arbitrary index parts."""
    text = "|".join([str(int(master_seed))] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: kind, system parameters, sweep grid, seeds, solver knobs."""

    kind: str
    a: float = 0.9
    horizon: int = 5
    horizons: tuple[int, ...] = ()
    dataset_sizes: tuple[int, ...] = (100, 250, 500, 1000, 2000, 3000)
    replicas: int = 300
    master_seed: int = 0
    out: str = ""
    clip_bound: float = 1e3
    intermediate_step_size: float = 1e-2
    intermediate_max_iters: int = 10_000
    intermediate_grad_tol: float = 1e-8
    mu: float = 0.9
    lam: float = 0.9
    sigma_w: float = 0.1
    sigma_v: float = 0.4
    koopman_misspecified: bool = False
    n_train: int = 300
    rate_samples: int = 1_000_000
    rate_burn_in: int = 1_000
    rate_max_lag: int = 200
    rate_batches: int = 20
    rate_seed: int = 746_353
    bias_extra_starts: int = 4
    bias_seed: int = 271_828

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; see list-experiments")
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        sizes = tuple(int(n) for n in self.dataset_sizes)
        if any(b <= a for a, b in zip(sizes, sizes[1:])) or not sizes:
            raise ConfigError("dataset_sizes must be nonempty and strictly increasing")
        object.__setattr__(self, "dataset_sizes", sizes)
        horizons = tuple(int(h) for h in self.horizons)
        if not horizons:
            if self.kind == "bias_vs_horizon":
                horizons = tuple(range(2, 16))
            elif self.kind == "nonlinear":
                horizons = (5, 15, 25)
        if self.kind in _HORIZON_SWEPT and any(h < 1 for h in horizons):
            raise ConfigError("horizons must be positive")
        object.__setattr__(self, "horizons", horizons)

    @property
    def out_path(self) -> str:
        return self.out or f"{self.kind}.csv"

    def fit_config(self) -> IntermediateFitConfig:
        return IntermediateFitConfig(
            step_size=self.intermediate_step_size,
            max_iters=self.intermediate_max_iters,
            grad_tol=self.intermediate_grad_tol,
        )

    def rate_config(self) -> theory.RateMcConfig:
        return theory.RateMcConfig(
            samples=self.rate_samples,
            burn_in=self.rate_burn_in,
            max_lag=self.rate_max_lag,
            batches=self.rate_batches,
            seed=self.rate_seed,
        )

    def bias_config(self) -> theory.BiasOptConfig:
        return theory.BiasOptConfig(extra_starts=self.bias_extra_starts, seed=self.bias_seed)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(name: str, text: str):
    kind = _FIELD_TYPES[name]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() in ("true", "yes", "1"):
                return True
            if text.lower() in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if kind == "str":
            return text
        if kind.startswith("tuple"):
            if not text:
                return ()
            return tuple(int(part.strip()) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {text!r}") from exc
    raise ConfigError(f"unsupported config field type for {name!r}")


def parse_config(text: str) -> ExperimentConfig:
    """Parse the key = value config format; unknown keys are rejected."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(key, val)
    if "kind" not in values:
        raise ConfigError("config must set 'kind'")
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def format_config(config: ExperimentConfig) -> str:
    """Serialize a config so that parse_config(format_config(c)) == c."""
    lines = []
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            text = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


# ---------------------------------------------------------------------------
# Records.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentRecord:
    kind: str
    klass: str
    n: int
    replica: int
    seed: int
    quantity: str
    value: float
    theory_ref: float | None = None

    def csv_row(self) -> str:
        ref = "" if self.theory_ref is None else repr(float(self.theory_ref))
        return ",".join([
            self.kind, self.klass, str(self.n), str(self.replica), str(self.seed),
            self.quantity, repr(float(self.value)), ref,
        ])


def _sort_key(rec: ExperimentRecord):
    return (rec.klass, rec.n, rec.replica, rec.quantity)


def write_records(records: list[ExperimentRecord], path) -> None:
    buf = io.StringIO()
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for rec in sorted(records, key=_sort_key):
        buf.write(rec.csv_row() + "\n")
    Path(path).write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# System families used by the experiments.
# ---------------------------------------------------------------------------


def wellspec_system(a: float) -> LtiSystem:
    """Fully observed two-state system: A = [[a, 1], [0, 0.75]], B = [0, 1]^T, unit noise."""
    return make_system([[a, 1.0], [0.0, 0.75]], B=[[0.0], [1.0]])


def misspec_system(a: float) -> LtiSystem:
    """Partially observed, input-free variant: C = [1, 0], unit sensor noise."""
    return make_system([[a, 1.0], [0.0, 0.75]], C=[[1.0, 0.0]], D_v=[[1.0]])


def control_misspec_system(a: float) -> LtiSystem:
    """Partially observed variant with the actuation channel restored for control runs."""
    return make_system([[a, 1.0], [0.0, 0.75]], B=[[0.0], [1.0]], C=[[1.0, 0.0]], D_v=[[1.0]])


def double_pole_misspec_system(a: float) -> LtiSystem:
    """Partially observed system with a double pole at ``a``: A = [[a, 1], [0, a]]."""
    return make_system([[a, 1.0], [0.0, a]], C=[[1.0, 0.0]], D_v=[[1.0]])


def koopman_system(config: ExperimentConfig) -> nl.KoopmanSystem:
    if config.koopman_misspecified:
        c = np.array([[0.0, 1.0, 0.0, 0.0]])
        sigma_v = config.sigma_v
    else:
        c = np.eye(nl.LIFTED_DIM)
        sigma_v = 0.0
    return nl.KoopmanSystem(mu=config.mu, lam=config.lam, sigma_w=config.sigma_w, C=c, sigma_v=sigma_v)


# ---------------------------------------------------------------------------
# Kind runners.  Each cell is one (kind, N) or (kind, horizon) batch and is a
# pure function of (config, theory refs, cell key).
# ---------------------------------------------------------------------------


def _cell_keys(config: ExperimentConfig) -> list[int]:
    if config.kind == "bias_vs_horizon":
        return [0]
    if config.kind == "nonlinear":
        return list(config.horizons)
    return list(config.dataset_sizes)


def _failure_record(config, klass, n, replica, seed) -> ExperimentRecord:
    return ExperimentRecord(config.kind, klass.value, n, replica, seed, "fit_failure", 1.0)


def _run_convergence_cell(config: ExperimentConfig, refs: dict, n: int) -> list[ExperimentRecord]:
    wellspec = config.kind == "wellspec_convergence"
    system = wellspec_system(config.a) if wellspec else misspec_system(config.a)
    innov = None if wellspec else kalman_innovations(system)
    if wellspec:
        irreducible = float(np.sum(build_rollout_wellspec(system, config.horizon).Gamma_w ** 2))

    seeds = [derive_seed(config.master_seed, config.kind, n, r) for r in range(config.replicas)]
    datasets = [simulate(system, n, s).dataset() for s in seeds]
    fits = ctl.fit_all_classes(datasets, config.horizon, config=config.fit_config())

    records = []
    for klass, reports in fits.items():
        for r, rep in enumerate(reports):
            if isinstance(rep, Exception):
                records.append(_failure_record(config, klass, n, r, seeds[r]))
                continue
            if wellspec:
                loss = population_loss_wellspec(rep.predictor, system)
                quantity, value = "scaled_excess_loss", n * (loss - irreducible)
            else:
                quantity, value = "loss", population_loss_misspec(rep.predictor, innov, system)
            records.append(ExperimentRecord(
                config.kind, klass.value, n, r, seeds[r], quantity, value, refs.get(klass.value),
            ))
    return records


def _run_bias_vs_horizon(config: ExperimentConfig, refs: dict, _key: int) -> list[ExperimentRecord]:
    system = double_pole_misspec_system(config.a)
    innov = kalman_innovations(system)
    records = []
    for h in config.horizons:
        records.append(ExperimentRecord(
            config.kind, PredictorClass.SINGLE_STEP.value, h, 0, 0, "bias",
            theory.ss_bias(innov, system, h),
        ))
        records.append(ExperimentRecord(
            config.kind, PredictorClass.MULTI_STEP.value, h, 0, 0, "bias",
            theory.ms_bias(innov, system, h),
        ))
    return records


def _run_lqr_cell(config: ExperimentConfig, refs: dict, n: int) -> list[ExperimentRecord]:
    system = wellspec_system(config.a)
    g_star = build_rollout_wellspec(system, config.horizon).G_star
    exact = ctl.closed_loop_eval(system, ctl.mpc_gain(g_star, d_y=system.d_y), config.clip_bound)

    seeds = [derive_seed(config.master_seed, config.kind, n, r) for r in range(config.replicas)]
    datasets = [simulate(system, n, s).dataset() for s in seeds]
    fits = ctl.fit_all_classes(datasets, config.horizon, config=config.fit_config())

    records = [ExperimentRecord(config.kind, "exact", n, 0, 0, "clipped_cost", exact.clipped_cost)]
    for klass, reports in fits.items():
        for r, rep in enumerate(reports):
            if isinstance(rep, Exception):
                records.append(_failure_record(config, klass, n, r, seeds[r]))
                continue
            report = ctl.closed_loop_eval(system, ctl.mpc_gain(rep.predictor), config.clip_bound)
            records.append(ExperimentRecord(
                config.kind, klass.value, n, r, seeds[r], "clipped_cost", report.clipped_cost,
            ))
            records.append(ExperimentRecord(
                config.kind, klass.value, n, r, seeds[r], "cost_gap",
                abs(report.clipped_cost - exact.clipped_cost),
            ))
    return records


def _run_spectral_cell(config: ExperimentConfig, refs: dict, n: int) -> list[ExperimentRecord]:
    system = control_misspec_system(config.a)
    sweep = ctl.stabilization_sweep(
        system, config.horizon, [n], config.replicas, config.master_seed,
        clip_bound=config.clip_bound, fit_config=config.fit_config(), seed_label=config.kind,
    )
    records = []
    for cell in sweep.cells:
        if cell.failed:
            records.append(_failure_record(config, cell.klass, cell.n, cell.replica, cell.seed))
            continue
        records.append(ExperimentRecord(
            config.kind, cell.klass.value, cell.n, cell.replica, cell.seed,
            "spectral_radius", cell.spectral_radius,
        ))
        records.append(ExperimentRecord(
            config.kind, cell.klass.value, cell.n, cell.replica, cell.seed,
            "clipped_cost", cell.clipped_cost,
        ))
    return records


def _run_nonlinear_cell(config: ExperimentConfig, refs: dict, horizon: int) -> list[ExperimentRecord]:
    system = koopman_system(config)
    cells = nl.nonlinear_comparison(
        system, [horizon], config.n_train, config.replicas, config.master_seed,
        fit_config=config.fit_config(), seed_label=config.kind,
    )
    records = []
    for cell in cells:
        if cell.failed:
            records.append(_failure_record(config, cell.klass, cell.horizon, cell.replica, cell.seed))
            continue
        records.append(ExperimentRecord(
            config.kind, cell.klass.value, cell.horizon, cell.replica, cell.seed, "loss", cell.loss,
        ))
    return records


_CELL_RUNNERS = {
    "wellspec_convergence": _run_convergence_cell,
    "misspec_convergence": _run_convergence_cell,
    "bias_vs_horizon": _run_bias_vs_horizon,
    "lqr_wellspec": _run_lqr_cell,
    "spectral_radius_misspec": _run_spectral_cell,
    "nonlinear": _run_nonlinear_cell,
}


def _theory_refs(config: ExperimentConfig) -> dict:
    """Per-class theoretical reference values for the convergence kinds."""
    if config.kind == "wellspec_convergence":
        system = wellspec_system(config.a)
        inter, _ = theory.intermediate_rate(system, config.horizon, config.rate_config())
        return {
            PredictorClass.SINGLE_STEP.value: theory.ss_rate(system, config.horizon),
            PredictorClass.MULTI_STEP.value: theory.ms_rate(system, config.horizon),
            PredictorClass.INTERMEDIATE.value: inter,
        }
    if config.kind == "misspec_convergence":
        system = misspec_system(config.a)
        innov = kalman_innovations(system)
        return {
            PredictorClass.SINGLE_STEP.value: theory.ss_bias(innov, system, config.horizon),
            PredictorClass.MULTI_STEP.value: theory.ms_bias(innov, system, config.horizon),
            PredictorClass.INTERMEDIATE.value: theory.intermediate_bias(
                innov, system, config.horizon, config.bias_config()
            ),
        }
    return {}


def _execute_cell(payload):
    config_text, refs, key = payload
    config = parse_config(config_text)
    return _CELL_RUNNERS[config.kind](config, refs, key)


def run(config: ExperimentConfig, workers: int = 1, out=None) -> list[ExperimentRecord]:
    """Run the experiment, write its CSV, and print a per-(class, N) summary."""
    refs = _theory_refs(config)
    keys = _cell_keys(config)
    payloads = [(format_config(config), refs, key) for key in keys]

    if workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_execute_cell, payloads))
    else:
        chunks = [_execute_cell(p) for p in payloads]
    records = [rec for chunk in chunks for rec in chunk]
    records.sort(key=_sort_key)

    out_path = Path(out) if out is not None else Path(config.out_path)
    write_records(records, out_path)
    _print_summary(config, records)
    print(f"wrote {len(records)} records to {out_path}")
    return records


def _print_summary(config: ExperimentConfig, records: list[ExperimentRecord]) -> None:
    primary = {
        "wellspec_convergence": "scaled_excess_loss",
        "misspec_convergence": "loss",
        "bias_vs_horizon": "bias",
        "lqr_wellspec": "cost_gap",
        "spectral_radius_misspec": "spectral_radius",
        "nonlinear": "loss",
    }[config.kind]
    x_label = "H" if config.kind in _HORIZON_SWEPT else "N"
    print(f"{config.kind}: mean {primary} per (class, {x_label})")
    groups: dict[tuple[str, int], list[float]] = {}
    refs: dict[tuple[str, int], float] = {}
    failures = 0
    for rec in records:
        if rec.quantity == "fit_failure":
            failures += 1
            continue
        if rec.quantity != primary:
            continue
        groups.setdefault((rec.klass, rec.n), []).append(rec.value)
        if rec.theory_ref is not None:
            refs[(rec.klass, rec.n)] = rec.theory_ref
    for (klass, n), vals in sorted(groups.items()):
        ref = refs.get((klass, n))
        ref_text = f"  theory {ref:.6g}" if ref is not None else ""
        print(f"  {klass:>12s} {x_label}={n:<6d} mean {np.mean(vals):.6g}{ref_text}")
    if failures:
        print(f"  ({failures} replica fit failures recorded)")


# ---------------------------------------------------------------------------
# Theory report.
# ---------------------------------------------------------------------------

_WELLSPEC_KINDS = ("wellspec_convergence", "lqr_wellspec")
_MISSPEC_KINDS = ("misspec_convergence", "bias_vs_horizon", "spectral_radius_misspec")


def theory_report(config: ExperimentConfig, out=None) -> list[ExperimentRecord]:
    """Closed-form rate or bias table for the config's system, plus ordering flags.

    Well-specified kinds report the three rates (intermediate with stderr);
    misspecified kinds report the three biases and the one-step predictor
    limit's spectral radius.  The control variant reports the theory of its
    input-free counterpart.
    """
    kind, h = config.kind, config.horizon
    records: list[ExperimentRecord] = []
    if kind in _WELLSPEC_KINDS:
        system = wellspec_system(config.a)
        report = theory.rate_report(system, h, config.rate_config())
        rows = [
            (PredictorClass.SINGLE_STEP.value, "rate", report.ss_rate),
            (PredictorClass.INTERMEDIATE.value, "rate", report.intermediate_rate),
            (PredictorClass.INTERMEDIATE.value, "rate_stderr", report.intermediate_rate_stderr),
            (PredictorClass.MULTI_STEP.value, "rate", report.ms_rate),
        ]
        print(f"{kind} (a={config.a}, H={h}): rates")
        print(f"  single_step   {report.ss_rate:.6g}")
        print(f"  intermediate  {report.intermediate_rate:.6g} +- {report.intermediate_rate_stderr:.3g}")
        print(f"  multi_step    {report.ms_rate:.6g}")
        print(f"  ordering ss <= intermediate <= ms within 3 stderr: {report.ordering_within_3se}")
    elif kind in _MISSPEC_KINDS:
        if kind == "bias_vs_horizon":
            system = double_pole_misspec_system(config.a)
        else:
            system = misspec_system(config.a)
        innov = kalman_innovations(system)
        report = theory.bias_report(innov, system, h, config.bias_config())
        radius = theory.predictor_spectral_radius(innov, system)
        rows = [
            (PredictorClass.MULTI_STEP.value, "bias", report.ms_bias),
            (PredictorClass.INTERMEDIATE.value, "bias", report.intermediate_bias),
            (PredictorClass.SINGLE_STEP.value, "bias", report.ss_bias),
            (PredictorClass.SINGLE_STEP.value, "predictor_spectral_radius", radius),
        ]
        print(f"{kind} (a={config.a}, H={h}): biases")
        print(f"  multi_step    {report.ms_bias:.6g}")
        print(f"  intermediate  {report.intermediate_bias:.6g}")
        print(f"  single_step   {report.ss_bias:.6g}")
        print(f"  predictor spectral radius {radius:.6g} (system spectral radius "
              f"{max(abs(np.linalg.eigvals(system.A))):.6g})")
        print("  ordering ms <= intermediate <= ss: True (enforced)")
    else:
        raise ConfigError(f"no closed-form theory for kind {kind!r}")

    for klass, quantity, value in rows:
        records.append(ExperimentRecord(kind, klass, h, 0, 0, quantity, float(value)))
    if out is not None:
        write_records(records, out)
        print(f"wrote {len(records)} records to {out}")
    return records
