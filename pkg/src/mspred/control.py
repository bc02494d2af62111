"""MPC gain synthesis from H-step predictors and closed-loop evaluation.

Given a predictor G = [G_y0 | G_U] (first d_y columns vs the input columns),
the planned input sequence minimizing ||G_y0 y + G_U U||^2 + ||U||^2 is
U = K_H y with K_H = -(G_U^T G_U + I)^-1 G_U^T G_y0; the receding-horizon law
applies only the first block row, u_t = K y_t, on the noisy observation.
Stable closed loops are scored by the exact per-stage stationary cost
E[y^T y + u^T u]; unstable ones by the clip bound through the soft-min
clipped cost -log(exp(-J) + exp(-M)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lti import Dataset, LtiSystem, simulate, solve_dlyap, spectral_radius
from .predictors import (
    FitReport,
    IntermediateFitConfig,
    Predictor,
    PredictorClass,
    fit_intermediate_many,
    fit_multi_step,
    fit_single_step,
)

__all__ = [
    "MpcGain",
    "ControlReport",
    "StabilizationCell",
    "StabilizationSweepResult",
    "mpc_gain",
    "closed_loop_eval",
    "clipped_cost",
    "stabilization_sweep",
]


@dataclass(frozen=True, eq=False)
class MpcGain:
    """Receding-horizon feedback synthesized from one predictor."""

    K_H: np.ndarray
    K: np.ndarray
    source_class: PredictorClass | None
    horizon: int

    def __post_init__(self):
        d_u = self.K.shape[0]
        if not np.array_equal(self.K, self.K_H[:d_u]):
            raise ValueError("K must be the first block row of K_H")


def mpc_gain(pred, d_y: int | None = None) -> MpcGain:
    """Minimize the predicted quadratic cost sum_k ||yhat_{t+k}||^2 + ||u_{t+k-1}||^2.

    Accepts a Predictor or a raw G matrix (then ``d_y`` is required to split
    the columns).  The regularized normal matrix G_U^T G_U + I is always
    positive definite, so the gain exists for every predictor.
    """
    if isinstance(pred, Predictor):
        g, horizon, d_y = pred.G, pred.horizon, pred.d_y
        klass = pred.klass
    else:
        g = np.asarray(pred, dtype=float)
        if d_y is None:
            raise ValueError("d_y is required when passing a raw predictor matrix")
        horizon = g.shape[0] // d_y
        klass = None
    d_u_total = g.shape[1] - d_y
    if d_u_total <= 0 or d_u_total % horizon:
        raise ValueError("predictor has no input channels to plan over")
    d_u = d_u_total // horizon
    g_y0 = g[:, :d_y]
    g_u = g[:, d_y:]
    k_h = -np.linalg.solve(g_u.T @ g_u + np.eye(d_u_total), g_u.T @ g_y0)
    return MpcGain(K_H=k_h, K=k_h[:d_u].copy(), source_class=klass, horizon=horizon)


@dataclass(frozen=True, eq=False)
class ControlReport:
    """Closed-loop stability and cost summary for one gain on one system."""

    closed_loop_spectral_radius: float
    avg_stage_cost: float
    clipped_cost: float
    clip_bound: float

    def __post_init__(self):
        if self.clipped_cost > self.clip_bound + 1e-12:
            raise ValueError("clipped cost exceeds the clip bound")


def clipped_cost(cost: float, clip_bound: float) -> float:
    """Overflow-safe -log(exp(-cost) + exp(-clip_bound)); equals clip_bound at cost = inf."""
    if not np.isfinite(cost):
        return float(clip_bound)
    low = min(cost, clip_bound)
    return float(low - np.log1p(np.exp(-abs(cost - clip_bound))))


def closed_loop_eval(system: LtiSystem, gain: MpcGain, clip_bound: float = 1e3) -> ControlReport:
    """Evaluate u_t = K y_t on the true system.

    The closed loop is x_{t+1} = (A + B K C) x_t + B_w w_t + B K D_v v_t; when
    stable, the per-stage stationary cost E[y^T y + u^T u] is computed exactly
    from the closed-loop covariance, otherwise it is infinite and the clipped
    cost equals the clip bound.
    """
    k = gain.K
    a_cl = system.A + system.B @ k @ system.C
    rho = spectral_radius(a_cl)
    if rho < 1.0:
        bkd = system.B @ k @ system.D_v
        noise_cov = system.B_w @ system.B_w.T + bkd @ bkd.T
        sigma = solve_dlyap(a_cl, noise_cov)
        sigma_y = system.C @ sigma @ system.C.T + system.D_v @ system.D_v.T
        cost = float(np.trace(sigma_y) + np.trace(k @ sigma_y @ k.T))
    else:
        cost = float("inf")
    return ControlReport(
        closed_loop_spectral_radius=rho,
        avg_stage_cost=cost,
        clipped_cost=clipped_cost(cost, clip_bound),
        clip_bound=float(clip_bound),
    )


@dataclass(frozen=True, eq=False)
class StabilizationCell:
    """One (predictor class, N) replica outcome inside a stabilization sweep."""

    klass: PredictorClass
    n: int
    replica: int
    seed: int
    spectral_radius: float
    clipped_cost: float
    failed: bool = False


@dataclass(frozen=True, eq=False)
class StabilizationSweepResult:
    cells: tuple[StabilizationCell, ...]
    clip_bound: float

    def mean_spectral_radius(self, klass: PredictorClass, n: int) -> float:
        vals = [c.spectral_radius for c in self.cells if c.klass == klass and c.n == n and not c.failed]
        return float(np.mean(vals))

    def mean_clipped_cost(self, klass: PredictorClass, n: int) -> float:
        vals = [c.clipped_cost for c in self.cells if c.klass == klass and c.n == n and not c.failed]
        return float(np.mean(vals))


def fit_all_classes(
    datasets: list[Dataset],
    horizon: int,
    config: IntermediateFitConfig | None = None,
) -> dict[PredictorClass, list[FitReport | Exception]]:
    """Fit the three predictor classes on each dataset of one equal-size batch.

    Intermediate fits run batched and are initialized from the matching
    replica's single-step fit.  Per-replica failures are returned in place.
    """
    ss_reports: list[FitReport | Exception] = []
    ms_reports: list[FitReport | Exception] = []
    inits = []
    for data in datasets:
        try:
            rep = fit_single_step(data, horizon=horizon)
            ss_reports.append(rep)
            inits.append((rep.predictor.G_y, rep.predictor.G_u))
        except Exception as exc:  # recorded, not fatal
            ss_reports.append(exc)
            inits.append((np.zeros((data.d_y, data.d_y)), np.zeros((data.d_y, data.d_u))))
        try:
            ms_reports.append(fit_multi_step(data, horizon))
        except Exception as exc:
            ms_reports.append(exc)
    inter_reports = fit_intermediate_many(datasets, horizon, inits=inits, config=config)
    for i, ss in enumerate(ss_reports):
        if isinstance(ss, Exception):
            inter_reports[i] = RuntimeError("no single-step initialization available")
    return {
        PredictorClass.SINGLE_STEP: ss_reports,
        PredictorClass.MULTI_STEP: ms_reports,
        PredictorClass.INTERMEDIATE: inter_reports,
    }


def stabilization_sweep(
    system: LtiSystem,
    horizon: int,
    dataset_sizes: list[int],
    replicas: int,
    master_seed: int,
    *,
    clip_bound: float = 1e3,
    fit_config: IntermediateFitConfig | None = None,
    seed_label: str = "stabilization",
) -> StabilizationSweepResult:
    """Fit, synthesize, and evaluate all three classes per (N, replica).

    Per-replica seeds come from a stable hash of (master_seed, seed_label, N,
    replica); failures are recorded per cell without aborting the sweep.
    """
    from .experiments import derive_seed  # local import to avoid a cycle

    cells: list[StabilizationCell] = []
    for n in dataset_sizes:
        seeds = [derive_seed(master_seed, seed_label, n, r) for r in range(replicas)]
        datasets = [simulate(system, n, s).dataset() for s in seeds]
        fits = fit_all_classes(datasets, horizon, config=fit_config)
        for klass, reports in fits.items():
            for r, rep in enumerate(reports):
                if isinstance(rep, Exception):
                    cells.append(StabilizationCell(
                        klass=klass, n=n, replica=r, seed=seeds[r],
                        spectral_radius=float("nan"), clipped_cost=float("nan"), failed=True,
                    ))
                    continue
                report = closed_loop_eval(system, mpc_gain(rep.predictor), clip_bound)
                cells.append(StabilizationCell(
                    klass=klass, n=n, replica=r, seed=seeds[r],
                    spectral_radius=report.closed_loop_spectral_radius,
                    clipped_cost=report.clipped_cost,
                ))
    return StabilizationSweepResult(cells=tuple(cells), clip_bound=float(clip_bound))
