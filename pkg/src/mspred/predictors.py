"""Fitting and evaluating the three predictor classes.

A predictor maps the regressor z_t = [y_t; u_t; ...; u_{t+H-1}] to the next H
observations through a matrix G of shape (H*d_y, d_y + H*d_u):

* single-step: least squares on one-step pairs, rolled out H steps;
* multi-step: unconstrained least squares on H-step windows;
* intermediate: single-step parameters fitted on the H-step window loss.

Empirical losses are means over windows (not sums) so values are comparable
across training-set sizes; the minimizers are unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .lti import (
    Dataset,
    InnovationsForm,
    LtiSystem,
    build_rollout_misspec,
    build_rollout_wellspec,
    stationary_regressor_cov,
)

__all__ = [
    "PredictorClass",
    "Predictor",
    "FitReport",
    "SingularRegressorError",
    "DivergenceError",
    "IntermediateFitConfig",
    "rollout_composition",
    "fit_single_step",
    "fit_multi_step",
    "fit_intermediate",
    "fit_intermediate_many",
    "empirical_loss",
    "population_loss_wellspec",
    "population_loss_misspec",
    "intermediate_loss_and_grad",
]

# Relative singular-value cutoff below which a regressor direction is treated
# as structurally absent (minimum-norm solution ignores it); directions above
# the cutoff but conditioned worse than GRAM_CONDITION_LIMIT raise.
STRUCTURAL_RCOND = 1e-12
GRAM_CONDITION_LIMIT = 1e12


class SingularRegressorError(np.linalg.LinAlgError):
    """Least-squares regressors are numerically rank deficient."""

    def __init__(self, condition: float):
        super().__init__(
            f"regressor Gram matrix condition {condition:.3e} exceeds {GRAM_CONDITION_LIMIT:.0e}"
        )
        self.condition = condition


class DivergenceError(RuntimeError):
    """The intermediate fit's loss blew up past the divergence guard."""


class PredictorClass(str, Enum):
    SINGLE_STEP = "single_step"
    MULTI_STEP = "multi_step"
    INTERMEDIATE = "intermediate"


@dataclass(frozen=True, eq=False)
class Predictor:
    """An H-step linear predictor G, tagged with the class that produced it.

    For SINGLE_STEP and INTERMEDIATE predictors the generating pair
    (G_y, G_u) is stored and ``G`` is always the rollout composition of that
    pair, rebuilt by :func:`rollout_composition`; re-deriving it reproduces
    the stored matrix bit for bit.
    """

    G: np.ndarray
    horizon: int
    klass: PredictorClass
    G_y: np.ndarray | None = None
    G_u: np.ndarray | None = None

    def __post_init__(self):
        if self.klass in (PredictorClass.SINGLE_STEP, PredictorClass.INTERMEDIATE):
            if self.G_y is None or self.G_u is None:
                raise ValueError(f"{self.klass.value} predictors carry their (G_y, G_u) pair")
            rebuilt = _rollout_matrix(self.G_y, self.G_u, self.horizon)
            if rebuilt.shape != self.G.shape or not np.array_equal(rebuilt, self.G):
                raise ValueError("stored G is not the rollout composition of (G_y, G_u)")

    @property
    def d_y(self) -> int:
        return self.G.shape[0] // self.horizon

    @property
    def d_u(self) -> int:
        return (self.G.shape[1] - self.d_y) // self.horizon if self.horizon else 0

    @classmethod
    def from_components(cls, g_y, g_u, horizon: int, klass: PredictorClass) -> "Predictor":
        g_y = np.asarray(g_y, dtype=float)
        g_u = np.asarray(g_u, dtype=float)
        return cls(G=_rollout_matrix(g_y, g_u, horizon), horizon=horizon, klass=klass,
                   G_y=g_y, G_u=g_u)


@dataclass(frozen=True, eq=False)
class FitReport:
    """Outcome of one fit: the predictor plus solver diagnostics."""

    predictor: Predictor
    n_windows: int
    final_loss: float
    gram_condition: float | None = None
    iterations: int = 0
    final_grad_norm: float = 0.0
    converged: bool = True

    def __post_init__(self):
        if not np.isfinite(self.final_loss):
            raise ValueError("fit produced a non-finite loss")


def _rollout_matrix(g_y: np.ndarray, g_u: np.ndarray, horizon: int) -> np.ndarray:
    """Block matrix of the H-step rollout of a one-step model (G_y, G_u).

    Block row k is [G_y^k, G_y^{k-1} G_u, ..., G_u, 0, ..., 0].
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    d_y = g_y.shape[0]
    d_u = g_u.shape[1]
    powers = [np.eye(d_y)]
    for _ in range(horizon):
        powers.append(g_y @ powers[-1])
    g = np.zeros((horizon * d_y, d_y + horizon * d_u))
    for k in range(1, horizon + 1):
        rows = slice((k - 1) * d_y, k * d_y)
        g[rows, :d_y] = powers[k]
        for j in range(1, k + 1):
            cols = slice(d_y + (j - 1) * d_u, d_y + j * d_u)
            g[rows, cols] = powers[k - j] @ g_u
    return g


def rollout_composition(g_y, g_u, horizon: int) -> Predictor:
    """Compose a one-step model into an H-step predictor (class SINGLE_STEP)."""
    return Predictor.from_components(g_y, g_u, horizon, PredictorClass.SINGLE_STEP)


def _solve_least_squares(regressors: np.ndarray, targets: np.ndarray):
    """Minimum-norm least squares with a conditioning guard.

    Returns (coefficients, gram_condition).  The condition number is measured
    on the numerically nonzero part of the spectrum: exact rank deficiencies
    (singular values below STRUCTURAL_RCOND relative) are handled by the
    minimum-norm convention, while a badly conditioned nonzero spectrum raises
    SingularRegressorError.
    """
    coef, _, _, svals = np.linalg.lstsq(regressors, targets, rcond=STRUCTURAL_RCOND)
    if svals.size == 0 or svals[0] <= 0.0:
        raise SingularRegressorError(np.inf)
    effective = svals[svals > svals[0] * STRUCTURAL_RCOND]
    gram_condition = float((svals[0] / effective[-1]) ** 2)
    if gram_condition >= GRAM_CONDITION_LIMIT:
        raise SingularRegressorError(gram_condition)
    return coef, gram_condition


def _window_arrays(data: Dataset, horizon: int):
    """Regressors Z (T, d_y + H*d_u) and stacked targets Y (T, H*d_y), T = N - H."""
    n, h = data.n, horizon
    if h < 1:
        raise ValueError("horizon must be >= 1")
    if n < h + 1:
        raise ValueError(f"need at least {h + 1} samples for horizon {h}, got {n}")
    t = n - h
    y, u = data.observations, data.inputs
    z = np.concatenate([y[:t]] + [u[k : t + k] for k in range(h)], axis=1)
    targets = np.concatenate([y[k + 1 : t + k + 1] for k in range(h)], axis=1)
    return z, targets


def fit_single_step(data: Dataset, horizon: int = 1) -> FitReport:
    """Least squares on one-step pairs (y_t, u_t) -> y_{t+1}, rolled out to ``horizon``."""
    if data.n < 2:
        raise ValueError("single-step fit needs at least 2 samples")
    d_y = data.d_y
    regressors = np.concatenate([data.observations[:-1], data.inputs[:-1]], axis=1)
    targets = data.observations[1:]
    coef, cond = _solve_least_squares(regressors, targets)
    g_y = coef[:d_y].T.copy()
    g_u = coef[d_y:].T.copy()
    pred = Predictor.from_components(g_y, g_u, horizon, PredictorClass.SINGLE_STEP)
    loss = empirical_loss(pred, data)
    return FitReport(predictor=pred, n_windows=data.n - 1, final_loss=loss, gram_condition=cond)


def fit_multi_step(data: Dataset, horizon: int) -> FitReport:
    """Unconstrained least squares from z_t to the stacked H-step targets.

    Every output row shares the same regressors, so one factorization solves
    all H*d_y rows at once.
    """
    z, targets = _window_arrays(data, horizon)
    coef, cond = _solve_least_squares(z, targets)
    g = coef.T.copy()
    pred = Predictor(G=g, horizon=horizon, klass=PredictorClass.MULTI_STEP)
    resid = targets - z @ coef
    loss = float(np.mean(np.einsum("ij,ij->i", resid, resid)))
    return FitReport(predictor=pred, n_windows=z.shape[0], final_loss=loss, gram_condition=cond)


def empirical_loss(pred, data: Dataset) -> float:
    """Mean over windows t = 1..N-H of the squared H-step residual norm."""
    g, horizon = _as_matrix(pred, data.d_y, data.d_u)
    z, targets = _window_arrays(data, horizon)
    resid = targets - z @ g.T
    return float(np.mean(np.einsum("ij,ij->i", resid, resid)))


def _as_matrix(pred, d_y: int, d_u: int):
    if isinstance(pred, Predictor):
        return pred.G, pred.horizon
    g = np.asarray(pred, dtype=float)
    if g.shape[0] % d_y:
        raise ValueError("predictor rows are not a multiple of d_y")
    horizon = g.shape[0] // d_y
    if g.shape[1] != d_y + horizon * d_u:
        raise ValueError("predictor column count does not match d_y + H*d_u")
    return g, horizon


def population_loss_wellspec(pred, system: LtiSystem, horizon: int | None = None) -> float:
    """Exact stationary H-step loss of a predictor on a fully observed system.

    Equals ||(G - G*) Sigma_z^{1/2}||_F^2 + ||Gamma_w||_F^2, evaluated as a
    trace so no matrix square root is needed.
    """
    g, h = _as_matrix(pred, system.d_y, system.d_u)
    if horizon is not None and horizon != h:
        raise ValueError(f"predictor horizon {h} does not match requested {horizon}")
    roll = build_rollout_wellspec(system, h)
    sigma_z = stationary_regressor_cov(system, h)
    diff = g - roll.G_star
    return float(np.trace(diff @ sigma_z @ diff.T) + np.sum(roll.Gamma_w**2))


def population_loss_misspec(
    pred, innov: InnovationsForm, system: LtiSystem, horizon: int | None = None
) -> float:
    """Exact stationary H-step loss on a partially observed, input-free system.

    Equals ||(Phi + (G* - G) C) Sigma_xhat^{1/2}||_F^2
         + ||(G* - G) D_e||_F^2 + ||Gamma_e||_F^2.
    """
    g, h = _as_matrix(pred, system.d_y, system.d_u)
    if horizon is not None and horizon != h:
        raise ValueError(f"predictor horizon {h} does not match requested {horizon}")
    roll = build_rollout_misspec(innov, system, h)
    diff = roll.G_star - g
    e = roll.Phi + diff @ system.C
    innov_cov = innov.D_e @ innov.D_e
    return float(
        np.trace(e @ innov.Sigma_xhat @ e.T)
        + np.trace(diff @ innov_cov @ diff.T)
        + np.sum(roll.Gamma_e**2)
    )


# ---------------------------------------------------------------------------
# Intermediate fit: Adam on the H-step rollout loss, then a monotone polish.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntermediateFitConfig:
    """Optimizer settings for the intermediate (rollout-structured) fit.

    Adam runs with ``step_size`` from the supplied initialization, tracking
    the best iterate, until the gradient infinity norm reaches ``grad_tol``,
    ``max_iters`` updates have been applied, or the best loss has not improved
    by a relative ``plateau_rtol`` over ``plateau_window`` iterations.  A
    gradient-descent polish with Armijo backtracking then runs from the best
    iterate; it is monotone, so the final loss never exceeds the initial one.
    """

    step_size: float = 1e-2
    max_iters: int = 50_000
    grad_tol: float = 1e-8
    plateau_window: int = 200
    plateau_rtol: float = 1e-12
    polish_max_iters: int = 1_000
    divergence_factor: float = 1e6

    def __post_init__(self):
        if self.step_size <= 0 or self.max_iters < 0 or self.grad_tol < 0:
            raise ValueError("invalid intermediate fit configuration")


_ACTIVE, _CONVERGED, _PLATEAU, _DIVERGED = 0, 1, 2, 3


class _BatchProblem:
    """H-step rollout loss over a batch of equally sized datasets.

    The loss is a quadratic form in the window data, so each dataset is
    reduced once to second moments of the stacked window vector
    zeta_t = [y_t; u_{t:t+H-1}; y_{t+1:t+H}]:

        loss(G) = tr(Ghat S_zz Ghat^T) - 2 tr(Ghat S_zy) + tr(S_yy)

    with Ghat the rollout composition of (G_y, G_u).  Iteration cost is then
    independent of the number of windows.  Gradients are exact, via reverse
    accumulation through the block-row recursion of Ghat.
    """

    def __init__(self, datasets: list[Dataset], horizon: int):
        if not datasets:
            raise ValueError("empty batch")
        n = datasets[0].n
        if any(d.n != n for d in datasets):
            raise ValueError("batched intermediate fits require equal-length datasets")
        self.horizon = horizon
        self.d_y = datasets[0].d_y
        self.d_u = datasets[0].d_u
        self.t = n - horizon
        self.p = self.d_y + horizon * self.d_u

        s_zz, s_zy, s_yy_tr = [], [], []
        for data in datasets:
            z, targets = _window_arrays(data, horizon)
            s_zz.append(z.T @ z / self.t)
            s_zy.append(z.T @ targets / self.t)
            s_yy_tr.append(np.einsum("ij,ij->", targets, targets) / self.t)
        self.s_zz = np.stack(s_zz)
        self.s_yz = np.swapaxes(np.stack(s_zy), 1, 2)
        self.s_yy_tr = np.asarray(s_yy_tr)

    def _rollout_rows(self, g_y: np.ndarray, g_u: np.ndarray) -> list[np.ndarray]:
        """Block rows R_0..R_H of [I; Ghat] via R_k = G_y R_{k-1} + G_u at slot k."""
        r_batch, d_y, d_u, p = g_y.shape[0], self.d_y, self.d_u, self.p
        base = np.zeros((r_batch, d_y, p))
        base[:, :, :d_y] = np.eye(d_y)
        rows = [base]
        for k in range(1, self.horizon + 1):
            row = g_y @ rows[-1]
            if d_u:
                row[:, :, d_y + (k - 1) * d_u : d_y + k * d_u] += g_u
            rows.append(row)
        return rows

    def _quadratic_loss(self, ghat: np.ndarray) -> np.ndarray:
        gs = ghat @ self.s_zz
        return (
            np.einsum("rqp,rqp->r", gs, ghat)
            - 2.0 * np.einsum("rqp,rqp->r", ghat, self.s_yz)
            + self.s_yy_tr
        )

    def loss(self, g_y: np.ndarray, g_u: np.ndarray) -> np.ndarray:
        rows = self._rollout_rows(g_y, g_u)
        ghat = np.concatenate(rows[1:], axis=1)
        return self._quadratic_loss(ghat)

    def loss_and_grad(self, g_y: np.ndarray, g_u: np.ndarray):
        h, d_y, d_u = self.horizon, self.d_y, self.d_u
        rows = self._rollout_rows(g_y, g_u)
        ghat = np.concatenate(rows[1:], axis=1)
        loss = self._quadratic_loss(ghat)

        d_ghat = 2.0 * (ghat @ self.s_zz - self.s_yz)
        g_y_t = np.swapaxes(g_y, 1, 2)
        d_gy = np.zeros_like(g_y)
        d_gu = np.zeros_like(g_u)
        rbar = np.zeros((g_y.shape[0], d_y, self.p))
        for k in range(h, 0, -1):
            w_k = d_ghat[:, (k - 1) * d_y : k * d_y, :]
            rbar = w_k + (g_y_t @ rbar if k < h else 0.0)
            d_gy += rbar @ np.swapaxes(rows[k - 1], 1, 2)
            if d_u:
                d_gu += rbar[:, :, d_y + (k - 1) * d_u : d_y + k * d_u]
        return loss, d_gy, d_gu


def intermediate_loss_and_grad(g_y, g_u, data: Dataset, horizon: int):
    """Mean H-step rollout loss of (G_y, G_u) on ``data`` and its exact gradient."""
    problem = _BatchProblem([data], horizon)
    g_y = np.asarray(g_y, dtype=float)[None]
    g_u = np.asarray(g_u, dtype=float).reshape(1, problem.d_y, problem.d_u)
    loss, d_gy, d_gu = problem.loss_and_grad(g_y, g_u)
    return float(loss[0]), d_gy[0], d_gu[0]


def _grad_inf_norm(d_gy: np.ndarray, d_gu: np.ndarray) -> np.ndarray:
    gy_norm = np.max(np.abs(d_gy), axis=(1, 2)) if d_gy[0].size else np.zeros(d_gy.shape[0])
    if d_gu[0].size:
        gy_norm = np.maximum(gy_norm, np.max(np.abs(d_gu), axis=(1, 2)))
    return gy_norm


def _adam_stage(problem: _BatchProblem, g_y, g_u, cfg: IntermediateFitConfig):
    """Adam with best-iterate tracking; returns per-replica best params and status."""
    r = g_y.shape[0]
    status = np.full(r, _ACTIVE, dtype=int)
    iters = np.zeros(r, dtype=int)
    m_y, v_y = np.zeros_like(g_y), np.zeros_like(g_y)
    m_u, v_u = np.zeros_like(g_u), np.zeros_like(g_u)
    b1, b2, eps = 0.9, 0.999, 1e-8

    loss, d_gy, d_gu = problem.loss_and_grad(g_y, g_u)
    initial_loss = loss.copy()
    best_loss = loss.copy()
    best_gy, best_gu = g_y.copy(), g_u.copy()
    since_improved = np.zeros(r, dtype=int)

    grad_norm = _grad_inf_norm(d_gy, d_gu)
    status[(grad_norm <= cfg.grad_tol) & (status == _ACTIVE)] = _CONVERGED

    step = 0
    while step < cfg.max_iters and np.any(status == _ACTIVE):
        step += 1
        active = status == _ACTIVE
        m_y = b1 * m_y + (1 - b1) * d_gy
        v_y = b2 * v_y + (1 - b2) * d_gy * d_gy
        m_u = b1 * m_u + (1 - b1) * d_gu
        v_u = b2 * v_u + (1 - b2) * d_gu * d_gu
        corr1, corr2 = 1 - b1**step, 1 - b2**step
        upd_y = cfg.step_size * (m_y / corr1) / (np.sqrt(v_y / corr2) + eps)
        upd_u = cfg.step_size * (m_u / corr1) / (np.sqrt(v_u / corr2) + eps)
        mask = active[:, None, None]
        g_y = np.where(mask, g_y - upd_y, g_y)
        g_u = np.where(mask, g_u - upd_u, g_u) if g_u.size else g_u
        iters[active] += 1

        loss, d_gy, d_gu = problem.loss_and_grad(g_y, g_u)
        improved = active & (loss < best_loss * (1 - cfg.plateau_rtol))
        better = active & (loss < best_loss)
        best_loss = np.where(better, loss, best_loss)
        bmask = better[:, None, None]
        best_gy = np.where(bmask, g_y, best_gy)
        best_gu = np.where(bmask, g_u, best_gu) if g_u.size else best_gu
        since_improved = np.where(improved, 0, since_improved + 1)

        grad_norm = _grad_inf_norm(d_gy, d_gu)
        bad = active & (~np.isfinite(loss) | (loss > cfg.divergence_factor * initial_loss))
        status[bad] = _DIVERGED
        status[active & ~bad & (grad_norm <= cfg.grad_tol)] = _CONVERGED
        status[(status == _ACTIVE) & (since_improved >= cfg.plateau_window)] = _PLATEAU

    return best_gy, best_gu, best_loss, status, iters


def _polish_stage(problem: _BatchProblem, g_y, g_u, cfg: IntermediateFitConfig, skip: np.ndarray):
    """Armijo-backtracking gradient descent; monotone per replica."""
    r = g_y.shape[0]
    alpha = np.ones(r)
    iters = np.zeros(r, dtype=int)
    loss, d_gy, d_gu = problem.loss_and_grad(g_y, g_u)
    grad_norm = _grad_inf_norm(d_gy, d_gu)
    active = ~skip & (grad_norm > cfg.grad_tol)

    for _ in range(cfg.polish_max_iters):
        if not np.any(active):
            break
        sq = np.einsum("rij,rij->r", d_gy, d_gy)
        if d_gu.size:
            sq = sq + np.einsum("rij,rij->r", d_gu, d_gu)
        accepted = np.zeros(r, dtype=bool)
        for _trial in range(60):
            trying = active & ~accepted
            if not np.any(trying):
                break
            a = alpha[:, None, None]
            cand_y = g_y - a * d_gy
            cand_u = g_u - a * d_gu if d_gu.size else g_u
            cand_loss = problem.loss(cand_y, cand_u)
            ok = trying & (cand_loss <= loss - 1e-4 * alpha * sq)
            g_y = np.where(ok[:, None, None], cand_y, g_y)
            if d_gu.size:
                g_u = np.where(ok[:, None, None], cand_u, g_u)
            loss = np.where(ok, cand_loss, loss)
            accepted |= ok
            alpha = np.where(trying & ~ok, alpha * 0.5, alpha)
        # Replicas whose line search never accepted are stalled: freeze them.
        active &= accepted
        alpha = np.where(accepted, np.minimum(alpha * 2.0, 1e6), alpha)
        iters[accepted] += 1
        loss, d_gy, d_gu = problem.loss_and_grad(g_y, g_u)
        grad_norm = _grad_inf_norm(d_gy, d_gu)
        active &= grad_norm > cfg.grad_tol
    return g_y, g_u, loss, grad_norm, iters


def fit_intermediate_many(
    datasets: list[Dataset],
    horizon: int,
    inits: list[tuple[np.ndarray, np.ndarray]] | None = None,
    config: IntermediateFitConfig | None = None,
) -> list[FitReport | Exception]:
    """Fit the intermediate predictor on a batch of equally sized datasets.

    Replicas are optimized in lockstep with fully independent per-replica
    arithmetic, so results do not depend on how a sweep is batched.  Failed
    replicas (divergence) are reported as exceptions in the returned list
    rather than raised.
    """
    cfg = config or IntermediateFitConfig()
    problem = _BatchProblem(datasets, horizon)
    d_y, d_u = problem.d_y, problem.d_u

    if inits is None:
        inits = []
        for data in datasets:
            ss = fit_single_step(data, horizon=1).predictor
            inits.append((ss.G_y, ss.G_u))
    g_y = np.stack([np.asarray(gy, dtype=float).reshape(d_y, d_y) for gy, _ in inits])
    g_u = np.stack([np.asarray(gu, dtype=float).reshape(d_y, d_u) for _, gu in inits])

    best_gy, best_gu, best_loss, status, adam_iters = _adam_stage(problem, g_y, g_u, cfg)
    diverged = status == _DIVERGED
    g_y, g_u, loss, grad_norm, polish_iters = _polish_stage(
        problem, best_gy.copy(), best_gu.copy(), cfg, skip=diverged
    )
    # Polish is monotone from the best Adam iterate; the guard below is defensive.
    worse = loss > best_loss
    if np.any(worse):
        wmask = worse[:, None, None]
        g_y = np.where(wmask, best_gy, g_y)
        g_u = np.where(wmask, best_gu, g_u) if g_u.size else g_u
        loss = np.where(worse, best_loss, loss)

    out: list[FitReport | Exception] = []
    for i in range(len(datasets)):
        if diverged[i]:
            out.append(DivergenceError(
                f"intermediate fit diverged (loss exceeded {cfg.divergence_factor:.0e} x initial)"
            ))
            continue
        pred = Predictor.from_components(g_y[i], g_u[i], horizon, PredictorClass.INTERMEDIATE)
        out.append(FitReport(
            predictor=pred,
            n_windows=problem.t,
            final_loss=float(loss[i]),
            iterations=int(adam_iters[i] + polish_iters[i]),
            final_grad_norm=float(grad_norm[i]),
            converged=bool(grad_norm[i] <= cfg.grad_tol),
        ))
    return out


def fit_intermediate(
    data: Dataset,
    horizon: int,
    init: tuple[np.ndarray, np.ndarray] | None = None,
    config: IntermediateFitConfig | None = None,
) -> FitReport:
    """Fit a one-step model by minimizing the H-step rollout loss.

    ``init`` defaults to the single-step least-squares fit.  Raises
    DivergenceError if the loss exceeds 1e6 times its initial value.
    """
    inits = None if init is None else [init]
    result = fit_intermediate_many([data], horizon, inits=inits, config=config)[0]
    if isinstance(result, Exception):
        raise result
    return result
