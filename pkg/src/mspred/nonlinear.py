"""A lifted nonlinear benchmark with tunable observation misspecification.

The scalar pair (p, q) evolves as

    p_{t+1} = mu * p_t + w_t^p
    q_{t+1} = lam * (q_t - p_t^2) + w_t^q

from (0, 0) with i.i.d. N(0, sigma_w^2) noises.  The observables
(p, q, p^2, 1) close the dynamics linearly up to noise, so linear predictors
on y_t = C (p, q, p^2, 1)^T + v_t are well specified when C = I and the
sensor noise vanishes, and misspecified otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lti import Dataset
from .predictors import (
    IntermediateFitConfig,
    PredictorClass,
    empirical_loss,
)

__all__ = ["KoopmanSystem", "simulate_koopman", "nonlinear_comparison", "NonlinearCell"]

LIFTED_DIM = 4


@dataclass(frozen=True, eq=False)
class KoopmanSystem:
    mu: float
    lam: float
    sigma_w: float
    C: np.ndarray
    sigma_v: float

    def __post_init__(self):
        object.__setattr__(self, "C", np.atleast_2d(np.asarray(self.C, dtype=float)))
        if not (abs(self.mu) < 1 and abs(self.lam) < 1):
            raise ValueError("mu and lam must lie in (-1, 1)")
        if self.sigma_w < 0 or self.sigma_v < 0:
            raise ValueError("noise levels must be nonnegative")
        if self.C.shape[1] != LIFTED_DIM:
            raise ValueError(f"C must map the {LIFTED_DIM}-dimensional lifted state")

    @property
    def d_y(self) -> int:
        return self.C.shape[0]


def simulate_koopman(sys: KoopmanSystem, n_steps: int, seed: int) -> np.ndarray:
    """Observations y_1..y_N of the lifted system; deterministic given the seed.

    Draw order: p-noise, q-noise, then sensor noise.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = np.random.default_rng(int(seed))
    n = int(n_steps)
    w_p = sys.sigma_w * rng.standard_normal(n)
    w_q = sys.sigma_w * rng.standard_normal(n)
    v = sys.sigma_v * rng.standard_normal((n, sys.d_y))

    p = np.empty(n + 1)
    q = np.empty(n + 1)
    p[0] = q[0] = 0.0
    for t in range(n):
        p[t + 1] = sys.mu * p[t] + w_p[t]
        q[t + 1] = sys.lam * (q[t] - p[t] ** 2) + w_q[t]
    lifted = np.stack([p[1:], q[1:], p[1:] ** 2, np.ones(n)], axis=1)
    return lifted @ sys.C.T + v


def _koopman_dataset(sys: KoopmanSystem, n_steps: int, seed: int) -> Dataset:
    y = simulate_koopman(sys, n_steps, seed)
    return Dataset(observations=y, inputs=np.zeros((n_steps, 0)), seed=int(seed))


@dataclass(frozen=True, eq=False)
class NonlinearCell:
    """Evaluation loss of one (class, horizon, replica) in the benchmark."""

    klass: PredictorClass
    horizon: int
    replica: int
    seed: int
    loss: float
    failed: bool = False


def nonlinear_comparison(
    sys: KoopmanSystem,
    horizons: list[int],
    n_train: int,
    replicas: int,
    master_seed: int,
    *,
    eval_factor: int = 10,
    fit_config: IntermediateFitConfig | None = None,
    seed_label: str = "nonlinear",
) -> list[NonlinearCell]:
    """Mean H-step evaluation loss per (predictor class, horizon).

    Per replica: fit all three classes (regressor is y_t alone) on a fresh
    training rollout and score them on an independent rollout of length
    ``eval_factor * n_train``.  Fit failures are recorded, not fatal.
    """
    from .control import fit_all_classes
    from .experiments import derive_seed

    cells: list[NonlinearCell] = []
    for horizon in horizons:
        seeds = [derive_seed(master_seed, seed_label, horizon, r) for r in range(replicas)]
        eval_seeds = [derive_seed(master_seed, seed_label, "eval", horizon, r) for r in range(replicas)]
        train = [_koopman_dataset(sys, n_train, s) for s in seeds]
        evals = [_koopman_dataset(sys, eval_factor * n_train, s) for s in eval_seeds]
        fits = fit_all_classes(train, horizon, config=fit_config)
        for klass, reports in fits.items():
            for r, rep in enumerate(reports):
                if isinstance(rep, Exception):
                    cells.append(NonlinearCell(
                        klass=klass, horizon=horizon, replica=r, seed=seeds[r],
                        loss=float("nan"), failed=True,
                    ))
                    continue
                loss = empirical_loss(rep.predictor, evals[r])
                cells.append(NonlinearCell(
                    klass=klass, horizon=horizon, replica=r, seed=seeds[r], loss=loss,
                ))
    return cells
