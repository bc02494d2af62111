"""Linear time-invariant system primitives.

State recursion and observation model::

    x_{t+1} = A x_t + B u_t + B_w w_t        x_0 = 0
    y_t     = C x_t + D_v v_t

with u_t, w_t, v_t i.i.d. standard normal.  Arrays are time-major (row t is
time step t).  A trajectory stores states x_0..x_N, observations y_1..y_N and
inputs u_1..u_N; the input u_0 that drives the first transition is drawn and
discarded, so every stored (y_t, u_t, y_{t+1}) triple satisfies the recursion.

Randomness comes from ``numpy.random.default_rng`` (PCG64).  The draw order is
fixed (inputs, then process noise, then sensor noise), so a seed determines
the trajectory bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SolverError",
    "LtiSystem",
    "Trajectory",
    "Dataset",
    "InnovationsForm",
    "WellSpecRollout",
    "MisspecRollout",
    "spectral_radius",
    "solve_dlyap",
    "simulate",
    "stationary_regressor_cov",
    "kalman_innovations",
    "build_rollout_wellspec",
    "build_rollout_misspec",
    "psd_sqrt",
]


class SolverError(RuntimeError):
    """A fixed-point solver failed to reach its residual target."""


def _freeze(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    if out.ndim == 1:
        out = out.reshape(1, -1)
    if out.ndim != 2:
        raise ValueError(f"expected a matrix, got array of ndim {out.ndim}")
    out.flags.writeable = False
    return out


def spectral_radius(m: np.ndarray) -> float:
    """Largest eigenvalue modulus; 0.0 for an empty matrix."""
    m = np.asarray(m, dtype=float)
    if m.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(m))))


@dataclass(frozen=True, eq=False)
class LtiSystem:
    """Strictly stable LTI system; matrices are copied and made read-only.

    ``B``, ``B_w`` and ``D_v`` may have zero columns (no inputs, no process
    noise, no sensor noise).  ``is_fully_observed`` is true when ``C`` is the
    identity and there is no sensor-noise channel; that flag gates which of
    the closed-form error analyses applies.
    """

    A: np.ndarray
    B: np.ndarray
    B_w: np.ndarray
    C: np.ndarray
    D_v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", _freeze(self.A))
        object.__setattr__(self, "B", _freeze(self.B))
        object.__setattr__(self, "B_w", _freeze(self.B_w))
        object.__setattr__(self, "C", _freeze(self.C))
        object.__setattr__(self, "D_v", _freeze(self.D_v))
        d_x = self.A.shape[0]
        if self.A.shape != (d_x, d_x):
            raise ValueError("A must be square")
        for name, mat, rows in (
            ("B", self.B, d_x),
            ("B_w", self.B_w, d_x),
            ("D_v", self.D_v, self.C.shape[0]),
        ):
            if mat.shape[0] != rows:
                raise ValueError(f"{name} has {mat.shape[0]} rows, expected {rows}")
        if self.C.shape[1] != d_x:
            raise ValueError("C must have d_x columns")
        rho = spectral_radius(self.A)
        if rho >= 1.0:
            raise ValueError(f"unstable system: spectral radius {rho:.6f} >= 1")

    @property
    def d_x(self) -> int:
        return self.A.shape[0]

    @property
    def d_u(self) -> int:
        return self.B.shape[1]

    @property
    def d_y(self) -> int:
        return self.C.shape[0]

    @property
    def d_w(self) -> int:
        return self.B_w.shape[1]

    @property
    def d_v(self) -> int:
        return self.D_v.shape[1]

    @property
    def is_fully_observed(self) -> bool:
        return (
            self.d_v == 0
            and self.C.shape == (self.d_x, self.d_x)
            and bool(np.array_equal(self.C, np.eye(self.d_x)))
        )


def make_system(A, B=None, B_w=None, C=None, D_v=None) -> LtiSystem:
    """Convenience constructor filling in common defaults.

    ``B=None`` means no inputs, ``B_w=None`` means ``B_w = I`` (unit process
    noise per state), ``C=None`` means full observation, ``D_v=None`` means no
    sensor noise.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d_x = A.shape[0]
    if B is None:
        B = np.zeros((d_x, 0))
    if B_w is None:
        B_w = np.eye(d_x)
    C = np.eye(d_x) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    if D_v is None:
        D_v = np.zeros((C.shape[0], 0))
    return LtiSystem(A=A, B=np.atleast_2d(np.asarray(B, dtype=float).reshape(d_x, -1)),
                     B_w=np.atleast_2d(np.asarray(B_w, dtype=float).reshape(d_x, -1)),
                     C=C, D_v=np.atleast_2d(np.asarray(D_v, dtype=float).reshape(C.shape[0], -1)))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One simulated rollout: states x_0..x_N, observations y_1..y_N, inputs u_1..u_N."""

    states: np.ndarray
    observations: np.ndarray
    inputs: np.ndarray
    seed: int

    def __post_init__(self):
        n = self.observations.shape[0]
        if self.states.shape[0] != n + 1:
            raise ValueError("need exactly one more state than observations")
        if self.inputs.shape[0] != n:
            raise ValueError("inputs and observations must have equal length")
        if n >= 1 and np.any(self.states[0] != 0.0):
            raise ValueError("trajectories start from x_0 = 0")
        for arr in (self.states, self.observations, self.inputs):
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    def dataset(self) -> "Dataset":
        return Dataset(observations=self.observations, inputs=self.inputs, seed=self.seed)


@dataclass(frozen=True, eq=False)
class Dataset:
    """The observable part of a training rollout: {(y_t, u_t)}_{t=1..N}."""

    observations: np.ndarray
    inputs: np.ndarray
    seed: int

    def __post_init__(self):
        if self.observations.shape[0] != self.inputs.shape[0]:
            raise ValueError("observations and inputs must have equal length")
        for arr in (self.observations, self.inputs):
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def d_y(self) -> int:
        return self.observations.shape[1]

    @property
    def d_u(self) -> int:
        return self.inputs.shape[1]


def simulate(system: LtiSystem, n_steps: int, seed: int) -> Trajectory:
    """Roll the system out for ``n_steps`` observations under seed ``seed``.

    Noise draw order: inputs u_0..u_N, process noise w_0..w_{N-1}, sensor
    noise v_1..v_N.  Identical seeds give identical trajectories.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = np.random.default_rng(int(seed))
    n = int(n_steps)
    u_all = rng.standard_normal((n + 1, system.d_u))
    w = rng.standard_normal((n, system.d_w))
    v = rng.standard_normal((n, system.d_v))

    drive = u_all[:-1] @ system.B.T + w @ system.B_w.T
    x = np.zeros((n + 1, system.d_x))
    a = system.A
    for t in range(n):
        x[t + 1] = a @ x[t] + drive[t]
    y = x[1:] @ system.C.T + v @ system.D_v.T
    return Trajectory(states=x, observations=y, inputs=u_all[1:].copy(), seed=int(seed))


def solve_dlyap(a: np.ndarray, q: np.ndarray, *, max_doublings: int = 120) -> np.ndarray:
    """Solve P = A P A^T + Q for stable A and symmetric PSD Q.

    Uses the doubling form of the series sum_k A^k Q (A^k)^T (squaring A each
    pass), which converges geometrically.  The result satisfies
    ``||P - A P A^T - Q||_F <= 1e-10 * max(1, ||Q||_F)`` or a SolverError is
    raised.
    """
    a = np.asarray(a, dtype=float)
    q = np.asarray(q, dtype=float)
    if a.shape[0] != a.shape[1] or a.shape != q.shape:
        raise ValueError("A and Q must be square with equal shape")
    if q.size and np.linalg.norm(q - q.T) > 1e-10 * max(1.0, np.linalg.norm(q)):
        raise ValueError("Q must be symmetric")
    rho = spectral_radius(a)
    if rho >= 1.0:
        raise ValueError(f"solve_dlyap requires a stable A, got spectral radius {rho:.6f}")
    if a.size == 0:
        return q.copy()

    p = 0.5 * (q + q.T)
    apow = a.copy()
    for _ in range(max_doublings):
        term = apow @ p @ apow.T
        p = p + term
        if np.linalg.norm(term, "fro") <= 1e-15 * max(1.0, np.linalg.norm(p, "fro")):
            break
        apow = apow @ apow
    p = 0.5 * (p + p.T)
    residual = np.linalg.norm(p - a @ p @ a.T - q, "fro")
    if residual > 1e-10 * max(1.0, np.linalg.norm(q, "fro")):
        raise SolverError(f"discrete Lyapunov residual {residual:.3e} above tolerance")
    return p


def stationary_state_cov(system: LtiSystem) -> np.ndarray:
    """Stationary covariance of x_t under i.i.d. standard-normal u and w."""
    return solve_dlyap(system.A, system.B @ system.B.T + system.B_w @ system.B_w.T)


def stationary_regressor_cov(system: LtiSystem, horizon: int) -> np.ndarray:
    """Stationary covariance of z_t = [x_t; u_t; ...; u_{t+H-1}].

    Future inputs are independent of the current state, so the matrix is
    blockdiag(Sigma_x, I_{H*d_u}).  Requires a fully observed system.
    """
    _require_fully_observed(system, "stationary_regressor_cov")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    sigma_x = stationary_state_cov(system)
    dim = system.d_x + horizon * system.d_u
    out = np.eye(dim)
    out[: system.d_x, : system.d_x] = sigma_x
    return out


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues below 1e-14 are clamped to zero; materially negative
    eigenvalues (beyond roundoff) raise ValueError.
    """
    m = np.asarray(m, dtype=float)
    m = 0.5 * (m + m.T)
    w, vecs = np.linalg.eigh(m)
    scale = max(1.0, float(np.max(np.abs(w))) if w.size else 0.0)
    if w.size and w.min() < -1e-10 * scale:
        raise ValueError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    w = np.where(w < 1e-14, 0.0, w)
    return (vecs * np.sqrt(w)) @ vecs.T


@dataclass(frozen=True, eq=False)
class InnovationsForm:
    """Steady-state Kalman filter data for a partially observed system.

    The innovations recursion is ``xhat_{t+1} = A xhat_t + K D_e e_t`` with
    ``y_t = C xhat_t + D_e e_t`` and e_t i.i.d. standard normal.  ``S`` is the
    stabilizing Riccati solution, ``K`` the Kalman gain, ``D_e`` the symmetric
    PSD innovation square root, ``Sigma_xhat``/``Sigma_y`` the stationary
    covariances of xhat_t and y_t.
    """

    K: np.ndarray
    S: np.ndarray
    D_e: np.ndarray
    Sigma_xhat: np.ndarray
    Sigma_y: np.ndarray


def _require_fully_observed(system: LtiSystem, what: str):
    if not system.is_fully_observed:
        raise ValueError(f"{what} requires a fully observed system (C = I, no sensor noise)")


def _observability_matrix(system: LtiSystem) -> np.ndarray:
    blocks = []
    m = system.C.copy()
    for _ in range(system.d_x):
        blocks.append(m)
        m = m @ system.A
    return np.vstack(blocks)


def kalman_innovations(
    system: LtiSystem, *, tol: float = 1e-12, max_iters: int = 100_000
) -> InnovationsForm:
    """Solve the filtering Riccati equation and assemble the innovations form.

    Fixed-point iteration from S_0 = B_w B_w^T:

        S <- A S A^T + B_w B_w^T - A S C^T (C S C^T + D_v D_v^T)^-1 C S A^T

    stopping when successive iterates agree to ``tol`` (relative Frobenius).
    Requires (A, C) observable and D_v D_v^T positive definite.
    """
    if system.d_v == 0:
        raise ValueError("innovations form requires a sensor-noise channel (D_v D_v^T > 0)")
    r = system.D_v @ system.D_v.T
    if np.linalg.eigvalsh(r).min() <= 0.0:
        raise ValueError("innovations form requires D_v D_v^T positive definite")
    if np.linalg.matrix_rank(_observability_matrix(system)) < system.d_x:
        raise ValueError("innovations form requires (A, C) observable")

    a, c = system.A, system.C
    q = system.B_w @ system.B_w.T
    s = q.copy()
    for _ in range(max_iters):
        gain_term = a @ s @ c.T
        innov_cov = c @ s @ c.T + r
        s_next = a @ s @ a.T + q - gain_term @ np.linalg.solve(innov_cov, gain_term.T)
        s_next = 0.5 * (s_next + s_next.T)
        if np.linalg.norm(s_next - s, "fro") <= tol * max(1.0, np.linalg.norm(s, "fro")):
            s = s_next
            break
        s = s_next
    else:
        raise SolverError("Riccati fixed-point iteration did not converge")

    innov_cov = c @ s @ c.T + r
    k = a @ s @ c.T @ np.linalg.inv(innov_cov)
    residual = np.linalg.norm(
        s - (a @ s @ a.T + q - (a @ s @ c.T) @ np.linalg.solve(innov_cov, c @ s @ a.T)), "fro"
    )
    if residual > 1e-10:
        raise SolverError(f"Riccati residual {residual:.3e} above tolerance")
    closed = spectral_radius(a - k @ c)
    if closed >= 1.0:
        raise SolverError(f"Riccati solution is not stabilizing (rho(A-KC) = {closed:.6f})")
    d_e = psd_sqrt(innov_cov)
    sigma_xhat = solve_dlyap(a, k @ innov_cov @ k.T)
    sigma_y = c @ sigma_xhat @ c.T + innov_cov
    return InnovationsForm(K=k, S=s, D_e=d_e, Sigma_xhat=sigma_xhat, Sigma_y=sigma_y)


@dataclass(frozen=True, eq=False)
class WellSpecRollout:
    """Exact H-step rollout maps for a fully observed system.

    ``G_star`` has block row k = [A^k, A^{k-1}B, ..., B, 0, ...], so that
    x_{t+1:t+H} = G_star [x_t; u_{t:t+H-1}] + Gamma_w w_{t:t+H-1}, where
    ``Gamma_w`` has block (i, j) = A^{i-j} B_w for i >= j.
    """

    G_star: np.ndarray
    Gamma_w: np.ndarray
    horizon: int


@dataclass(frozen=True, eq=False)
class MisspecRollout:
    """Innovations-form H-step decomposition of a partially observed system.

    y_{t+1:t+H} = Phi xhat_t + G_star y_t + Gamma_e e_{t+1:t+H} with block
    rows Phi_k = C A^{k-1} (A - KC), G_star_k = C A^{k-1} K, and Gamma_e lower
    block triangular with D_e on the diagonal and C A^{i-j-1} K D_e below it.
    """

    Phi: np.ndarray
    G_star: np.ndarray
    Gamma_e: np.ndarray
    horizon: int


def _matrix_powers(a: np.ndarray, count: int) -> list[np.ndarray]:
    powers = [np.eye(a.shape[0])]
    for _ in range(count):
        powers.append(a @ powers[-1])
    return powers


def build_rollout_wellspec(system: LtiSystem, horizon: int) -> WellSpecRollout:
    _require_fully_observed(system, "build_rollout_wellspec")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    h, d_x, d_u, d_w = horizon, system.d_x, system.d_u, system.d_w
    powers = _matrix_powers(system.A, h)

    g_star = np.zeros((h * d_x, d_x + h * d_u))
    gamma_w = np.zeros((h * d_x, h * d_w))
    for k in range(1, h + 1):
        rows = slice((k - 1) * d_x, k * d_x)
        g_star[rows, :d_x] = powers[k]
        for j in range(1, k + 1):
            cols = slice(d_x + (j - 1) * d_u, d_x + j * d_u)
            g_star[rows, cols] = powers[k - j] @ system.B
        for j in range(1, k + 1):
            cols = slice((j - 1) * d_w, j * d_w)
            gamma_w[rows, cols] = powers[k - j] @ system.B_w
    return WellSpecRollout(G_star=g_star, Gamma_w=gamma_w, horizon=h)


def build_rollout_misspec(
    innov: InnovationsForm, system: LtiSystem, horizon: int
) -> MisspecRollout:
    if system.d_u > 0:
        raise ValueError("misspecified rollout maps are defined for input-free systems")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    h, d_y, d_x = horizon, system.d_y, system.d_x
    a, c, k = system.A, system.C, innov.K
    powers = _matrix_powers(a, h)

    phi = np.zeros((h * d_y, d_x))
    g_star = np.zeros((h * d_y, d_y))
    gamma_e = np.zeros((h * d_y, h * d_y))
    a_minus_kc = a - k @ c
    kd = k @ innov.D_e
    for i in range(1, h + 1):
        rows = slice((i - 1) * d_y, i * d_y)
        phi[rows] = c @ powers[i - 1] @ a_minus_kc
        g_star[rows] = c @ powers[i - 1] @ k
        gamma_e[rows, (i - 1) * d_y : i * d_y] = innov.D_e
        for j in range(1, i):
            cols = slice((j - 1) * d_y, j * d_y)
            gamma_e[rows, cols] = c @ powers[i - j - 1] @ kd
    return MisspecRollout(Phi=phi, G_star=g_star, Gamma_e=gamma_e, horizon=h)
