"""Exact N-agent problem in stacked form X = [x^1; ...; x^N].

With J = 11^T / N and D = I - J, the empirical-mean operators are
``xbar = (1^T / N kron I) X`` and ``X - 1 kron xbar = (D kron I) X``.  Expanding
the social cost gives

    Q_N = (1/N) [ (D kron I) blkdiag(Q^n) (D kron I) + 11^T kron (sum_n Q^n + N Qbar) / N^2 ]
    R_N = (1/N) [ D kron R + J kron (R + Rbar) ]

which ``cost_fidelity_error`` checks against the per-agent cost sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .analytic import exact_cost, optimal_gains, solve_discounted_riccati, solve_discrete_lyapunov
from .errors import AdmissibilityError, ModelValidationError
from .model import ControlParams, MfcModel
from .simulators import PopulationConfig

MAX_STACKED_DIM = 2000


@dataclass(frozen=True, eq=False)
class StackedSystem:
    N: int
    d: int
    ell: int
    A_N: np.ndarray
    B_N: np.ndarray
    Q_N: np.ndarray
    R_N: np.ndarray
    common_cov: np.ndarray
    idio_cov: np.ndarray
    init_moment: np.ndarray


@dataclass(frozen=True, eq=False)
class StackedFeedback:
    """U = Phi X."""

    Phi: np.ndarray
    label: str = "custom"


def _blkdiag(blocks) -> np.ndarray:
    n = len(blocks)
    r, c = blocks[0].shape
    out = np.zeros((n * r, n * c))
    for i, b in enumerate(blocks):
        out[i * r:(i + 1) * r, i * c:(i + 1) * c] = b
    return out


def build_stacked(model: MfcModel, popcfg: PopulationConfig) -> StackedSystem:
    popcfg.check(model)
    N, d, ell = popcfg.N, model.d, model.ell
    if N * d > MAX_STACKED_DIM:
        raise ModelValidationError(f"stacked dimension N*d = {N * d} exceeds {MAX_STACKED_DIM}")
    I = np.eye(N)
    ones = np.ones((N, N))
    J = ones / N
    D = I - J
    Qn = popcfg.agent_costs(model)
    Dd = np.kron(D, np.eye(d))
    mean_cost = Qn.sum(axis=0) + N * model.Q_bar
    Q_N = (Dd @ _blkdiag(list(Qn)) @ Dd + np.kron(ones, mean_cost) / N**2) / N
    R_N = (np.kron(D, model.R) + np.kron(J, model.R + model.R_bar)) / N
    nz = model.noise
    mu0, mu1 = nz.eps0_init.mean, nz.eps1_init.mean
    off = nz.eps0_init.second_moment + np.outer(mu0, mu1) + np.outer(mu1, mu0)
    init = np.kron(ones, off + np.outer(mu1, mu1)) + np.kron(
        I, nz.eps1_init.second_moment - np.outer(mu1, mu1)
    )
    return StackedSystem(
        N=N,
        d=d,
        ell=ell,
        A_N=np.kron(I, model.A) + np.kron(J, model.A_bar),
        B_N=np.kron(I, model.B) + np.kron(J, model.B_bar),
        Q_N=0.5 * (Q_N + Q_N.T),
        R_N=0.5 * (R_N + R_N.T),
        common_cov=np.kron(ones, nz.sigma0),
        idio_cov=np.kron(I, nz.sigma1),
        init_moment=init,
    )


def direct_social_cost(model: MfcModel, popcfg: PopulationConfig, X, U) -> float:
    """Per-agent social cost (1/N) sum_n c^(n) for stacked X (Nd,) and U (N*ell,)."""
    N, d, ell = popcfg.N, model.d, model.ell
    x = np.asarray(X, float).reshape(N, d)
    u = np.asarray(U, float).reshape(N, ell)
    xbar, ubar = x.mean(axis=0), u.mean(axis=0)
    total = 0.0
    for n, Qn in enumerate(popcfg.agent_costs(model)):
        dx, du = x[n] - xbar, u[n] - ubar
        total += dx @ Qn @ dx + xbar @ (Qn + model.Q_bar) @ xbar
        total += du @ model.R @ du + ubar @ (model.R + model.R_bar) @ ubar
    return float(total / N)


def cost_fidelity_error(model, popcfg, stacked, X, U) -> float:
    """Relative gap between the stacked quadratic form and the per-agent cost sum."""
    direct = direct_social_cost(model, popcfg, X, U)
    stacked_val = float(X @ stacked.Q_N @ X + U @ stacked.R_N @ U)
    return abs(stacked_val - direct) / max(1.0, abs(direct))


def phi_from_theta(theta: ControlParams, N: int) -> StackedFeedback:
    """Every agent playing u = -K (x - xbar) - L xbar, in stacked form."""
    J = np.ones((N, N)) / N
    Phi = -np.kron(np.eye(N), theta.K) - np.kron(J, theta.L - theta.K)
    return StackedFeedback(Phi, "custom")


def phi_mkv(model: MfcModel, N: int, theta_star: ControlParams | None = None) -> StackedFeedback:
    if theta_star is None:
        theta_star, _ = optimal_gains(model)
    return StackedFeedback(phi_from_theta(theta_star, N).Phi, "mkv_transplant")


def spectral_radius(F) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(F)))) if F.size else 0.0


def eval_social_cost(stacked: StackedSystem, phi: StackedFeedback, gamma: float) -> float:
    """Exact discounted social cost of U = Phi X (infinite horizon)."""
    F = stacked.A_N + stacked.B_N @ phi.Phi
    if gamma * spectral_radius(F) ** 2 >= 1.0:
        raise AdmissibilityError("stacked closed loop A_N + B_N Phi has no finite discounted cost")
    G = stacked.Q_N + phi.Phi.T @ stacked.R_N @ phi.Phi
    P, _, _ = solve_discrete_lyapunov(F, G, gamma)
    noise = stacked.common_cov + stacked.idio_cov
    return float(np.sum(P * stacked.init_moment) + gamma / (1.0 - gamma) * np.sum(P * noise))


def truncated_social_cost(stacked: StackedSystem, phi: StackedFeedback, gamma: float, T: int) -> float:
    """Discounted social cost summed over t < T."""
    F = stacked.A_N + stacked.B_N @ phi.Phi
    G = stacked.Q_N + phi.Phi.T @ stacked.R_N @ phi.Phi
    noise = stacked.common_cov + stacked.idio_cov
    M = stacked.init_moment.copy()
    total, disc = 0.0, 1.0
    for _ in range(T):
        total += disc * float(np.sum(G * M))
        M = F @ M @ F.T + noise
        disc *= gamma
    return total


def solve_n_agent_optimal(stacked: StackedSystem, gamma: float):
    """(Phi*,N, C*,N) from the stacked discounted Riccati equation."""
    _, gain, _ = solve_discounted_riccati(stacked.A_N, stacked.B_N, stacked.Q_N, stacked.R_N, gamma)
    phi = StackedFeedback(-gain, "optimal_N")
    return phi, eval_social_cost(stacked, phi, gamma)


def diagonal_deviation(phi: StackedFeedback, K_star: np.ndarray, N: int) -> float:
    """max over agents and entries of |Phi_nn - (-K*)| on the diagonal blocks."""
    ell, d = K_star.shape
    worst = 0.0
    for n in range(N):
        block = phi.Phi[n * ell:(n + 1) * ell, n * d:(n + 1) * d]
        worst = max(worst, float(np.max(np.abs(block + K_star))))
    return worst


def mf_gap_bound(model: MfcModel, theta: ControlParams, N: int) -> float:
    """(d/N)(||P^y|| + ||P^z||)(||Sigma_y0|| + gamma/(1-gamma) ||Sigma^1||)."""
    from .analytic import solve_lyapunov_value
    from .model import op_norm

    sol = solve_lyapunov_value(model, theta)
    nz = model.noise
    g = model.gamma
    return (model.d / N) * (op_norm(sol.P_y) + op_norm(sol.P_z)) * (
        op_norm(nz.sigma_y0) + g / (1.0 - g) * op_norm(nz.sigma1)
    )


def mf_gap(model: MfcModel, theta: ControlParams, N: int) -> float:
    """C^N(theta) - C(theta) for a homogeneous population."""
    stacked = build_stacked(model, PopulationConfig.homogeneous(model, N))
    return eval_social_cost(stacked, phi_from_theta(theta, N), model.gamma) - exact_cost(model, theta).total


@dataclass(frozen=True)
class SweepRow:
    h_tilde: float
    mean: float
    std: float
    values: tuple


def heterogeneity_sweep(model: MfcModel, N: int, h_grid, seeds, theta_star=None):
    """|J^N(Phi*,N) - J^N(Phi*,N_MKV)| per heterogeneity radius, mean and sample std over seeds."""
    if theta_star is None:
        theta_star, _ = optimal_gains(model)
    transplant = phi_mkv(model, N, theta_star)
    rows = []
    for h in h_grid:
        vals = []
        for s in seeds:
            stacked = build_stacked(model, PopulationConfig.draw(model, N, float(h), int(s)))
            _, c_opt = solve_n_agent_optimal(stacked, model.gamma)
            c_mkv = eval_social_cost(stacked, transplant, model.gamma)
            vals.append(abs(c_opt - c_mkv))
        vals = np.array(vals)
        std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        rows.append(SweepRow(float(h), float(vals.mean()), std, tuple(vals.tolist())))
    return rows
