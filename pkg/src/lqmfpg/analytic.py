"""Model-based quantities: value and covariance matrices, exact cost and gradient,
optimal gains and the exact policy-gradient loop.

Every Lyapunov-type equation ``P = G + gamma F^T P F`` is solved by summing its
Neumann series with the doubling recursion
``P <- P + (F_k)^T P F_k, F_k <- F_k F_k`` (``F_0 = sqrt(gamma) F``), which
reaches the fixed point of the plain iteration after ``log2`` as many steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AdmissibilityError, NumericsError, StepError
from .model import ControlParams, MfcModel, closed_loops, is_admissible
from .trace import ConvergenceTrace, TraceRecord

TOL = 1e-12
MAX_DOUBLINGS = 64
MAX_VALUE_ITERS = 100_000


def solve_discrete_lyapunov(F, G, gamma, tol=TOL, transpose=False):
    """Solve P = G + gamma F^T P F (or gamma F P F^T with ``transpose``).

    Returns (P, doublings, residual).  Requires sqrt(gamma) * rho(F) < 1.
    """
    F = np.asarray(F, dtype=np.float64)
    Fk = np.sqrt(gamma) * (F.T if transpose else F)
    P = np.array(G, dtype=np.float64)
    for it in range(1, MAX_DOUBLINGS + 1):
        inc = Fk.T @ P @ Fk
        P = P + inc
        if not np.all(np.isfinite(P)):
            raise NumericsError("Lyapunov series diverged (closed loop not stable)", np.inf)
        if np.linalg.norm(inc) <= tol:
            break
        Fk = Fk @ Fk
    else:
        res = lyapunov_residual(F, G, gamma, P, transpose)
        raise NumericsError(f"Lyapunov doubling did not converge (residual {res:.3g})", res)
    P = 0.5 * (P + P.T)
    return P, it, lyapunov_residual(F, G, gamma, P, transpose)


def lyapunov_residual(F, G, gamma, P, transpose=False) -> float:
    if transpose:
        r = G + gamma * F @ P @ F.T - P
    else:
        r = G + gamma * F.T @ P @ F - P
    return float(np.linalg.norm(r))


@dataclass(frozen=True)
class RiccatiSolution:
    P_y: np.ndarray
    P_z: np.ndarray
    alpha_y: float
    alpha_z: float
    iterations: int
    residual: float


@dataclass(frozen=True)
class CovariancePair:
    Sigma_y: np.ndarray
    Sigma_z: np.ndarray
    iterations: int = 0
    residual: float = 0.0


@dataclass(frozen=True)
class CostBreakdown:
    total: float
    c_y: float
    c_z: float

    def __float__(self):
        return self.total


@dataclass
class GradientEstimate:
    grad_K: np.ndarray
    grad_L: np.ndarray
    source: str
    meta: dict = field(default_factory=dict)

    def block_diag(self) -> np.ndarray:
        """The 2l x 2d matrix diag(grad_K, grad_L); off-blocks are zero."""
        ell, d = self.grad_K.shape
        out = np.zeros((2 * ell, 2 * d))
        out[:ell, :d] = self.grad_K
        out[ell:, d:] = self.grad_L
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([self.grad_K.ravel(), self.grad_L.ravel()])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))


def _require_admissible(model, theta):
    if not is_admissible(model, theta):
        raise AdmissibilityError(f"theta is outside the admissible set: {theta!r}")


def solve_lyapunov_value(model: MfcModel, theta: ControlParams) -> RiccatiSolution:
    """Value matrices P^y_K, P^z_L of the two decoupled closed loops."""
    _require_admissible(model, theta)
    g = model.gamma
    fy, fz = closed_loops(model, theta)
    _, _, Q, R = model.y_blocks()
    _, _, Qz, Rz = model.z_blocks()
    Py, ity, ry = solve_discrete_lyapunov(fy, Q + theta.K.T @ R @ theta.K, g)
    Pz, itz, rz = solve_discrete_lyapunov(fz, Qz + theta.L.T @ Rz @ theta.L, g)
    nz = model.noise
    scale = g / (1.0 - g)
    return RiccatiSolution(
        P_y=Py,
        P_z=Pz,
        alpha_y=scale * float(np.trace(Py @ nz.sigma1)),
        alpha_z=scale * float(np.trace(Pz @ nz.sigma0)),
        iterations=max(ity, itz),
        residual=max(ry, rz),
    )


def state_covariances(model: MfcModel, theta: ControlParams) -> CovariancePair:
    """Discounted state second moments Sigma^y_K and Sigma^z_L.

    The z source term uses E[z0 z0^T], so nonzero initial means are honoured.
    """
    _require_admissible(model, theta)
    g = model.gamma
    fy, fz = closed_loops(model, theta)
    nz = model.noise
    scale = g / (1.0 - g)
    Sy, ity, ry = solve_discrete_lyapunov(fy, nz.m_y0 + scale * nz.sigma1, g, transpose=True)
    Sz, itz, rz = solve_discrete_lyapunov(fz, nz.m_z0 + scale * nz.sigma0, g, transpose=True)
    return CovariancePair(Sy, Sz, max(ity, itz), max(ry, rz))


def exact_cost(model: MfcModel, theta: ControlParams, sol: RiccatiSolution | None = None) -> CostBreakdown:
    sol = sol or solve_lyapunov_value(model, theta)
    nz = model.noise
    c_y = float(np.trace(sol.P_y @ nz.m_y0)) + sol.alpha_y
    c_z = float(np.trace(sol.P_z @ nz.m_z0)) + sol.alpha_z
    return CostBreakdown(c_y + c_z, c_y, c_z)


def exact_gradient(model: MfcModel, theta: ControlParams, sol: RiccatiSolution | None = None,
                   cov: CovariancePair | None = None) -> GradientEstimate:
    sol = sol or solve_lyapunov_value(model, theta)
    cov = cov or state_covariances(model, theta)
    g = model.gamma
    A, B, _, R = model.y_blocks()
    Az, Bz, _, Rz = model.z_blocks()
    Ey = (R + g * B.T @ sol.P_y @ B) @ theta.K - g * B.T @ sol.P_y @ A
    Ez = (Rz + g * Bz.T @ sol.P_z @ Bz) @ theta.L - g * Bz.T @ sol.P_z @ Az
    return GradientEstimate(2.0 * Ey @ cov.Sigma_y, 2.0 * Ez @ cov.Sigma_z, "exact")


def fd_gradient(model: MfcModel, theta: ControlParams, h: float = 1e-6) -> GradientEstimate:
    """Central finite differences of ``exact_cost`` in every entry of K and L."""
    flat = theta.flat()
    shape = theta.K.shape
    grad = np.zeros_like(flat)
    nk = shape[0] * shape[1]
    for j in range(flat.size):
        vals = []
        for sign in (1.0, -1.0):
            pert = flat.copy()
            pert[j] += sign * h
            th = ControlParams.from_flat(pert, shape)
            if not is_admissible(model, th):
                block, idx = ("K", j) if j < nk else ("L", j - nk)
                r, c = divmod(idx, shape[1])
                raise AdmissibilityError(
                    f"finite-difference point {block}[{r},{c}] {'+' if sign > 0 else '-'} {h} "
                    "is outside the admissible set"
                )
            vals.append(exact_cost(model, th).total)
        grad[j] = (vals[0] - vals[1]) / (2.0 * h)
    g = ControlParams.from_flat(grad, shape)
    return GradientEstimate(g.K, g.L, "fd", {"h": h})


def _value_iteration(A, B, Q, R, gamma, tol=TOL, max_iter=MAX_VALUE_ITERS):
    P = np.zeros_like(Q)
    for it in range(1, max_iter + 1):
        S = R + gamma * B.T @ P @ B
        try:
            gain = np.linalg.solve(S, B.T @ P @ A)
        except np.linalg.LinAlgError as exc:
            raise NumericsError("R + gamma B^T P B is singular") from exc
        Pn = Q + gamma * A.T @ P @ A - gamma**2 * A.T @ P @ B @ gain
        Pn = 0.5 * (Pn + Pn.T)
        delta = float(np.linalg.norm(Pn - P))
        P = Pn
        if not np.isfinite(delta):
            raise NumericsError("Riccati iteration diverged", delta)
        if delta <= tol:
            break
    else:
        raise NumericsError(f"Riccati iteration did not converge in {max_iter} steps", delta)
    S = R + gamma * B.T @ P @ B
    try:
        K = gamma * np.linalg.solve(S, B.T @ P @ A)
    except np.linalg.LinAlgError as exc:
        raise NumericsError("R + gamma B^T P B is singular at the fixed point") from exc
    return P, K, it


def solve_discounted_riccati(A, B, Q, R, gamma):
    """Value iteration for the discounted Riccati equation.

    Returns (P, K, iterations) with the optimal feedback u = -K x.
    """
    return _value_iteration(
        np.asarray(A, float), np.asarray(B, float), np.asarray(Q, float), np.asarray(R, float), gamma
    )


def optimal_gains(model: MfcModel):
    """(theta*, C*) from the two decoupled discounted Riccati equations."""
    _, Ky, _ = solve_discounted_riccati(*model.y_blocks(), model.gamma)
    _, Lz, _ = solve_discounted_riccati(*model.z_blocks(), model.gamma)
    theta = ControlParams(Ky, Lz)
    if not is_admissible(model, theta):
        raise NumericsError("optimal feedback is outside the admissible set; model violates the standing assumptions")
    c_star = exact_cost(model, theta).total
    grad = exact_gradient(model, theta)
    if grad.norm() > 1e-7 * (1.0 + abs(c_star)):
        raise NumericsError(f"gradient at the Riccati solution is not zero ({grad.norm():.3g})", grad.norm())
    return theta, c_star


def truncated_covariances(model: MfcModel, theta: ControlParams, T: int) -> CovariancePair:
    """Sigma^{y,T}, Sigma^{z,T}: discounted second moments summed over t < T."""
    if T < 1:
        raise ValueError("horizon T must be >= 1")
    fy, fz = closed_loops(model, theta)
    nz = model.noise
    My, Mz = np.array(nz.m_y0), np.array(nz.m_z0)
    Sy, Sz = np.zeros_like(My), np.zeros_like(Mz)
    disc = 1.0
    for t in range(T):
        Sy += disc * My
        Sz += disc * Mz
        My = fy @ My @ fy.T + nz.sigma1
        Mz = fz @ Mz @ fz.T + nz.sigma0
        disc *= model.gamma
    return CovariancePair(Sy, Sz, T, 0.0)


def truncated_cost_batch(model: MfcModel, Ks, Ls, T: int):
    """Exact truncated costs (C^T_y(K_i), C^T_z(L_i)) for stacks of gains."""
    Ks = np.asarray(Ks, dtype=np.float64)
    Ls = np.asarray(Ls, dtype=np.float64)
    A, B, Q, R = model.y_blocks()
    Az, Bz, Qz, Rz = model.z_blocks()
    Fy = A - np.einsum("ij,mjk->mik", B, Ks)
    Fz = Az - np.einsum("ij,mjk->mik", Bz, Ls)
    Gy = Q + np.einsum("mji,jk,mkl->mil", Ks, R, Ks)
    Gz = Qz + np.einsum("mji,jk,mkl->mil", Ls, Rz, Ls)
    nz = model.noise
    My = np.broadcast_to(nz.m_y0, Fy.shape).copy()
    Mz = np.broadcast_to(nz.m_z0, Fz.shape).copy()
    cy = np.zeros(Ks.shape[0])
    cz = np.zeros(Ks.shape[0])
    disc = 1.0
    for _ in range(T):
        cy += disc * np.einsum("mij,mji->m", Gy, My)
        cz += disc * np.einsum("mij,mji->m", Gz, Mz)
        My = Fy @ My @ Fy.transpose(0, 2, 1) + nz.sigma1
        Mz = Fz @ Mz @ Fz.transpose(0, 2, 1) + nz.sigma0
        disc *= model.gamma
    return cy, cz


def truncated_cost(model: MfcModel, theta: ControlParams, T: int) -> CostBreakdown:
    cy, cz = truncated_cost_batch(model, theta.K[None], theta.L[None], T)
    return CostBreakdown(float(cy[0] + cz[0]), float(cy[0]), float(cz[0]))


def relative_error(cost, c_star):
    return (cost - c_star) / c_star if c_star else None


def exact_pg_run(model: MfcModel, theta0: ControlParams, eta: float, k_max: int,
                 eps_stop: float = 0.0, c_star: float | None = None, max_halvings: int = 30):
    """Gradient descent on C with exact gradients.

    Each step halves its length (up to ``max_halvings`` times) until the new
    iterate is admissible and does not increase the cost; when only the cost
    test fails the iterate is kept.  Stops after ``k_max`` steps or when the
    relative error (gradient norm if ``c_star`` is unknown and not computable)
    drops to ``eps_stop``.
    """
    if eta <= 0:
        raise ValueError("learning rate must be positive")
    _require_admissible(model, theta0)
    if c_star is None:
        try:
            _, c_star = optimal_gains(model)
        except NumericsError:
            c_star = None
    trace = ConvergenceTrace("exact", "gd", meta={"eta": eta, "c_star": c_star})
    theta = theta0
    sol = solve_lyapunov_value(model, theta)
    cost = exact_cost(model, theta, sol).total
    grad = exact_gradient(model, theta, sol)
    trace.append(TraceRecord(0, theta.K, theta.L, cost, relative_error(cost, c_star), grad.norm()))
    for k in range(1, k_max + 1):
        crit = trace.last.rel_error if c_star is not None else grad.norm()
        if crit is not None and crit <= eps_stop:
            break
        scale = 1.0
        accepted = None
        admissible_seen = False
        for _ in range(max_halvings + 1):
            cand = ControlParams(theta.K - scale * eta * grad.grad_K, theta.L - scale * eta * grad.grad_L)
            if is_admissible(model, cand):
                admissible_seen = True
                csol = solve_lyapunov_value(model, cand)
                ccost = exact_cost(model, cand, csol).total
                if ccost <= cost:
                    accepted = (cand, csol, ccost)
                    break
            scale *= 0.5
        if accepted is None:
            if not admissible_seen:
                raise StepError(f"no admissible step at iteration {k}", k, trace)
            scale = 0.0
        else:
            theta, sol, cost = accepted
            grad = exact_gradient(model, theta, sol)
        trace.append(
            TraceRecord(k, theta.K, theta.L, cost, relative_error(cost, c_star), grad.norm(), scale)
        )
    return trace
