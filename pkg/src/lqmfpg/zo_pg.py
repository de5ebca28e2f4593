"""Zeroth-order gradient estimation and the policy-gradient driver.

The estimator perturbs K and L by independent points on the Frobenius sphere
of radius tau, samples one truncated rollout cost per perturbation and returns
``(smoothing_dim / tau^2) * mean(C_i v_i)`` for each block.

Stream layout: iteration ``k`` of a run with master seed ``s`` owns the key
``derive_key(s, "pg", k)``.  Under it, perturbation ``i`` uses child lane 0
for its rollout, lanes ``1 + a`` for attempt ``a`` of its K direction and
lanes ``1 + MAX_RESAMPLES + 1 + a`` for its L direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .analytic import (
    GradientEstimate,
    exact_cost,
    exact_gradient,
    exact_pg_run,
    optimal_gains,
    relative_error,
)
from .errors import AdmissibilityError, ConfigError, NumericsError, StepError
from .model import ControlParams, MfcModel, is_admissible, op_norm
from .simulators import PopulationConfig, mkv_costs, pop_costs
from .trace import ConvergenceTrace, TraceRecord

MAX_RESAMPLES = 20
MAX_HALVINGS = 30
_ROLLOUT_LANE = 0
_K_LANE = 1
_L_LANE = _K_LANE + MAX_RESAMPLES + 1


@dataclass(frozen=True)
class ZoConfig:
    M: int
    T: int
    tau: float
    smoothing_dim: int | None = None
    simulator: str = "mkv"
    population: PopulationConfig | None = None
    num_threads: int = 1
    perturbation_policy: str = "allow"

    def __post_init__(self):
        if self.M < 1 or self.T < 1:
            raise ConfigError("M and T must be >= 1")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.smoothing_dim is not None and self.smoothing_dim < 1:
            raise ConfigError("smoothing_dim must be a positive integer")
        if self.simulator not in ("mkv", "pop"):
            raise ConfigError(f"simulator must be 'mkv' or 'pop', got {self.simulator!r}")
        if self.perturbation_policy not in ("allow", "resample"):
            raise ConfigError(
                f"perturbation_policy must be 'allow' or 'resample', got {self.perturbation_policy!r}"
            )
        if self.simulator == "pop" and self.population is None:
            raise ConfigError("the population simulator needs a PopulationConfig")

    def scale_dim(self, model: MfcModel) -> int:
        return self.smoothing_dim or model.ell * model.d


def sample_sphere_batch(rows: int, cols: int, tau: float, keys) -> np.ndarray:
    """One uniform point of the Frobenius sphere of radius ``tau`` per key."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    keys = np.asarray(keys, dtype=np.uint64)
    n = rows * cols
    slots = np.arange(n, dtype=np.uint64)
    w = rng.normal(keys[:, None], slots[None, :])
    norms = np.linalg.norm(w, axis=1)
    shift = 0
    while np.any(norms == 0.0):
        # measure-zero event: redraw from the next block of slots
        shift += n
        bad = norms == 0.0
        w[bad] = rng.normal(keys[bad, None], slots[None, :] + np.uint64(shift))
        norms = np.linalg.norm(w, axis=1)
    return (tau * w / norms[:, None]).reshape(-1, rows, cols)


def sample_sphere(rows: int, cols: int, tau: float, key: int) -> np.ndarray:
    return sample_sphere_batch(rows, cols, tau, np.array([key], dtype=np.uint64))[0]


def _batch_admissible(gamma: float, base: np.ndarray, gain: np.ndarray, pert: np.ndarray) -> np.ndarray:
    """gamma ||base - gain @ P_i||^2 < 1 for each perturbed gain P_i."""
    F = base - np.einsum("ij,mjk->mik", gain, pert)
    if F.shape[1] == 1 and F.shape[2] == 1:
        sig = np.abs(F[:, 0, 0])
    else:
        sig = np.linalg.norm(F, ord=2, axis=(1, 2))
    return gamma * sig**2 < 1.0


def _directions(model, center, base, gain, tau, parent, M, first_lane, block, resample):
    ell, d = center.shape
    keys = rng.child_keys(parent, M, first_lane)
    v = sample_sphere_batch(ell, d, tau, keys)
    ok = _batch_admissible(model.gamma, base, gain, center + v)
    n_bad = int(M - ok.sum())
    if not resample:
        return v, n_bad
    attempt = 0
    while not ok.all():
        attempt += 1
        if attempt > MAX_RESAMPLES:
            i = int(np.flatnonzero(~ok)[0])
            raise AdmissibilityError(
                f"{block} perturbation {i} stayed inadmissible after {MAX_RESAMPLES} resamples"
            )
        bad = np.flatnonzero(~ok)
        keys = rng.child_keys(parent, M, first_lane + attempt)[bad]
        v[bad] = sample_sphere_batch(ell, d, tau, keys)
        ok[bad] = _batch_admissible(model.gamma, base, gain, center[None] + v[bad])
    return v, n_bad


def perturbations(model: MfcModel, theta: ControlParams, tau: float, M: int, parent_key: int,
                  resample: bool = False):
    """(V1, V2, n_inadmissible): M sphere perturbations of K and of L.

    With ``resample`` every direction whose perturbed block leaves the
    admissible set is redrawn (up to MAX_RESAMPLES times); otherwise such
    directions are kept, since truncated rollouts have finite cost anyway,
    and only counted.
    """
    A, B, _, _ = model.y_blocks()
    Az, Bz, _, _ = model.z_blocks()
    V1, bad1 = _directions(model, theta.K, A, B, tau, parent_key, M, _K_LANE, "K", resample)
    V2, bad2 = _directions(model, theta.L, Az, Bz, tau, parent_key, M, _L_LANE, "L", resample)
    return V1, V2, bad1 + bad2


def _estimate(model, theta, cfg, parent_key, sampler):
    if not is_admissible(model, theta):
        raise AdmissibilityError(f"theta is outside the admissible set: {theta!r}")
    V1, V2, n_bad = perturbations(model, theta, cfg.tau, cfg.M, parent_key,
                                  cfg.perturbation_policy == "resample")
    keys = rng.child_keys(parent_key, cfg.M, _ROLLOUT_LANE)
    costs = sampler(theta.K + V1, theta.L + V2, keys)
    scale = cfg.scale_dim(model) / cfg.tau**2
    grad_K = scale * np.einsum("m,mij->ij", costs, V1) / cfg.M
    grad_L = scale * np.einsum("m,mij->ij", costs, V2) / cfg.M
    meta = {"M": cfg.M, "T": cfg.T, "tau": cfg.tau, "smoothing_dim": cfg.scale_dim(model),
            "inadmissible_directions": n_bad}
    return GradientEstimate(grad_K, grad_L, cfg.simulator, meta), costs


def estimate_gradient_mkv(model: MfcModel, theta: ControlParams, cfg: ZoConfig, key: int,
                          return_costs: bool = False):
    """Model-free gradient estimate from mean-field rollouts."""
    if cfg.simulator != "mkv":
        raise ConfigError("estimate_gradient_mkv needs simulator = 'mkv'")

    def sampler(Ks, Ls, keys):
        return mkv_costs(model, Ks, Ls, cfg.T, keys, num_threads=cfg.num_threads)

    est, costs = _estimate(model, theta, cfg, key, sampler)
    return (est, costs) if return_costs else est


def estimate_gradient_pop(model: MfcModel, popcfg: PopulationConfig, theta: ControlParams,
                          cfg: ZoConfig, key: int, return_costs: bool = False):
    """Model-free gradient estimate from N-agent rollouts; all agents share each perturbation."""
    if cfg.simulator != "pop":
        raise ConfigError("estimate_gradient_pop needs simulator = 'pop'")

    def sampler(Ks, Ls, keys):
        return pop_costs(model, popcfg, Ks, Ls, cfg.T, keys, num_threads=cfg.num_threads)

    est, costs = _estimate(model, theta, cfg, key, sampler)
    meta = dict(est.meta, N=popcfg.N)
    est = GradientEstimate(est.grad_K, est.grad_L, "pop", meta)
    return (est, costs) if return_costs else est


@dataclass(frozen=True)
class GD:
    eta: float

    name = "gd"

    def init(self, size):
        return None

    def step(self, state, grad, k):
        return self.eta * grad, state


@dataclass(frozen=True)
class Adam:
    eta: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    name = "adam"

    def init(self, size):
        return (np.zeros(size), np.zeros(size))

    def step(self, state, grad, k):
        """Bias-corrected Adam step for iteration k >= 1 (elementwise over K and L)."""
        m, v = state
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        mhat = m / (1.0 - self.beta1**k)
        vhat = v / (1.0 - self.beta2**k)
        return self.eta * mhat / (np.sqrt(vhat) + self.eps), (m, v)


@dataclass
class PopEvaluator:
    """Exact N-agent cost of the transplanted feedback, for trace columns."""

    popcfg: PopulationConfig
    c_star_N: float | None = None
    _stacked: object = field(default=None, repr=False)

    def __call__(self, model, theta):
        from .finite_agent import build_stacked, eval_social_cost, phi_from_theta, solve_n_agent_optimal

        if self._stacked is None:
            self._stacked = build_stacked(model, self.popcfg)
            if self.c_star_N is None:
                _, self.c_star_N = solve_n_agent_optimal(self._stacked, model.gamma)
        try:
            c = eval_social_cost(self._stacked, phi_from_theta(theta, self.popcfg.N), model.gamma)
        except AdmissibilityError:
            return math.inf, math.inf
        return c, relative_error(c, self.c_star_N)


def _record(model, k, theta, c_star, grad_norm, scale, pop_evals, evaluate):
    cost = rel = None
    pop_c, pop_r = {}, {}
    if evaluate:
        cost = exact_cost(model, theta).total
        rel = relative_error(cost, c_star) if c_star is not None else None
        for ev in pop_evals:
            pop_c[ev.popcfg.N], pop_r[ev.popcfg.N] = ev(model, theta)
    return TraceRecord(k, theta.K, theta.L, cost, rel, grad_norm, scale, pop_c, pop_r)


def pg_run(model: MfcModel, theta0: ControlParams, method: str, optimizer, k_max: int,
           cfg: ZoConfig | None = None, seed: int = 0, eps_stop: float = 0.0,
           c_star: float | None = None, eval_stride: int = 1, pop_evals=(), progress=None):
    """Policy-gradient loop with ``method`` in {exact, mkv, pop}.

    Model-free updates only use sampled costs; the model is used to record the
    exact cost and relative errors every ``eval_stride`` iterations and at the
    end.  A step that would leave the admissible set is halved up to 30 times.
    Exact gradients with plain GD delegate to ``analytic.exact_pg_run``, which
    records every iteration and also backtracks on cost increases.
    """
    if method not in ("exact", "mkv", "pop"):
        raise ConfigError(f"unknown method {method!r}")
    if not is_admissible(model, theta0):
        raise AdmissibilityError(f"initial theta is outside the admissible set: {theta0!r}")
    if method == "exact" and isinstance(optimizer, GD):
        trace = exact_pg_run(model, theta0, optimizer.eta, k_max, eps_stop, c_star)
        for rec in trace.records:
            theta = ControlParams(rec.K, rec.L)
            for ev in pop_evals:
                rec.pop_costs[ev.popcfg.N], rec.pop_rel_errors[ev.popcfg.N] = ev(model, theta)
        return trace
    if method != "exact":
        if cfg is None or cfg.simulator != method:
            raise ConfigError(f"method {method!r} needs a ZoConfig with simulator = {method!r}")
    if c_star is None:
        try:
            _, c_star = optimal_gains(model)
        except NumericsError:
            c_star = None
    trace = ConvergenceTrace(method, optimizer.name, meta={"seed": seed, "c_star": c_star})
    theta = theta0
    shape = theta.K.shape
    state = optimizer.init(2 * theta.K.size)
    trace.append(_record(model, 0, theta, c_star, None, 1.0, pop_evals, True))
    for k in range(1, k_max + 1):
        try:
            if method == "exact":
                est = exact_gradient(model, theta)
            elif method == "mkv":
                est = estimate_gradient_mkv(model, theta, cfg, rng.derive_key(seed, "pg", k))
            else:
                est = estimate_gradient_pop(model, cfg.population, theta, cfg,
                                            rng.derive_key(seed, "pg", k))
        except AdmissibilityError as exc:
            raise StepError(f"iteration {k}: {exc}", k, trace) from exc
        delta, state = optimizer.step(state, est.flat(), k)
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = ControlParams.from_flat(theta.flat() - scale * delta, shape)
            if is_admissible(model, cand):
                break
            scale *= 0.5
        else:
            raise StepError(f"no admissible step at iteration {k}", k, trace)
        theta = cand
        last = k == k_max
        rec = _record(model, k, theta, c_star, est.norm(), scale, pop_evals,
                      last or k % eval_stride == 0)
        trace.append(rec)
        if progress is not None:
            progress(rec)
        if rec.rel_error is not None and rec.rel_error <= eps_stop:
            break
    return trace


def gamma_theta(model: MfcModel, theta: ControlParams) -> float:
    """max(gamma, gamma ||A - BK||^2, gamma ||A + A_bar - (B + B_bar) L||^2)."""
    from .model import closed_loops

    fy, fz = closed_loops(model, theta)
    g = model.gamma
    return max(g, g * op_norm(fy) ** 2, g * op_norm(fz) ** 2)


def truncation_horizon(eps: float, gamma_theta: float, c0_var: float) -> int:
    """Rollout length after which the discounted covariance tail is below ``eps``.

    ceil((1/log(1/g) * (log(C0 / (eps (1-g)^2)) + 1))^2), floored at 2.  When
    the bracket is negative (eps very large) the floor applies.
    """
    if not 0.0 < gamma_theta < 1.0:
        raise AdmissibilityError(f"gamma_theta must lie in (0, 1), got {gamma_theta}")
    if not eps > 0 or not c0_var > 0:
        raise ValueError("eps and c0_var must be positive")
    inner = math.log(c0_var / (eps * (1.0 - gamma_theta) ** 2)) + 1.0
    if inner <= 0:
        return 2
    return max(2, math.ceil((inner / math.log(1.0 / gamma_theta)) ** 2))


def c0_var(model: MfcModel) -> float:
    """Largest operator norm among the four noise covariances (truncation-bound scale)."""
    nz = model.noise
    return max(op_norm(s) for s in (nz.sigma_y0, nz.sigma_z0, nz.sigma1, nz.sigma0))
