"""Rollout engines: the mean-field simulator over the decoupled (y, z) system and
the N-agent population simulator.

Randomness is addressed by stream keys (see ``rng``); a rollout is a pure
function of its inputs and key.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels, rng
from .errors import AdmissibilityError, ModelValidationError
from .model import ControlParams, MfcModel, is_admissible, lambda_min, op_norm


@dataclass(frozen=True, eq=False)
class PopulationConfig:
    """N agents sharing the dynamics; agent n has state cost Q + q_variations[n]."""

    N: int
    h_tilde: float
    q_variations: np.ndarray
    variation_seed: int | None = None

    def __post_init__(self):
        if int(self.N) < 1:
            raise ModelValidationError(f"population size must be >= 1, got {self.N}")
        if self.h_tilde < 0:
            raise ModelValidationError("heterogeneity radius must be >= 0")
        qv = np.asarray(self.q_variations, dtype=np.float64)
        if qv.ndim != 3 or qv.shape[0] != self.N or qv.shape[1] != qv.shape[2]:
            raise ModelValidationError(
                f"q_variations must have shape ({self.N}, d, d), got {qv.shape}"
            )
        for n, q in enumerate(qv):
            if np.max(np.abs(q - q.T)) > 1e-12:
                raise ModelValidationError(f"q_variations[{n}] is not symmetric")
            if op_norm(q) > self.h_tilde * (1 + 1e-12):
                raise ModelValidationError(
                    f"||q_variations[{n}]|| = {op_norm(q):.3g} exceeds h_tilde = {self.h_tilde}"
                )
        qv = qv.copy()
        qv.setflags(write=False)
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "q_variations", qv)

    @classmethod
    def homogeneous(cls, model: MfcModel, N: int):
        return cls(N, 0.0, np.zeros((N, model.d, model.d)))

    @classmethod
    def draw(cls, model: MfcModel, N: int, h_tilde: float, seed: int):
        return cls(N, h_tilde, draw_q_variations(model, N, h_tilde, seed), seed)

    def agent_costs(self, model: MfcModel) -> np.ndarray:
        """Per-agent state-cost matrices Q^n, shape (N, d, d)."""
        return model.Q[None] + self.q_variations

    def check(self, model: MfcModel):
        if self.q_variations.shape[1] != model.d:
            raise ModelValidationError(
                f"q_variations are {self.q_variations.shape[1]}x{self.q_variations.shape[1]}, "
                f"model state dimension is {model.d}"
            )


@dataclass(frozen=True)
class CostSample:
    value: float
    T: int
    kind: str
    stream_id: int


def heterogeneity_limit(model: MfcModel) -> float:
    return min(lambda_min(model.Q), lambda_min(model.Q + model.Q_bar))


def draw_q_variations(model: MfcModel, N: int, h_tilde: float, seed: int) -> np.ndarray:
    """Frozen per-agent perturbations of Q with operator norm at most ``h_tilde``.

    For d = 1 these are uniform on (-h_tilde, h_tilde).  For d > 1 each is a
    symmetric matrix with i.i.d. U(-1, 1) upper-triangle entries, scaled by
    h_tilde / max(1, ||S||).
    """
    limit = heterogeneity_limit(model)
    if h_tilde < 0:
        raise ModelValidationError("heterogeneity radius must be >= 0")
    if h_tilde > limit + 1e-15:
        raise ModelValidationError(
            f"h_tilde = {h_tilde} exceeds min(lambda_min(Q), lambda_min(Q + Q_bar)) = {limit:.6g}"
        )
    d = model.d
    key = rng.derive_key(seed, "qvar", N)
    if h_tilde == 0.0:
        return np.zeros((N, d, d))
    if d == 1:
        u = rng.uniform(key, np.arange(N, dtype=np.uint64))
        return (h_tilde * (2.0 * u - 1.0)).reshape(N, 1, 1)
    iu = np.triu_indices(d)
    width = len(iu[0])
    u = rng.uniform(key, np.arange(N * width, dtype=np.uint64)).reshape(N, width)
    out = np.zeros((N, d, d))
    for n in range(N):
        S = np.zeros((d, d))
        S[iu] = 2.0 * u[n] - 1.0
        S = S + np.triu(S, 1).T
        out[n] = h_tilde * S / max(1.0, op_norm(S))
    return out


def _check_horizon(T):
    if int(T) < 1:
        raise ValueError(f"empty horizon: T must be >= 1, got {T}")
    return int(T)


def mkv_costs(model: MfcModel, Ks, Ls, T: int, keys, num_threads: int = 1, impl=None) -> np.ndarray:
    """Sampled truncated costs C^T_y(K_i) + C^T_z(L_i), one rollout per key."""
    T = _check_horizon(T)
    Ks = np.asarray(Ks, dtype=np.float64)
    Ls = np.asarray(Ls, dtype=np.float64)
    A, B, Q, R = model.y_blocks()
    Az, Bz, Qz, Rz = model.z_blocks()
    Fy = A - np.einsum("ij,mjk->mik", B, Ks)
    Fz = Az - np.einsum("ij,mjk->mik", Bz, Ls)
    Gy = Q + np.einsum("mji,jk,mkl->mil", Ks, R, Ks)
    Gz = Qz + np.einsum("mji,jk,mkl->mil", Ls, Rz, Ls)
    codes, offsets, factors = model.noise.kernel_arrays()
    return kernels.mkv_costs(
        Fy, Fz, Gy, Gz, codes, offsets, factors, model.noise.eps1_init.mean, model.gamma, T,
        keys, num_threads=num_threads, impl=impl,
    )


def pop_costs(model: MfcModel, popcfg: PopulationConfig, Ks, Ls, T: int, keys,
              num_threads: int = 1, impl=None) -> np.ndarray:
    """Sampled truncated social costs of N agents all playing (K_i, L_i)."""
    T = _check_horizon(T)
    popcfg.check(model)
    codes, offsets, factors = model.noise.kernel_arrays()
    return kernels.pop_costs(
        model.A, model.A_bar, model.B, model.B_bar, np.asarray(Ks, float), np.asarray(Ls, float),
        popcfg.agent_costs(model), model.Q_bar, model.R, model.R_bar, codes, offsets, factors,
        model.gamma, T, keys, num_threads=num_threads, impl=impl,
    )


def _single(theta: ControlParams, model: MfcModel):
    if not is_admissible(model, theta):
        raise AdmissibilityError(f"theta is outside the admissible set: {theta!r}")
    return theta.K[None], theta.L[None]


def mkv_rollout(model: MfcModel, theta: ControlParams, T: int, key: int) -> CostSample:
    Ks, Ls = _single(theta, model)
    value = mkv_costs(model, Ks, Ls, T, np.array([key], dtype=np.uint64))[0]
    return CostSample(float(value), int(T), "mkv", int(key))


def pop_rollout(model: MfcModel, popcfg: PopulationConfig, theta: ControlParams, T: int,
                key: int) -> CostSample:
    Ks, Ls = _single(theta, model)
    value = pop_costs(model, popcfg, Ks, Ls, T, np.array([key], dtype=np.uint64))[0]
    return CostSample(float(value), int(T), "pop", int(key))


@dataclass(frozen=True)
class MomentEstimate:
    value: np.ndarray
    stderr: np.ndarray


def _cov_with_se(samples: np.ndarray) -> MomentEstimate:
    """Sample covariance (mean removed) and the standard error of each entry."""
    x = samples - samples.mean(axis=0)
    n = x.shape[0]
    prods = x[:, :, None] * x[:, None, :]
    return MomentEstimate(prods.mean(axis=0), prods.std(axis=0, ddof=1) / np.sqrt(n))


def population_noise_moments(model: MfcModel, N: int, n_draws: int, seed: int) -> dict:
    """Empirical covariances of the noises seen by agent 1 through the empirical mean.

    Returns estimates keyed by ``y0`` (eps1_0 of agent 1 minus the population
    average), ``mu0`` (eps0_0 plus the average of eps1_0), ``idio`` (eps1_1 of
    agent 1 minus the average) and ``common`` (eps0_1 plus the average of eps1_1).
    """
    d = model.d
    nz = model.noise
    out = {}
    for label, common_spec, idio_spec in (
        ("init", nz.eps0_init, nz.eps1_init),
        ("step", nz.eps0_step, nz.eps1_step),
    ):
        e0 = common_spec.sample(rng.derive_key(seed, "moments", label, "common"), n_draws)
        e1 = idio_spec.sample(rng.derive_key(seed, "moments", label, "idio"), n_draws * N)
        e1 = e1.reshape(n_draws, N, d)
        avg = e1.mean(axis=1)
        dev = _cov_with_se(e1[:, 0, :] - avg)
        agg = _cov_with_se(e0 + avg)
        if label == "init":
            out["y0"], out["mu0"] = dev, agg
        else:
            out["idio"], out["common"] = dev, agg
    return out


def population_noise_targets(model: MfcModel, N: int) -> dict:
    """Closed-form values of the moments returned by ``population_noise_moments``."""
    nz = model.noise
    return {
        "y0": (1.0 - 1.0 / N) * nz.sigma_y0,
        "mu0": nz.sigma_z0 + nz.sigma_y0 / N,
        "idio": (1.0 - 1.0 / N) * nz.sigma1,
        "common": nz.sigma0 + nz.sigma1 / N,
    }
