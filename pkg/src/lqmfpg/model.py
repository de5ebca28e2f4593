"""Mean-field LQ model: data types, assumption checks and admissibility."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import ModelValidationError

SYM_TOL = 1e-10
PSD_TOL = 1e-10

# base-variate codes shared with the rollout kernels
CODE_DEGENERATE = 0
CODE_UNIFORM = 1
CODE_GAUSSIAN = 2


def _as_matrix(x, name, shape=None) -> np.ndarray:
    m = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if m.ndim != 2:
        raise ModelValidationError(f"{name} must be a matrix, got shape {m.shape}")
    if shape is not None and m.shape != shape:
        raise ModelValidationError(f"{name} has shape {m.shape}, expected {shape}")
    m = m.copy()
    m.setflags(write=False)
    return m


def symmetrize(x, name: str = "matrix", tol: float = SYM_TOL) -> np.ndarray:
    """Return (X + X^T)/2, refusing inputs whose asymmetry exceeds ``tol``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != x.shape[1]:
        raise ModelValidationError(f"{name} must be square, got shape {x.shape}")
    asym = float(np.max(np.abs(x - x.T))) if x.size else 0.0
    if asym > tol:
        raise ModelValidationError(f"{name} is not symmetric (max |X - X^T| = {asym:.3g})")
    out = 0.5 * (x + x.T)
    out.setflags(write=False)
    return out


def lambda_min(x) -> float:
    return float(np.linalg.eigvalsh(x)[0])


def op_norm(x) -> float:
    """Operator (spectral) norm: the largest singular value."""
    x = np.atleast_2d(x)
    if x.shape == (1, 1):
        return abs(float(x[0, 0]))
    return float(np.linalg.norm(x, 2))


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Distribution of one noise source.

    ``loc``/``spread`` mean (mean, covariance) for gaussian, (lower, upper)
    bounds for uniform and (value, unused) for degenerate noise.  Uniform
    noise is independent across coordinates.
    """

    kind: str
    loc: np.ndarray
    spread: np.ndarray

    @classmethod
    def gaussian(cls, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64)).copy()
        cov = symmetrize(np.atleast_2d(np.asarray(cov, dtype=np.float64)), "gaussian covariance")
        if cov.shape != (mean.size, mean.size):
            raise ModelValidationError(
                f"gaussian covariance shape {cov.shape} does not match mean of size {mean.size}"
            )
        if lambda_min(cov) < -PSD_TOL:
            raise ModelValidationError(
                f"gaussian covariance is not psd (lambda_min = {lambda_min(cov):.3g})"
            )
        mean.setflags(write=False)
        return cls("gaussian", mean, cov)

    @classmethod
    def uniform(cls, low, high):
        low = np.atleast_1d(np.asarray(low, dtype=np.float64)).copy()
        high = np.atleast_1d(np.asarray(high, dtype=np.float64)).copy()
        if low.shape != high.shape:
            raise ModelValidationError("uniform bounds must have the same length")
        if np.any(low > high):
            raise ModelValidationError("uniform noise needs lower <= upper in every coordinate")
        low.setflags(write=False)
        high.setflags(write=False)
        return cls("uniform", low, high)

    @classmethod
    def degenerate(cls, value):
        value = np.atleast_1d(np.asarray(value, dtype=np.float64)).copy()
        value.setflags(write=False)
        return cls("degenerate", value, np.zeros_like(value))

    @classmethod
    def zero(cls, dim: int):
        return cls.degenerate(np.zeros(dim))

    @property
    def dim(self) -> int:
        return int(self.loc.size)

    @property
    def mean(self) -> np.ndarray:
        if self.kind == "uniform":
            return 0.5 * (self.loc + self.spread)
        return np.array(self.loc)

    @property
    def cov(self) -> np.ndarray:
        if self.kind == "gaussian":
            return np.array(self.spread)
        if self.kind == "uniform":
            return np.diag((self.spread - self.loc) ** 2 / 12.0)
        return np.zeros((self.dim, self.dim))

    @property
    def second_moment(self) -> np.ndarray:
        m = self.mean
        return self.cov + np.outer(m, m)

    def affine(self):
        """(code, offset, factor) such that a draw is ``offset + factor @ w``.

        ``w`` is a vector of independent base variates: U[0,1) for uniform,
        N(0,1) for gaussian, and nothing at all for degenerate noise.
        """
        d = self.dim
        if self.kind == "gaussian":
            return CODE_GAUSSIAN, np.array(self.loc), _psd_sqrt(self.spread)
        if self.kind == "uniform":
            return CODE_UNIFORM, np.array(self.loc), np.diag(self.spread - self.loc)
        return CODE_DEGENERATE, np.array(self.loc), np.zeros((d, d))

    def sample(self, key: int, n: int, first_slot: int = 0) -> np.ndarray:
        """``n`` i.i.d. draws of shape (n, dim) from the stream ``key``.

        Draw ``j`` coordinate ``c`` consumes base slot ``first_slot + j*dim + c``.
        """
        code, offset, factor = self.affine()
        if code == CODE_DEGENERATE:
            return np.broadcast_to(offset, (n, self.dim)).copy()
        slots = first_slot + np.arange(n * self.dim, dtype=np.uint64)
        base = rng.normal(key, slots) if code == CODE_GAUSSIAN else rng.uniform(key, slots)
        return offset + base.reshape(n, self.dim) @ factor.T


@dataclass(frozen=True, eq=False)
class NoiseSuite:
    """Initial and per-step distributions of the common (0) and idiosyncratic (1) noise."""

    eps0_init: NoiseSpec
    eps1_init: NoiseSpec
    eps0_step: NoiseSpec
    eps1_step: NoiseSpec

    def __post_init__(self):
        dims = {s.dim for s in self.specs()}
        if len(dims) != 1:
            raise ModelValidationError(f"noise specs have inconsistent dimensions {sorted(dims)}")
        for name in ("eps0_step", "eps1_step"):
            if np.any(getattr(self, name).mean != 0.0):
                raise ModelValidationError(f"{name} must have mean exactly zero")

    def specs(self):
        return (self.eps0_init, self.eps1_init, self.eps0_step, self.eps1_step)

    @property
    def dim(self) -> int:
        return self.eps0_init.dim

    @property
    def sigma_y0(self) -> np.ndarray:
        return self.eps1_init.cov

    @property
    def sigma_z0(self) -> np.ndarray:
        return self.eps0_init.cov

    @property
    def sigma1(self) -> np.ndarray:
        return self.eps1_step.cov

    @property
    def sigma0(self) -> np.ndarray:
        return self.eps0_step.cov

    @property
    def z0_mean(self) -> np.ndarray:
        return self.eps0_init.mean + self.eps1_init.mean

    @property
    def m_y0(self) -> np.ndarray:
        """E[y0 y0^T]; y0 is centred so this is the covariance of eps1_init."""
        return self.sigma_y0

    @property
    def m_z0(self) -> np.ndarray:
        """E[z0 z0^T] including the squared initial mean."""
        mu = self.z0_mean
        return self.sigma_z0 + np.outer(mu, mu)

    def kernel_arrays(self):
        """Stacked (codes, offsets, factors) in the order init0, init1, step0, step1."""
        parts = [s.affine() for s in self.specs()]
        codes = np.array([p[0] for p in parts], dtype=np.int64)
        offsets = np.stack([p[1] for p in parts])
        factors = np.stack([p[2] for p in parts])
        return codes, offsets, factors


@dataclass(frozen=True, eq=False)
class MfcModel:
    A: np.ndarray
    A_bar: np.ndarray
    B: np.ndarray
    B_bar: np.ndarray
    Q: np.ndarray
    Q_bar: np.ndarray
    R: np.ndarray
    R_bar: np.ndarray
    gamma: float
    noise: NoiseSuite

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        d = A.shape[0]
        if A.shape != (d, d):
            raise ModelValidationError(f"A must be square, got {A.shape}")
        B = _as_matrix(self.B, "B")
        if B.shape[0] != d:
            raise ModelValidationError(f"B has {B.shape[0]} rows, expected {d}")
        ell = B.shape[1]
        set_ = object.__setattr__
        set_(self, "A", A)
        set_(self, "A_bar", _as_matrix(self.A_bar, "A_bar", (d, d)))
        set_(self, "B", B)
        set_(self, "B_bar", _as_matrix(self.B_bar, "B_bar", (d, ell)))
        set_(self, "Q", symmetrize(_as_matrix(self.Q, "Q", (d, d)), "Q"))
        set_(self, "Q_bar", symmetrize(_as_matrix(self.Q_bar, "Q_bar", (d, d)), "Q_bar"))
        set_(self, "R", symmetrize(_as_matrix(self.R, "R", (ell, ell)), "R"))
        set_(self, "R_bar", symmetrize(_as_matrix(self.R_bar, "R_bar", (ell, ell)), "R_bar"))
        gamma = float(self.gamma)
        if not 0.0 <= gamma < 1.0:
            raise ModelValidationError(f"gamma must lie in [0, 1), got {gamma}")
        set_(self, "gamma", gamma)
        if self.noise.dim != d:
            raise ModelValidationError(f"noise dimension {self.noise.dim} != state dimension {d}")

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def ell(self) -> int:
        return self.B.shape[1]

    # blocks of the reparametrised (y, z) problem
    def y_blocks(self):
        return self.A, self.B, self.Q, self.R

    def z_blocks(self):
        return self.A + self.A_bar, self.B + self.B_bar, self.Q + self.Q_bar, self.R + self.R_bar


@dataclass(frozen=True, eq=False)
class ControlParams:
    """Feedback pair theta = (K, L): u = -K (x - xbar) - L xbar."""

    K: np.ndarray
    L: np.ndarray

    def __post_init__(self):
        K = np.atleast_2d(np.asarray(self.K, dtype=np.float64)).copy()
        L = np.atleast_2d(np.asarray(self.L, dtype=np.float64)).copy()
        if K.shape != L.shape:
            raise ModelValidationError(f"K {K.shape} and L {L.shape} must have the same shape")
        K.setflags(write=False)
        L.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "L", L)

    @classmethod
    def zeros(cls, model: MfcModel):
        return cls(np.zeros((model.ell, model.d)), np.zeros((model.ell, model.d)))

    def check_dims(self, model: MfcModel):
        if self.K.shape != (model.ell, model.d):
            raise ModelValidationError(
                f"theta has blocks of shape {self.K.shape}, model needs {(model.ell, model.d)}"
            )

    def flat(self) -> np.ndarray:
        return np.concatenate([self.K.ravel(), self.L.ravel()])

    @classmethod
    def from_flat(cls, vec, shape):
        n = shape[0] * shape[1]
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:n].reshape(shape), vec[n:].reshape(shape))

    def __repr__(self):
        return f"ControlParams(K={self.K.tolist()}, L={self.L.tolist()})"


@dataclass
class AssumptionCheck:
    name: str
    passed: bool
    detail: str
    eigenvalues: dict = field(default_factory=dict)


@dataclass
class ValidationReport:
    checks: list

    @property
    def usable(self) -> bool:
        """The psd-cost check is binding; noise non-degeneracy only warns."""
        return all(c.passed for c in self.checks if c.name == "cost_psd")

    @property
    def warnings(self):
        return [c for c in self.checks if not c.passed and c.name != "cost_psd"]

    def lines(self):
        out = []
        for c in self.checks:
            status = "PASS" if c.passed else ("FAIL" if c.name == "cost_psd" else "WARN")
            out.append(f"[{status}] {c.name}: {c.detail}")
        return out

    def __str__(self):
        return "\n".join(self.lines())


def validate_model(model: MfcModel) -> ValidationReport:
    """Check the psd-cost and noise non-degeneracy assumptions.

    Asymmetric cost matrices are already rejected when the model is built.
    """
    eig = {
        "Q": lambda_min(model.Q),
        "Q+Q_bar": lambda_min(model.Q + model.Q_bar),
        "R": lambda_min(model.R),
        "R+R_bar": lambda_min(model.R + model.R_bar),
    }
    bad = {k: v for k, v in eig.items() if v < -PSD_TOL}
    if bad:
        detail = "not psd: " + ", ".join(f"lambda_min({k}) = {v:.6g}" for k, v in bad.items())
    else:
        detail = "Q, Q+Q_bar, R, R+R_bar are psd"
    checks = [AssumptionCheck("cost_psd", not bad, detail, eig)]

    nz = model.noise
    lam = {
        "Sigma_y0": lambda_min(nz.sigma_y0),
        "Sigma1": lambda_min(nz.sigma1),
        "Sigma_z0": lambda_min(nz.sigma_z0),
        "Sigma0": lambda_min(nz.sigma0),
    }
    y_ok = max(lam["Sigma_y0"], lam["Sigma1"]) > 0.0
    z_ok = max(lam["Sigma_z0"], lam["Sigma0"]) > 0.0
    checks.append(
        AssumptionCheck(
            "noise_nondegenerate_y",
            y_ok,
            f"max(lambda_min(Sigma_y0), lambda_min(Sigma1)) = {max(lam['Sigma_y0'], lam['Sigma1']):.6g}",
            {k: lam[k] for k in ("Sigma_y0", "Sigma1")},
        )
    )
    checks.append(
        AssumptionCheck(
            "noise_nondegenerate_z",
            z_ok,
            f"max(lambda_min(Sigma_z0), lambda_min(Sigma0)) = {max(lam['Sigma_z0'], lam['Sigma0']):.6g}",
            {k: lam[k] for k in ("Sigma_z0", "Sigma0")},
        )
    )
    return ValidationReport(checks)


def closed_loops(model: MfcModel, theta: ControlParams):
    """(A - B K, A + A_bar - (B + B_bar) L)."""
    return model.A - model.B @ theta.K, model.A + model.A_bar - (model.B + model.B_bar) @ theta.L


def contraction_factors(model: MfcModel, theta: ControlParams):
    """(gamma ||A - BK||^2, gamma ||A + A_bar - (B + B_bar)L||^2)."""
    fy, fz = closed_loops(model, theta)
    return model.gamma * op_norm(fy) ** 2, model.gamma * op_norm(fz) ** 2


def is_admissible(model: MfcModel, theta: ControlParams) -> bool:
    """Strict membership in Theta; the boundary counts as inadmissible."""
    theta.check_dims(model)
    cy, cz = contraction_factors(model, theta)
    return cy < 1.0 and cz < 1.0


def k_block_admissible(model: MfcModel, K) -> bool:
    return model.gamma * op_norm(model.A - model.B @ K) ** 2 < 1.0


def l_block_admissible(model: MfcModel, L) -> bool:
    return model.gamma * op_norm(model.A + model.A_bar - (model.B + model.B_bar) @ L) ** 2 < 1.0


@dataclass(frozen=True, eq=False)
class AugmentedSystem:
    bA: np.ndarray
    bB: np.ndarray
    bQ: np.ndarray
    bR: np.ndarray
    bK: np.ndarray
    Gamma_theta: np.ndarray


def block_diag2(a, b) -> np.ndarray:
    out = np.zeros((a.shape[0] + b.shape[0], a.shape[1] + b.shape[1]))
    out[: a.shape[0], : a.shape[1]] = a
    out[a.shape[0]:, a.shape[1]:] = b
    return out


def augment(model: MfcModel, theta: ControlParams) -> AugmentedSystem:
    theta.check_dims(model)
    bA = block_diag2(model.A, model.A + model.A_bar)
    # bA - bB bK must reproduce both closed loops, so the z block is B + B_bar
    bB = block_diag2(model.B, model.B + model.B_bar)
    bQ = block_diag2(model.Q, model.Q + model.Q_bar)
    bR = block_diag2(model.R, model.R + model.R_bar)
    bK = block_diag2(theta.K, theta.L)
    gamma_theta = bQ + bK.T @ bR @ bK
    return AugmentedSystem(bA, bB, bQ, bR, bK, 0.5 * (gamma_theta + gamma_theta.T))


def table1_model(gaussian_scale: str = "variance") -> MfcModel:
    """The 1-D benchmark model (all coefficients 0.5, gamma = 0.9).

    Initial noises are U([-1, 1]); step noises are N(0, 0.01) where 0.01 is a
    variance by default and a standard deviation with ``gaussian_scale="std"``.
    """
    if gaussian_scale == "variance":
        var = 0.01
    elif gaussian_scale == "std":
        var = 0.01**2
    else:
        raise ValueError(f"gaussian_scale must be 'variance' or 'std', got {gaussian_scale!r}")
    noise = NoiseSuite(
        eps0_init=NoiseSpec.uniform([-1.0], [1.0]),
        eps1_init=NoiseSpec.uniform([-1.0], [1.0]),
        eps0_step=NoiseSpec.gaussian([0.0], [[var]]),
        eps1_step=NoiseSpec.gaussian([0.0], [[var]]),
    )
    h = [[0.5]]
    return MfcModel(h, h, h, h, h, h, h, h, 0.9, noise)
