import numpy as np
import pytest

from lqmfpg.model import ControlParams, MfcModel, NoiseSpec, NoiseSuite, is_admissible, table1_model


@pytest.fixture
def table1():
    return table1_model()


def scalar_model(a=0.5, abar=0.0, b=0.0, bbar=0.0, q=1.0, qbar=0.0, r=1.0, rbar=0.0, gamma=0.9,
                 init0=None, init1=None, step0=0.0, step1=0.0):
    """1-D model; ``init*`` are NoiseSpecs (default zero), ``step*`` variances."""
    def step(var):
        return NoiseSpec.gaussian([0.0], [[var]]) if var > 0 else NoiseSpec.zero(1)

    noise = NoiseSuite(
        init0 or NoiseSpec.zero(1), init1 or NoiseSpec.zero(1), step(step0), step(step1)
    )
    return MfcModel([[a]], [[abar]], [[b]], [[bbar]], [[q]], [[qbar]], [[r]], [[rbar]], gamma, noise)


def random_psd(rng, n, floor=0.1):
    X = rng.standard_normal((n, n))
    return X @ X.T / n + floor * np.eye(n)


def random_model(rng, d, ell, gamma=None):
    """Random model whose zero feedback is admissible."""
    gamma = rng.uniform(0.5, 0.95) if gamma is None else gamma
    A = rng.standard_normal((d, d))
    A *= 0.6 / (np.sqrt(gamma) * np.linalg.norm(A, 2))
    Abar = rng.standard_normal((d, d))
    Abar *= 0.3 / (np.sqrt(gamma) * np.linalg.norm(Abar, 2))
    noise = NoiseSuite(
        NoiseSpec.gaussian(rng.standard_normal(d) * 0.3, random_psd(rng, d)),
        NoiseSpec.uniform(-np.ones(d) - rng.uniform(0, 1, d), np.ones(d)),
        NoiseSpec.gaussian(np.zeros(d), 0.1 * random_psd(rng, d)),
        NoiseSpec.gaussian(np.zeros(d), 0.1 * random_psd(rng, d)),
    )
    return MfcModel(
        A, Abar, rng.standard_normal((d, ell)), 0.5 * rng.standard_normal((d, ell)),
        random_psd(rng, d), 0.5 * random_psd(rng, d, 0.0), random_psd(rng, ell),
        0.5 * random_psd(rng, ell, 0.0), gamma, noise,
    )


def random_admissible_theta(rng, model, scale=0.3, tries=1000):
    for _ in range(tries):
        th = ControlParams(scale * rng.standard_normal((model.ell, model.d)),
                           scale * rng.standard_normal((model.ell, model.d)))
        if is_admissible(model, th):
            return th
    raise RuntimeError("no admissible theta found")


ACCEPTANCE_LINES = []


def record_acceptance(number, ok, detail):
    """Log one PASS/FAIL line for an acceptance criterion (also echoed at session end)."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
