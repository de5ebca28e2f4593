"""Pure numpy rollout kernels (fallback for the compiled ``_kernels_c``).

Both backends share one noise layout.  Within the stream of rollout ``i``,
time ``t`` owns the base slots ``[t*(N+1)*d, (t+1)*(N+1)*d)``: the first ``d``
carry the common noise, then agent ``n`` uses ``d*(n+1) + c``.  The MKV kernel
uses the layout with N = 1, so an MKV rollout and a one-agent population
rollout see the same noise realisation.

Noise order in ``codes``/``offsets``/``factors``: eps0_init, eps1_init,
eps0_step, eps1_step.
"""

import numpy as np

from . import rng

BACKEND = "python"


def _draw(code, offset, factor, keys, slots):
    """Noise vectors for every rollout: shape (M, len(slots) // d, d)."""
    M = keys.shape[0]
    d = offset.shape[0]
    if code == 0:
        return np.broadcast_to(offset, (M, slots.size // d, d))
    if code == 2:
        w = rng.normal(keys[:, None], slots[None, :])
    else:
        w = rng.uniform(keys[:, None], slots[None, :])
    w = w.reshape(M, -1, d)
    return offset + w @ factor.T


def mkv_costs(Fy, Fz, Gy, Gz, codes, offsets, factors, y0_shift, gamma, T, keys, num_threads=1):
    """Discounted (y, z) costs of ``M`` rollouts with per-rollout closed loops.

    ``Fy[i] = A - B K_i``, ``Gy[i] = Q + K_i^T R K_i`` and likewise for z.
    """
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    M = keys.shape[0]
    d = offsets.shape[1]
    stride = 2 * d
    common = np.arange(d, dtype=np.uint64)
    agent = np.arange(d, 2 * d, dtype=np.uint64)

    y = _draw(codes[1], offsets[1], factors[1], keys, agent)[:, 0, :] - y0_shift
    z = _draw(codes[0], offsets[0], factors[0], keys, common)[:, 0, :] + y0_shift
    total = np.zeros(M)
    disc = 1.0
    for t in range(T):
        total += disc * (
            np.einsum("mi,mij,mj->m", y, Gy, y) + np.einsum("mi,mij,mj->m", z, Gz, z)
        )
        if t == T - 1:
            break
        base = np.uint64((t + 1) * stride)
        e1 = _draw(codes[3], offsets[3], factors[3], keys, base + agent)[:, 0, :]
        e0 = _draw(codes[2], offsets[2], factors[2], keys, base + common)[:, 0, :]
        y = np.einsum("mij,mj->mi", Fy, y) + e1
        z = np.einsum("mij,mj->mi", Fz, z) + e0
        disc *= gamma
    return total


def pop_costs(A, Abar, B, Bbar, K, L, Qn, Qbar, R, Rbar, codes, offsets, factors, gamma, T, keys,
              num_threads=1):
    """Discounted social costs of ``M`` population rollouts.

    Every agent of rollout ``i`` plays u = -K_i (x - xbar) - L_i xbar with the
    empirical mean xbar; ``Qn`` holds the per-agent state-cost matrices.
    """
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    M = keys.shape[0]
    N, d = Qn.shape[0], Qn.shape[1]
    stride = (N + 1) * d
    common = np.arange(d, dtype=np.uint64)
    agents = np.arange(d, (N + 1) * d, dtype=np.uint64)
    QnQbar = Qn + Qbar
    RRbar = R + Rbar

    X = _draw(codes[0], offsets[0], factors[0], keys, common) + _draw(
        codes[1], offsets[1], factors[1], keys, agents
    )
    total = np.zeros(M)
    disc = 1.0
    for t in range(T):
        xbar = X.mean(axis=1)
        dev = X - xbar[:, None, :]
        U = -np.einsum("mij,mnj->mni", K, dev) - np.einsum("mij,mj->mi", L, xbar)[:, None, :]
        ubar = U.mean(axis=1)
        du = U - ubar[:, None, :]
        c = (
            np.einsum("mni,nij,mnj->m", dev, Qn, dev)
            + np.einsum("mi,nij,mj->m", xbar, QnQbar, xbar)
            + np.einsum("mni,ij,mnj->m", du, R, du)
            + N * np.einsum("mi,ij,mj->m", ubar, RRbar, ubar)
        ) / N
        total += disc * c
        if t == T - 1:
            break
        base = np.uint64((t + 1) * stride)
        e0 = _draw(codes[2], offsets[2], factors[2], keys, base + common)
        e1 = _draw(codes[3], offsets[3], factors[3], keys, base + agents)
        X = (
            X @ A.T
            + (xbar @ Abar.T)[:, None, :]
            + U @ B.T
            + (ubar @ Bbar.T)[:, None, :]
            + e0
            + e1
        )
        disc *= gamma
    return total
