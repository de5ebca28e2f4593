"""Counter-based random streams.

Every random number is a pure function of ``(key, counter)``: a stream key is
derived by hashing the master seed together with a path of labels such as
``("pg", k, "rollout", i)``, and the value at a given counter is a SplitMix64
output.  Nothing is carried between calls, so batches can be evaluated in any
order (or in parallel) and still agree bit for bit.

The compiled kernels re-implement ``hash64``/``uniform``/``normal`` with the
same integer arithmetic; the numpy versions here are the reference.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_POW_M53 = 1.0 / 9007199254740992.0
_TWO_POW_M52 = 1.0 / 4503599627370496.0


def derive_key(seed: int, *path) -> int:
    """Hash ``seed`` and a label path into a 64-bit stream key."""
    h = hashlib.blake2b(digest_size=8, person=b"lqmfpg-v1")
    h.update(struct.pack("<Q", int(seed) & 0xFFFFFFFFFFFFFFFF))
    for part in path:
        if isinstance(part, (int, np.integer)):
            h.update(b"i" + struct.pack("<q", int(part)))
        else:
            raw = str(part).encode()
            h.update(b"s" + struct.pack("<I", len(raw)) + raw)
    return int.from_bytes(h.digest(), "little")


def derive_keys(seed: int, *path, count: int) -> np.ndarray:
    """Keys for ``path + (0,)``, ..., ``path + (count - 1,)`` as a uint64 array."""
    return np.array([derive_key(seed, *path, i) for i in range(count)], dtype=np.uint64)


def hash64(key, counter) -> np.ndarray:
    """SplitMix64 output number ``counter`` of the stream seeded by ``key``."""
    key = np.asarray(key, dtype=np.uint64)
    counter = np.asarray(counter, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = key + (counter + np.uint64(1)) * GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def uniform(key, slot) -> np.ndarray:
    """Uniform variate on [0, 1) for scalar slot ``slot``."""
    slot = np.asarray(slot, dtype=np.uint64)
    bits = hash64(key, slot * np.uint64(2))
    return (bits >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53


# Wichura's AS241 (PPND16) rational approximations to the normal quantile,
# accurate to about 1e-16 relative.
_A = (3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
      1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4, 2.5090809287301226727e3)
_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
      2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
      5.2264952788528545610e3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
      3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
      1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
      2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
      7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
      2.04426310338993978564e-15)


def _horner(coef, x):
    acc = coef[7]
    for c in coef[6::-1]:
        acc = acc * x + c
    return acc


def normal_quantile(p) -> np.ndarray:
    """Inverse standard normal CDF for p in (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    q = p - 0.5
    central = np.abs(q) <= 0.425
    out = np.empty_like(p)
    qc = q[central]
    r = 0.180625 - qc * qc
    out[central] = qc * _horner(_A, r) / _horner(_B, r)
    tail = ~central
    pt = p[tail]
    r = np.sqrt(-np.log(np.where(q[tail] < 0.0, pt, 1.0 - pt)))
    near = r <= 5.0
    rn = r - 1.6
    rf = r - 5.0
    val = np.where(near, _horner(_C, rn) / _horner(_D, rn), _horner(_E, rf) / _horner(_F, rf))
    out[tail] = np.where(q[tail] < 0.0, -val, val)
    return out


def open_uniform(key, slot) -> np.ndarray:
    """Uniform variate on the open interval (0, 1): (k + 1/2) / 2**52."""
    slot = np.asarray(slot, dtype=np.uint64)
    bits = hash64(key, slot * np.uint64(2)) >> np.uint64(12)
    return (bits.astype(np.float64) + 0.5) * _TWO_POW_M52


def normal(key, slot) -> np.ndarray:
    """Standard normal variate for scalar slot ``slot`` (inverse-CDF method)."""
    return normal_quantile(open_uniform(key, slot))


def child_keys(key, count: int, lane: int, lanes: int = 64) -> np.ndarray:
    """Keys ``hash64(key, i * lanes + lane)`` for i < count.

    Cheap per-item streams under one parent key; distinct (i, lane) pairs
    give distinct counters and hence distinct keys.
    """
    if not 0 <= lane < lanes:
        raise ValueError(f"lane {lane} outside [0, {lanes})")
    idx = np.arange(count, dtype=np.uint64) * np.uint64(lanes) + np.uint64(lane)
    return hash64(np.uint64(key), idx)
