"""Counter-based Gaussian source keyed by ``(seed, stream, path, step)``.

Philox-4x32-10 maps a 128-bit counter and 64-bit key to four 32-bit words.
The counter is ``(step // 2, path_lo, path_hi, stream)`` and the key is the
64-bit seed, so every increment is addressable without generator state and
results do not depend on the order in which paths are processed.  Each
Philox block yields two uniforms, consumed by steps ``2k`` and ``2k + 1``;
uniforms become normals through Wichura's AS241 inverse CDF.

The same functions run on numpy ``uint64`` arrays (vectorised over paths)
and, compiled, on scalars inside numba kernels.
"""

from __future__ import annotations

import math

import numpy as np

from ._accel import njit

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S5 = np.uint64(5)
_S6 = np.uint64(6)


def _philox_py(c0, c1, c2, c3, k0, k1):
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> _S32
        lo0 = p0 & _MASK
        hi1 = p1 >> _S32
        lo1 = p1 & _MASK
        c0 = (hi1 ^ c1 ^ k0) & _MASK
        c1 = lo1
        c2 = (hi0 ^ c3 ^ k1) & _MASK
        c3 = lo0
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


def philox4x32(counter, key):
    """Philox-4x32-10 on ``counter=(c0..c3)``, ``key=(k0, k1)``; 32-bit words."""
    c = [np.asarray(v, dtype=np.uint64) for v in counter]
    k = [np.asarray(v, dtype=np.uint64) for v in key]
    return _philox_py(c[0], c[1], c[2], c[3], k[0], k[1])


# Wichura (1988), algorithm AS241 PPND16.
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


def _poly(c, r):
    return (((((((c[7] * r + c[6]) * r + c[5]) * r + c[4]) * r + c[3]) * r + c[2]) * r + c[1]) * r
            + c[0])


_poly_nb = njit(cache=True)(_poly)


@njit(cache=True)
def _ppnd_scalar(p):
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly_nb(_A, r) / _poly_nb(_B, r)
    r = p if q < 0.0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        val = _poly_nb(_C, r) / _poly_nb(_D, r)
    else:
        r -= 5.0
        val = _poly_nb(_E, r) / _poly_nb(_F, r)
    return -val if q < 0.0 else val


def inverse_normal_cdf(p):
    """Standard normal quantile for ``0 < p < 1`` (scalar or array)."""
    p = np.asarray(p, dtype=float)
    q = p - 0.5
    out = np.empty_like(p)
    central = np.abs(q) <= 0.425
    r = 0.180625 - q[central] ** 2
    out[central] = q[central] * _poly(_A, r) / _poly(_B, r)
    tail = ~central
    r = np.where(q[tail] < 0.0, p[tail], 1.0 - p[tail])
    r = np.sqrt(-np.log(r))
    near = r <= 5.0
    val = np.where(
        near,
        _poly(_C, r - 1.6) / _poly(_D, r - 1.6),
        _poly(_E, r - 5.0) / _poly(_F, r - 5.0),
    )
    out[tail] = np.where(q[tail] < 0.0, -val, val)
    return out if out.ndim else float(out)


def _uniform53(a, b):
    return ((a >> _S5).astype(np.float64) * 67108864.0 + (b >> _S6).astype(np.float64) + 0.5) \
        * (1.0 / 9007199254740992.0)


def normal_pair(seed, stream, path, pair):
    """Two independent normals for steps ``2*pair`` and ``2*pair + 1``.

    ``path`` and ``pair`` may be arrays; returns two float arrays.
    """
    seed = int(seed)
    path = np.asarray(path, dtype=np.uint64)
    pair = np.asarray(pair, dtype=np.uint64)
    w0, w1, w2, w3 = _philox_py(
        pair & _MASK,
        path & _MASK,
        path >> _S32,
        np.uint64(stream) & _MASK,
        np.uint64(seed & 0xFFFFFFFF),
        np.uint64((seed >> 32) & 0xFFFFFFFF),
    )
    return inverse_normal_cdf(_uniform53(w0, w1)), inverse_normal_cdf(_uniform53(w2, w3))


def normals(seed, stream, path, n_steps):
    """Normals for steps ``0..n_steps-1`` of one path (reference, not hot)."""
    pairs = np.arange((n_steps + 1) // 2, dtype=np.uint64)
    z0, z1 = normal_pair(seed, stream, np.full(pairs.shape, path, dtype=np.uint64), pairs)
    return np.column_stack([z0, z1]).ravel()[:n_steps]


_philox_nb = njit(cache=True)(_philox_py)


@njit(cache=True)
def normal_pair_scalar(seed_lo, seed_hi, stream, path, pair):
    """Scalar twin of :func:`normal_pair` for use inside compiled kernels.

    All integer arguments must already be ``np.uint64``.
    """
    w0, w1, w2, w3 = _philox_nb(pair & _MASK, path & _MASK, path >> _S32, stream & _MASK,
                                seed_lo, seed_hi)
    u0 = ((w0 >> _S5) * np.float64(67108864.0) + (w1 >> _S6) + 0.5) * (1.0 / 9007199254740992.0)
    u1 = ((w2 >> _S5) * np.float64(67108864.0) + (w3 >> _S6) + 0.5) * (1.0 / 9007199254740992.0)
    return _ppnd_scalar(u0), _ppnd_scalar(u1)


def split_seed(seed):
    return np.uint64(int(seed) & 0xFFFFFFFF), np.uint64((int(seed) >> 32) & 0xFFFFFFFF)
