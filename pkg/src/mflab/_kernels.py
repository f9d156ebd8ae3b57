"""Hot pairwise loops behind the interaction drift.

Everything here is plain arrays in, plain arrays out.  The public package API
wraps these with the domain types; tests exercise both backends against each
other.

Summation order is fixed (ascending source index, offsets innermost) so that
repeated runs of either backend are bit-identical.  The two backends may
differ from each other at the level of float rounding because numpy reduces
pairwise while the compiled loops accumulate sequentially.

Kernel mode codes: 0 = radial, 1 = componentwise.
"""

import numpy as np

from ._backend import active_backend, have_numba

if have_numba():
    from numba import njit
else:  # pragma: no cover - exercised only when numba is absent

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


@njit(cache=True)
def _pair_term(u, d, c, beta, eps_cap, mode, out_row, sgn):
    """Accumulate sgn * g(u) into out_row for a single displacement u."""
    r2 = 0.0
    for l in range(d):
        r2 += u[l] * u[l]
    if r2 == 0.0:
        return
    r = np.sqrt(r2)
    if r >= 1.0 or beta == 0.0:
        mag = c
    else:
        rc = r
        if rc < eps_cap:
            rc = eps_cap
        mag = c * rc ** (-beta)
    if mode == 0:
        coef = sgn * mag / r
        for l in range(d):
            out_row[l] += coef * u[l]
    else:
        isq = 1.0 / np.sqrt(d)
        for l in range(d):
            if u[l] > 0.0:
                out_row[l] += sgn * mag * isq
            elif u[l] < 0.0:
                out_row[l] -= sgn * mag * isq


@njit(cache=True)
def _mean_field_numba(pos, offs, c, beta, eps_cap, mode):
    n, d = pos.shape
    m = offs.shape[0]
    out = np.zeros((n, d))
    u = np.empty(d)
    single_zero = m == 1
    if single_zero:
        for l in range(d):
            if offs[0, l] != 0.0:
                single_zero = False
    if single_zero:
        # g is odd, so each unordered pair is evaluated once and applied
        # with opposite signs to both rows.
        for i in range(n):
            for j in range(i + 1, n):
                for l in range(d):
                    u[l] = pos[i, l] - pos[j, l]
                _pair_term(u, d, c, beta, eps_cap, mode, out[i], 1.0)
                _pair_term(u, d, c, beta, eps_cap, mode, out[j], -1.0)
    else:
        for i in range(n):
            for j in range(n):
                if j == i:
                    continue
                for o in range(m):
                    for l in range(d):
                        u[l] = pos[i, l] - pos[j, l] - offs[o, l]
                    _pair_term(u, d, c, beta, eps_cap, mode, out[i], 1.0)
    return out / n


@njit(cache=True)
def _frozen_numba(pos, src, w, offs, c, beta, eps_cap, mode):
    n, d = pos.shape
    msrc = src.shape[0]
    m = offs.shape[0]
    out = np.zeros((n, d))
    u = np.empty(d)
    for i in range(n):
        for j in range(msrc):
            for o in range(m):
                for l in range(d):
                    u[l] = pos[i, l] - src[j, l] - offs[o, l]
                _pair_term(u, d, c, beta, eps_cap, mode, out[i], w[j])
    return out


def _g_batch_numpy(diff, c, beta, eps_cap, mode):
    """Vectorised g over a (..., d) displacement array."""
    r = np.sqrt(np.sum(diff * diff, axis=-1))
    hit = r > 0.0
    rsafe = np.where(hit, r, 1.0)
    if beta == 0.0:
        mag = np.full_like(r, c)
    else:
        mag = np.where(
            rsafe >= 1.0, c, c * np.maximum(rsafe, eps_cap) ** (-beta)
        )
    mag = np.where(hit, mag, 0.0)
    if mode == 0:
        return (mag / rsafe)[..., None] * diff
    return np.sign(diff) * (mag / np.sqrt(diff.shape[-1]))[..., None]


def _mean_field_numpy(pos, offs, c, beta, eps_cap, mode, chunk=256):
    n, d = pos.shape
    out = np.zeros((n, d))
    for i0 in range(0, n, chunk):
        i1 = min(i0 + chunk, n)
        diff = pos[i0:i1, None, :] - pos[None, :, :]
        acc = np.zeros((i1 - i0, n, d))
        for o in range(offs.shape[0]):
            acc += _g_batch_numpy(diff - offs[o], c, beta, eps_cap, mode)
        # the diagonal is excluded for every offset, matching the compiled
        # backend; the r=0 guard alone would keep j=i for shifted offsets
        rows = np.arange(i1 - i0)
        acc[rows, i0 + rows, :] = 0.0
        out[i0:i1] = acc.sum(axis=1)
    return out / n


def _frozen_numpy(pos, src, w, offs, c, beta, eps_cap, mode, chunk=256):
    n, d = pos.shape
    out = np.zeros((n, d))
    for i0 in range(0, n, chunk):
        i1 = min(i0 + chunk, n)
        diff = pos[i0:i1, None, :] - src[None, :, :]
        acc = np.zeros((i1 - i0, src.shape[0], d))
        for o in range(offs.shape[0]):
            acc += _g_batch_numpy(diff - offs[o], c, beta, eps_cap, mode)
        out[i0:i1] = np.einsum("ijl,j->il", acc, w)
    return out


def mean_field_drift_raw(pos, offs, c, beta, eps_cap, mode):
    """Self-interaction drift of an ensemble: (1/N) sum over j != i of g.

    pos is (N, d); offs is (m, d); mode 0 radial, 1 componentwise.
    Returns (N, d).
    """
    pos = np.ascontiguousarray(pos, dtype=np.float64)
    offs = np.ascontiguousarray(offs, dtype=np.float64)
    if active_backend() == "numba":
        return _mean_field_numba(pos, offs, float(c), float(beta),
                                 float(eps_cap), int(mode))
    return _mean_field_numpy(pos, offs, float(c), float(beta),
                             float(eps_cap), int(mode))


def frozen_drift_raw(pos, src, w, offs, c, beta, eps_cap, mode):
    """Drift of pos against a fixed weighted sample cloud (src, w).

    Weights are used as given; callers pass a normalised vector.
    Returns (N, d).
    """
    pos = np.ascontiguousarray(pos, dtype=np.float64)
    src = np.ascontiguousarray(src, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    offs = np.ascontiguousarray(offs, dtype=np.float64)
    if active_backend() == "numba":
        return _frozen_numba(pos, src, w, offs, float(c), float(beta),
                             float(eps_cap), int(mode))
    return _frozen_numpy(pos, src, w, offs, float(c), float(beta),
                         float(eps_cap), int(mode))


@njit(cache=True)
def _interp_table_numba(x, lo, dx, tab):
    n = x.shape[0]
    g = tab.shape[0]
    out = np.empty(n)
    for i in range(n):
        t = (x[i] - lo) / dx
        if t <= 0.0:
            k = 0
            frac = 0.0
        elif t >= g - 1:
            k = g - 2
            frac = 1.0
        else:
            k = int(t)
            frac = t - k
        out[i] = tab[k] * (1.0 - frac) + tab[k + 1] * frac
    return out


def interp_table(x, lo, dx, tab):
    """Piecewise-linear table lookup, clamped to the end values.

    Used by the one-dimensional frozen-drift fast path where the total drift
    is pretabulated on a uniform grid.
    """
    if active_backend() == "numba":
        return _interp_table_numba(
            np.ascontiguousarray(x, dtype=np.float64), float(lo), float(dx),
            np.ascontiguousarray(tab, dtype=np.float64))
    g = lo + dx * np.arange(tab.shape[0])
    return np.interp(x, g, tab)
