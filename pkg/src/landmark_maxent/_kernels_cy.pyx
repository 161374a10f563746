# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: Metropolis sweeps and PCD-1 updates.

All randomness is supplied by the caller so that this module and the
pure-Python fallback consume identical streams.
"""
from libc.math cimport exp


def metropolis_sweeps(double[:, ::1] x, const double[::1] h, const double[:, ::1] J,
                      const double[:, :, ::1] Q, const double[::1] lo, const double[::1] hi,
                      const double[:, :, ::1] U, const double[:, :, ::1] logu,
                      Py_ssize_t thin, double[:, :, ::1] out):
    """Single-site Metropolis sweeps for the cubic energy, in place on ``x``.

    ``U[s, c, a]`` places the proposal for site ``a`` of chain ``c`` in sweep
    ``s`` inside ``[lo[a], hi[a]]``; ``logu`` holds the log acceptance draws.
    Every ``thin``-th sweep is copied into ``out``.  Returns the number of
    accepted moves.
    """
    cdef Py_ssize_t T = U.shape[0], C = x.shape[0], r = x.shape[1]
    cdef Py_ssize_t s, c, a, j, k, rec = 0
    cdef long long accepted = 0
    cdef double xa, y, xj, g1, q1, q2, inner, dH
    with nogil:
        for s in range(T):
            for c in range(C):
                for a in range(r):
                    xa = x[c, a]
                    y = lo[a] + (hi[a] - lo[a]) * U[s, c, a]
                    g1 = 0.0
                    q1 = 0.0
                    q2 = 0.0
                    for j in range(r):
                        if j == a:
                            continue
                        xj = x[c, j]
                        g1 = g1 + J[a, j] * xj
                        q1 = q1 + Q[a, a, j] * xj
                        inner = 0.0
                        for k in range(r):
                            if k != a:
                                inner = inner + Q[a, j, k] * x[c, k]
                        q2 = q2 + inner * xj
                    dH = ((y - xa) * (h[a] + g1 + 0.5 * q2)
                          + (y * y - xa * xa) * 0.5 * (J[a, a] + q1)
                          + (y * y * y - xa * xa * xa) * Q[a, a, a] / 6.0)
                    if logu[s, c, a] < -dH:
                        x[c, a] = y
                        accepted += 1
            if thin > 0 and (s + 1) % thin == 0:
                for c in range(C):
                    for a in range(r):
                        out[rec, c, a] = x[c, a]
                rec += 1
    return accepted


def pcd_steps(double[:, ::1] W, double[::1] b, double[::1] c, double[::1] logsig,
              const double[:, ::1] data, const long long[:, ::1] batch_idx,
              double[:, ::1] vneg, const double[:, :, ::1] Uh, const double[:, :, ::1] Nz,
              const double[::1] lr, int train_sigma, double[::1] recon):
    """PCD-1 updates of a Gaussian-Bernoulli RBM, in place.

    Positive statistics use hidden probabilities given the data batch;
    negative ones advance the persistent chains ``vneg`` by one Gibbs step.
    ``recon[t]`` receives the mean squared mean-field reconstruction error.
    """
    cdef Py_ssize_t Nv = W.shape[0], Nh = W.shape[1]
    cdef Py_ssize_t T = batch_idx.shape[0], B = batch_idx.shape[1]
    cdef Py_ssize_t t, n, i, a, row
    cdef double vi, d, wh, err, scale, sign, ui
    cdef double[:, ::1] gW = W.copy()
    cdef double[::1] gb = b.copy(), gc = c.copy(), gs = logsig.copy()
    cdef double[::1] inv_s2 = logsig.copy(), sd = logsig.copy(), u = logsig.copy(), v = logsig.copy()
    cdef double[::1] act = b.copy(), ph = b.copy()
    with nogil:
        for t in range(T):
            for i in range(Nv):
                sd[i] = exp(logsig[i])
                inv_s2[i] = 1.0 / (sd[i] * sd[i])
                gc[i] = 0.0
                gs[i] = 0.0
                for a in range(Nh):
                    gW[i, a] = 0.0
            for a in range(Nh):
                gb[a] = 0.0
            err = 0.0
            for n in range(2 * B):
                if n < B:
                    # positive phase on the data batch
                    row = batch_idx[t, n]
                    for i in range(Nv):
                        v[i] = data[row, i]
                    sign = 1.0
                else:
                    # one Gibbs step of persistent chain n - B, then the negative phase
                    for i in range(Nv):
                        u[i] = vneg[n - B, i] * inv_s2[i]
                    _activations(W, b, u, act, Nv, Nh)
                    for a in range(Nh):
                        ph[a] = 1.0 if Uh[t, n - B, a] < 1.0 / (1.0 + exp(-act[a])) else 0.0
                    for i in range(Nv):
                        wh = 0.0
                        for a in range(Nh):
                            wh = wh + W[i, a] * ph[a]
                        v[i] = c[i] + wh + sd[i] * Nz[t, n - B, i]
                        vneg[n - B, i] = v[i]
                    sign = -1.0
                for i in range(Nv):
                    u[i] = v[i] * inv_s2[i]
                _activations(W, b, u, act, Nv, Nh)
                for a in range(Nh):
                    ph[a] = 1.0 / (1.0 + exp(-act[a]))
                    gb[a] += sign * ph[a]
                for i in range(Nv):
                    vi = v[i]
                    ui = sign * u[i]
                    d = vi - c[i]
                    wh = 0.0
                    for a in range(Nh):
                        wh = wh + W[i, a] * ph[a]
                        gW[i, a] += ui * ph[a]
                    gc[i] += sign * d * inv_s2[i]
                    gs[i] += sign * (d * d - 2.0 * vi * wh) * inv_s2[i]
                    if n < B:
                        err = err + (d - wh) * (d - wh)
            scale = lr[t] / B
            for i in range(Nv):
                for a in range(Nh):
                    W[i, a] += scale * gW[i, a]
                c[i] += scale * gc[i]
                if train_sigma:
                    logsig[i] += scale * gs[i]
            for a in range(Nh):
                b[a] += scale * gb[a]
            recon[t] = err / (B * Nv)


cdef inline void _activations(double[:, ::1] W, double[::1] b, double[::1] u, double[::1] act,
                              Py_ssize_t Nv, Py_ssize_t Nh) noexcept nogil:
    cdef Py_ssize_t i, a
    cdef double ui
    for a in range(Nh):
        act[a] = b[a]
    for i in range(Nv):
        ui = u[i]
        for a in range(Nh):
            act[a] += W[i, a] * ui
