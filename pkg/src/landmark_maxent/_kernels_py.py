"""Pure-NumPy versions of the compiled kernels (same signatures, same streams)."""
import numpy as np


def metropolis_sweeps(x, h, J, Q, lo, hi, U, logu, thin, out):
    T, C, r = U.shape
    accepted = 0
    rec = 0
    Qdiag = Q[np.arange(r), np.arange(r), np.arange(r)]
    for s in range(T):
        for a in range(r):
            xa = x[:, a].copy()
            y = lo[a] + (hi[a] - lo[a]) * U[s, :, a]
            xt = x.copy()
            xt[:, a] = 0.0
            g1 = xt @ J[a]
            q1 = xt @ Q[a, a]
            q2 = np.einsum("cj,jk,ck->c", xt, Q[a], xt)
            dH = (
                (y - xa) * (h[a] + g1 + 0.5 * q2)
                + (y * y - xa * xa) * 0.5 * (J[a, a] + q1)
                + (y * y * y - xa * xa * xa) * Qdiag[a] / 6.0
            )
            acc = logu[s, :, a] < -dH
            x[acc, a] = y[acc]
            accepted += int(acc.sum())
        if thin > 0 and (s + 1) % thin == 0:
            out[rec] = x
            rec += 1
    return accepted


def _logistic(z):
    return 1.0 / (1.0 + np.exp(-z))


def pcd_steps(W, b, c, logsig, data, batch_idx, vneg, Uh, Nz, lr, train_sigma, recon):
    T, B = batch_idx.shape
    Nv = W.shape[0]
    for t in range(T):
        sd = np.exp(logsig)
        s2 = sd * sd
        v = data[batch_idx[t]]
        ph = _logistic(b + (v / s2) @ W)
        wh = ph @ W.T
        d = v - c
        gW = (v / s2).T @ ph
        gb = ph.sum(axis=0)
        gc = (d / s2).sum(axis=0)
        gs = ((d * d - 2.0 * v * wh) / s2).sum(axis=0)
        err = float(((d - wh) ** 2).sum())

        hs = (Uh[t] < _logistic(b + (vneg / s2) @ W)).astype(float)
        vneg[...] = c + hs @ W.T + sd * Nz[t]
        ph = _logistic(b + (vneg / s2) @ W)
        wh = ph @ W.T
        d = vneg - c
        gW -= (vneg / s2).T @ ph
        gb -= ph.sum(axis=0)
        gc -= (d / s2).sum(axis=0)
        gs -= ((d * d - 2.0 * vneg * wh) / s2).sum(axis=0)

        scale = lr[t] / B
        W += scale * gW
        c += scale * gc
        if train_sigma:
            logsig += scale * gs
        b += scale * gb
        recon[t] = err / (B * Nv)
