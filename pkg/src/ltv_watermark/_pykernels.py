"""Pure-Python/NumPy kernels; the reference the compiled core is tested against."""

import numpy as np

NAME = "python"


def closed_loop(A, B, C, K, L, w, z, e, omega, zeta, alpha, start):
    """Run the plant, observer and generalized replay attack over all steps.

    Returns ``(x, x_hat, y, v, delta_bar, delta_hat, xi)`` sampled at
    ``n = 0 .. N-1``; every state starts at zero.
    """
    N, p = w.shape
    r = z.shape[1]
    x = np.zeros((N, p))
    x_hat = np.zeros((N, p))
    y = np.zeros((N, r))
    v = np.zeros((N, r))
    dbar = np.zeros((N, p))
    dhat = np.zeros((N, p))
    xi = np.zeros((N, p))
    xc = np.zeros(p)
    xh = np.zeros(p)
    db = np.zeros(p)
    dh = np.zeros(p)
    xic = np.zeros(p)
    for n in range(N):
        An, Bn, Cn, Kn, Ln = A[n], B[n], C[n], K[n], L[n]
        x[n], x_hat[n], dbar[n], dhat[n], xi[n] = xc, xh, db, dh, xic
        Cx = Cn @ xc
        if n >= start:
            vn = alpha * (Cx + z[n]) + Cn @ xic + zeta[n]
            xic = (An + Bn @ Kn) @ xic + omega[n]
        else:
            vn = np.zeros(r)
        yn = Cx + z[n] + vn
        y[n], v[n] = yn, vn
        u = Kn @ xh
        Be = Bn @ e[n]
        xc_next = An @ xc + Bn @ u + Be + w[n]
        xh = An @ xh + Bn @ u + Be + Ln @ (Cn @ xh - yn)
        xc = xc_next
        Aobs = An + Ln @ Cn
        db = Aobs @ db - w[n] - Ln @ z[n]
        dh = Aobs @ dh - Ln @ vn
    return x, x_hat, y, v, dbar, dhat, xi


def window_metric(psi, s_inv, window, coef, recompute_every=1024):
    """``coef * log|Q_n| + tr(S^-1 Q_n)`` over every full sliding window of ``psi``.

    ``Q_n`` is the sum of ``psi psi^T`` over rows ``n - window + 1 .. n``.
    Windows whose Cholesky factorization fails are returned as NaN with the
    flag set; the caller handles them.  ``recompute_every`` is accepted for
    signature parity: every window is formed from scratch here.
    """
    M, d = psi.shape
    metric = np.full(M, np.nan)
    flag = np.zeros(M, dtype=np.uint8)
    if M < window:
        return metric, flag
    wins = np.lib.stride_tricks.sliding_window_view(psi, window, axis=0)
    Q = np.einsum("mik,mjk->mij", wins, wins)
    sign, logdet = np.linalg.slogdet(Q)
    tr = np.einsum("ij,mij->m", s_inv, Q)
    ok = sign > 0
    out = coef * logdet + tr
    metric[window - 1:][ok] = out[ok]
    flag[window - 1:][~ok] = 1
    return metric, flag
