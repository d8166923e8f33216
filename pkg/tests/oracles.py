"""Independent reference implementations used as test oracles.

Written from the textbook definitions with loops and explicit inverses; none
of them call into sohbag.
"""

import math

import numpy as np
from scipy import stats as sps


def matern52_loop(x, xp, length_scales, sf2):
    r2 = 0.0
    for a, b, ls in zip(x, xp, np.broadcast_to(length_scales, len(x))):
        r2 += ((a - b) / ls) ** 2
    r = math.sqrt(r2)
    return sf2 * (1 + math.sqrt(5) * r + 5 * r2 / 3) * math.exp(-math.sqrt(5) * r)


def kernel_loop(A, B, length_scales, sf2):
    K = np.empty((len(A), len(B)))
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            K[i, j] = matern52_loop(a, b, length_scales, sf2)
    return K


def naive_posterior(X, y, Xs, length_scales, sf2, sn2):
    """Dense explicit-inverse GP posterior with GLS-profiled constant mean."""
    A = kernel_loop(X, X, length_scales, sf2) + sn2 * np.eye(len(X))
    Ainv = np.linalg.inv(A)
    one = np.ones(len(X))
    beta = (one @ Ainv @ y) / (one @ Ainv @ one)
    Ks = kernel_loop(X, Xs, length_scales, sf2)
    mean = beta + Ks.T @ Ainv @ (y - beta)
    var = sf2 - np.einsum("ij,ik,kj->j", Ks, Ainv, Ks)
    return mean, var, beta


def naive_lml(X, y, length_scales, sf2, sn2):
    A = kernel_loop(X, X, length_scales, sf2) + sn2 * np.eye(len(X))
    Ainv = np.linalg.inv(A)
    one = np.ones(len(X))
    beta = (one @ Ainv @ y) / (one @ Ainv @ one)
    r = y - beta
    _, logdet = np.linalg.slogdet(A)
    return -0.5 * logdet - 0.5 * r @ Ainv @ r - 0.5 * len(X) * math.log(2 * math.pi)


def central_difference(f, theta, h=1e-5):
    g = np.zeros_like(theta)
    for k in range(len(theta)):
        e = np.zeros_like(theta)
        e[k] = h
        g[k] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def statistics_oracle(x):
    """The seven statistics via numpy/scipy building blocks."""
    x = np.asarray(x, dtype=float)
    q75, q25 = np.percentile(x, [75, 25], method="hazen")
    return {
        "mean": float(np.mean(x)),
        "median": float(np.median(x)),
        "sum": float(math.fsum(x)),
        "std": float(np.std(x, ddof=1)),
        "variance": float(np.var(x, ddof=1)),
        "kurtosis": float(sps.kurtosis(x, fisher=False, bias=True)),
        "iqr": float(q75 - q25),
    }


def spearman_oracle(x, y):
    rx, ry = sps.rankdata(x), sps.rankdata(y)
    return float(np.corrcoef(rx, ry)[0, 1])


def weighted_fusion(ys, sigmas, eps=1e-8):
    w = [1 / max(s, eps) for s in sigmas]
    z = sum(1 for v in w if v != 0)
    ws = sum(w)
    yp = sum(a * b for a, b in zip(w, ys)) / ws
    if z == 1:
        return yp, sigmas[0]
    disp = sum(a * (b - yp) ** 2 for a, b in zip(w, ys))
    return yp, math.sqrt(z * disp / ((z - 1) * ws))


def riemann_integral(f, t0, t1, steps=2_000_000):
    """Midpoint sum on a fine grid."""
    h = (t1 - t0) / steps
    t = t0 + h * (np.arange(steps) + 0.5)
    return float(np.sum(f(t)) * h)


def pearson_textbook(x, y):
    n = len(x)
    sx, sy = sum(x), sum(y)
    sxx = sum(a * a for a in x)
    syy = sum(b * b for b in y)
    sxy = sum(a * b for a, b in zip(x, y))
    return (n * sxy - sx * sy) / math.sqrt((n * sxx - sx**2) * (n * syy - sy**2))
