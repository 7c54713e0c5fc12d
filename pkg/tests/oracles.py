"""Independent reference computations used as test oracles.

Nothing here calls into the package's numerical code paths beyond parameter
unpacking, so agreement with the package is a real cross-check.
"""
import math

import numpy as np
from scipy.special import logsumexp


def chain_logits(theta, dims, h):
    """Affine chain with tanh between layers, evaluated one example at a time."""
    a = np.asarray(h, dtype=float)
    off = 0
    for k, (fi, fo) in enumerate(dims):
        W = np.array(theta[off:off + fi * fo]).reshape(fo, fi)
        off += fi * fo
        b = np.array(theta[off:off + fo])
        off += fo
        z = np.array([sum(W[i, j] * a[j] for j in range(fi)) + b[i] for i in range(fo)])
        a = np.tanh(z) if k < len(dims) - 1 else z
    return a


def brute_nll(theta, dims, X, y):
    total = 0.0
    for h, t in zip(X, y):
        z = chain_logits(theta, dims, h)
        m = max(z)
        total += -(z[t] - m - math.log(sum(math.exp(v - m) for v in z)))
    return total


def gaussian_log_prior(theta, lam):
    theta = np.asarray(theta, dtype=float)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), theta.shape)
    return float(sum(0.5 * (math.log(l) - math.log(2 * math.pi) - l * t * t)
                     for t, l in zip(theta, lam)))


def fd_gradient(f, x, eps=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        g[i] = (f(x + e) - f(x - e)) / (2 * eps)
    return g


def fd_hessian_diag(f, x, eps=1e-4):
    f0 = f(x)
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        out[i] = (f(x + e) - 2 * f0 + f(x - e)) / eps ** 2
    return out


def dense_ggn(theta, dims, X, eps=1e-6):
    """Sum over examples of J^T (diag(p) - p p^T) J with J from finite differences."""
    theta = np.asarray(theta, dtype=float)
    C = dims[-1][1]
    G = np.zeros((theta.size, theta.size))
    for h in X:
        J = np.zeros((C, theta.size))
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = eps
            J[:, i] = (chain_logits(theta + e, dims, h) - chain_logits(theta - e, dims, h)) / (2 * eps)
        z = chain_logits(theta, dims, h)
        p = np.exp(z - logsumexp(z))
        G += J.T @ (np.diag(p) - np.outer(p, p)) @ J
    return G


def linear_ggn_exact(theta, dims, X):
    """Closed-form GGN of a linear softmax probe: sum_n Lambda_n (x) [x_n, 1][x_n, 1]^T,
    reordered to the flat layout (weights row-major, then biases)."""
    (D, C), = dims
    W = np.asarray(theta[:D * C]).reshape(C, D)
    b = np.asarray(theta[D * C:])
    n = D * C + C
    H = np.zeros((n, n))
    for x in X:
        z = W @ x + b
        p = np.exp(z - logsumexp(z))
        Lam = np.diag(p) - np.outer(p, p)
        J = np.zeros((C, n))
        for c in range(C):
            J[c, c * D:(c + 1) * D] = x
            J[c, D * C + c] = 1.0
        H += J.T @ Lam @ J
    return H


def adam_reference(grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Parameter deltas from the published Adam update equations, scalar loops."""
    n = len(grads[0])
    m = [0.0] * n
    v = [0.0] * n
    out = []
    for t, g in enumerate(grads, start=1):
        d = []
        for i in range(n):
            m[i] = beta1 * m[i] + (1 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1 - beta2) * g[i] ** 2
            mh = m[i] / (1 - beta1 ** t)
            vh = v[i] / (1 - beta2 ** t)
            d.append(-lr * mh / (math.sqrt(vh) + eps))
        out.append(np.array(d))
    return out


def logistic_quadrature_evidence(X, y, lam, n_points=100_000):
    """log of the integral over w of prod_n sigmoid(s_n w.x_n) N(w; 0, I/lam),
    by a tensor-product midpoint rule with about ``n_points`` nodes on the box
    |w_i| <= 10/sqrt(lam)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    d = X.shape[1]
    per_axis = int(round(n_points ** (1.0 / d)))
    half = 10.0 / math.sqrt(lam)
    edges = np.linspace(-half, half, per_axis + 1)
    nodes = 0.5 * (edges[:-1] + edges[1:])
    cell = (edges[1] - edges[0]) ** d
    grids = np.meshgrid(*([nodes] * d), indexing="ij")
    W = np.stack([g.ravel() for g in grids], axis=1)
    s = 2.0 * np.asarray(y) - 1.0
    margins = (W @ X.T) * s
    loglik = -np.logaddexp(0.0, -margins).sum(axis=1)
    logprior = 0.5 * d * math.log(lam / (2 * math.pi)) - 0.5 * lam * (W ** 2).sum(axis=1)
    return float(logsumexp(loglik + logprior) + math.log(cell))


def gd_minimize(f_grad, x0, lr, steps):
    x = np.array(x0, dtype=float)
    for _ in range(steps):
        _, g = f_grad(x)
        x -= lr * g
    return x
