"""Independent reference implementations used only by the tests.

Each oracle is deliberately naive and shares no code with the package.
"""

import itertools

import numpy as np


def transport_constraints(n, m):
    A = np.zeros((n + m, n * m))
    for i in range(n):
        for j in range(m):
            A[i, i * m + j] = 1.0
            A[n + j, i * m + j] = 1.0
    return A


def brute_force_ot(a, b, C):
    """Exact OT by enumerating every basic feasible solution.

    A vertex of the transportation polytope is supported on at most
    ``n + m - 1`` cells; for each such cell subset the equality system is
    solved and kept if it is exact and nonnegative.  Returns ``(cost, plan)``.
    """
    a, b, C = np.asarray(a, float), np.asarray(b, float), np.asarray(C, float)
    n, m = C.shape
    A = transport_constraints(n, m)
    rhs = np.concatenate([a, b])
    best, best_plan = np.inf, None
    for cells in itertools.combinations(range(n * m), n + m - 1):
        sub = A[:, cells]
        x, *_ = np.linalg.lstsq(sub, rhs, rcond=None)
        if np.abs(sub @ x - rhs).max() > 1e-9 or x.min() < -1e-12:
            continue
        cost = float(C.ravel()[list(cells)] @ x)
        if cost < best:
            best = cost
            plan = np.zeros(n * m)
            plan[list(cells)] = x
            best_plan = plan.reshape(n, m)
    return best, best_plan


def entropic_2x2_offdiag(eps):
    """Closed form for uniform 2x2 marginals and C = [[0,1],[1,0]].

    By symmetry T = [[d, o], [o, d]] with d + o = 1/2 and o/d = exp(-1/eps).
    """
    r = np.exp(-1.0 / eps)
    return 0.5 * r / (1.0 + r), 0.5 / (1.0 + r)


def free_lunch_reference(x, means, covs, k, alpha):
    """Textbook top-k calibration: full sort by (distance, class id)."""
    d = [(float(np.sum((m - x) ** 2)), i) for i, m in enumerate(means)]
    chosen = [i for _, i in sorted(d)[:k]]
    mu = (sum(means[i] for i in chosen) + x) / (k + 1)
    cov = sum(covs[i] for i in chosen) / k + alpha
    return chosen, mu, cov


def central_difference_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def softmax(v):
    e = np.exp(v - np.max(v))
    return e / e.sum()
