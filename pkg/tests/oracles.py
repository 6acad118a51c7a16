"""Independent reference computations shared by the test modules."""

import numpy as np


def simulate_state_frequencies(ps, qs, steps, seed=0, start=0):
    """Empirical (cc, cd, dc, dd) visit frequencies of many chains played in lockstep.

    Each step samples the leader's action from p[state] and the requestor's
    reply from q1 or q2, exactly as two players would, without building the
    transition matrix.
    """
    ps = np.asarray(ps, float)
    qs = np.asarray(qs, float)
    n = ps.shape[0]
    rng = np.random.default_rng(seed)
    state = np.full(n, start)
    counts = np.zeros((n, 4), dtype=np.int64)
    rows = np.arange(n)
    chunk = 10_000
    for base in range(0, steps, chunk):
        m = min(chunk, steps - base)
        u = rng.random((m, 2, n))
        for t in range(m):
            lead_c = u[t, 0] < ps[rows, state]
            q = np.where(lead_c, qs[:, 0], qs[:, 1])
            req_c = u[t, 1] < q
            state = np.where(lead_c, np.where(req_c, 0, 1), np.where(req_c, 2, 3))
            counts[rows, state] += 1
    return counts / steps


def total_variation(a, b):
    return 0.5 * np.abs(np.asarray(a) - np.asarray(b)).sum(axis=-1)


def numeric_gradient(f, w, h=1e-6):
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g
