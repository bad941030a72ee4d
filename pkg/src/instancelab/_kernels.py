"""Optional numba kernels for the hottest exact-evaluation sweeps.

The pure-numpy paths remain the reference; these kernels reproduce the same
uint64 hash chain and inverse-CDF draws element for element, and are used
only where profiling showed the numpy level sweep dominating (exact value of
a history-independent policy on a single-state trajectory tree).
"""

from __future__ import annotations

import numpy as np

from .rng import GOLDEN

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap if not (args and callable(args[0])) else args[0]


@njit(cache=True)
def _static_value_single_state(chain0, cdf, support, probs, gamma, horizon,
                               node_budget):
    """V of a fixed action distribution on one single-state trajectory tree.

    cdf: (A, R) cumulative reward law per action; no terminal states.
    Returns (value, nodes) with nodes = -1 if the budget was exceeded.
    """
    A, R = cdf.shape
    golden = np.uint64(GOLDEN)
    m1 = np.uint64(0xBF58476D1CE4E5B9)
    m2 = np.uint64(0x94D049BB133111EB)
    tags = np.empty(A, dtype=np.uint64)
    for a in range(A):
        tags[a] = np.uint64(a + 1) * golden

    max_nodes = A ** (horizon - 1) if horizon > 1 else 1
    cur = np.empty(max_nodes, dtype=np.uint64)
    nxt = np.empty(max_nodes, dtype=np.uint64)
    reach = np.empty(max_nodes, dtype=np.float64)
    reach2 = np.empty(max_nodes, dtype=np.float64)
    cur[0] = chain0
    reach[0] = 1.0
    n = 1
    value = 0.0
    disc = 1.0
    nodes = 0
    for t in range(horizon):
        nodes += n
        if nodes > node_budget:
            return value, -1
        depth_tag = np.uint64(t + 1) * golden
        level_r = 0.0
        expand = t + 1 < horizon
        for j in range(n):
            ch = cur[j]
            w = reach[j]
            for a in range(A):
                c2 = ch ^ tags[a]
                c2 ^= c2 >> np.uint64(30)
                c2 *= m1
                c2 ^= c2 >> np.uint64(27)
                c2 *= m2
                c2 ^= c2 >> np.uint64(31)
                key = c2 + depth_tag
                key ^= key >> np.uint64(30)
                key *= m1
                key ^= key >> np.uint64(27)
                key *= m2
                key ^= key >> np.uint64(31)
                uraw = key + golden
                uraw ^= uraw >> np.uint64(30)
                uraw *= m1
                uraw ^= uraw >> np.uint64(27)
                uraw *= m2
                uraw ^= uraw >> np.uint64(31)
                u = np.float64(uraw >> np.uint64(11)) * 1.1102230246251565e-16
                r_idx = 0
                for m in range(R - 1):
                    if u >= cdf[a, m]:
                        r_idx += 1
                level_r += w * probs[a] * support[r_idx]
                if expand:
                    nxt[j * A + a] = c2
                    reach2[j * A + a] = w * probs[a]
        value += disc * level_r
        disc *= gamma
        if expand:
            cur, nxt = nxt, cur
            reach, reach2 = reach2, reach
            n *= A
    return value, nodes
