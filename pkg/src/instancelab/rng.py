"""Deterministic randomness: hierarchical 64-bit seeding and named streams.

Every random quantity in the package is a pure function of explicit seeds.
Trajectory-tree nodes are keyed by chaining the instance seed through the
action prefix with the splitmix64 finalizer (Steele, Lea & Flood 2014), with
the prefix length folded in at finalization; child keys therefore derive from
parent keys in O(1), which keeps tree nodes total, deterministic, and
vectorizable across whole tree levels.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15  # 2^64 / golden ratio
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U_GOLDEN = np.uint64(GOLDEN)
_U_MIX1 = np.uint64(_MIX1)
_U_MIX2 = np.uint64(_MIX2)


def mix64(x: int) -> int:
    """splitmix64 finalizer on a 64-bit integer."""
    x &= MASK64
    x ^= x >> 30
    x = (x * _MIX1) & MASK64
    x ^= x >> 27
    x = (x * _MIX2) & MASK64
    x ^= x >> 31
    return x


def mix64_array(x: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 finalizer over a uint64 array."""
    x = x.astype(np.uint64, copy=True)
    x ^= x >> np.uint64(30)
    x *= _U_MIX1
    x ^= x >> np.uint64(27)
    x *= _U_MIX2
    x ^= x >> np.uint64(31)
    return x


def chain_root(seed: int) -> int:
    """Start of a node-key chain for one instance."""
    return mix64((seed & MASK64) ^ GOLDEN)


def chain_absorb(chain: int, action: int) -> int:
    """Extend a node-key chain by one action byte."""
    return mix64(chain ^ ((action + 1) * GOLDEN & MASK64))


def chain_absorb_array(chain: np.ndarray, action) -> np.ndarray:
    if np.isscalar(action) or np.ndim(action) == 0:
        tag = np.uint64((int(action) + 1) * GOLDEN & MASK64)
    else:
        with np.errstate(over="ignore"):
            tag = (np.asarray(action, dtype=np.uint64) + np.uint64(1)) * _U_GOLDEN
    return mix64_array(chain ^ tag)


def node_key(chain: int, depth: int) -> int:
    """Finalize a chain into the sampling key of the node at `depth`."""
    return mix64((chain + depth * GOLDEN) & MASK64)


def node_key_array(chain: np.ndarray, depth: int) -> np.ndarray:
    return mix64_array(chain + np.uint64((depth * GOLDEN) & MASK64))


def key_uniform(key: int, index: int) -> float:
    """index-th uniform in [0,1) attached to a node key."""
    u = mix64((key + (index + 1) * GOLDEN) & MASK64)
    return (u >> 11) * 2.0**-53


def key_uniform_array(key: np.ndarray, index: int) -> np.ndarray:
    u = mix64_array(key + np.uint64(((index + 1) * GOLDEN) & MASK64))
    return (u >> np.uint64(11)).astype(np.float64) * 2.0**-53


def categorical(u: float, cdf: np.ndarray) -> int:
    """Inverse-CDF draw: smallest i with u < cdf[i]. `cdf` is cumulative."""
    # clip guards u landing in the final rounding gap below cdf[-1] == 1
    return min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)


def categorical_rows(u: np.ndarray, cdf_rows: np.ndarray) -> np.ndarray:
    """Row-wise inverse-CDF draws: cdf_rows has shape (n, m), u has shape (n,)."""
    idx = (u[:, None] >= cdf_rows).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def derive_seed(root_seed: int, label: str, index: int = 0) -> int:
    """64-bit seed for the named sub-stream (component label + index)."""
    h = mix64(root_seed & MASK64)
    for byte in label.encode("utf-8"):
        h = chain_absorb(h, byte)
    return mix64((h + (index + 1) * GOLDEN) & MASK64)


def stream(root_seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Named deterministic numpy Generator derived from the root seed."""
    return np.random.Generator(np.random.PCG64(derive_seed(root_seed, label, index)))
