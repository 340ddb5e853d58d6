"""
Self-check: the gradient-check registry plus a handful of lattice invariants.
"""

from typing import Callable, List, NamedTuple, Optional

import numpy as np
from loguru import logger

from . import autodiff as ad
from .gradcheck import REGISTRY, random_cloud, run_all
from .lattice import SparseLattice, elevate_many, neighbor_offsets
from .lattice_ops import LatticeHierarchy, distribute, slice_values, upsample_weights


class CheckResult(NamedTuple):
    kind: str
    name: str
    passed: bool
    detail: str


def _keys_sum_to_zero(rng: np.random.Generator) -> str:
    lattice = SparseLattice(dim=3)
    distribute(random_cloud(rng, 200, spread=10.0), lattice)
    if np.any(lattice.keys.sum(axis=1) != 0):
        raise AssertionError("a lattice key does not sum to zero")
    return f"{len(lattice)} keys"


def _neighbors_symmetric(rng: np.random.Generator) -> str:
    lattice = SparseLattice(dim=3, sigma=1.0)
    distribute(random_cloud(rng, 50), lattice)
    table = lattice.neighbor_table()
    rows, columns = np.nonzero(table >= 0)
    # Column 2a holds (axis a, +), 2a+1 holds (axis a, -)
    opposite = columns ^ 1
    if np.any(table[table[rows, columns], opposite] != rows):
        raise AssertionError("neighbor relation is not symmetric")
    if neighbor_offsets(3).sum(axis=1).any():
        raise AssertionError("neighbor offsets leave the hyperplane")
    return f"{rows.size} neighbor pairs"


def _partition_of_unity(rng: np.random.Generator) -> str:
    lattice = SparseLattice(dim=3)
    cloud = random_cloud(rng, 1000, spread=5.0)
    bags = distribute(cloud, lattice)
    constant = np.full((len(lattice), 2), 3.25)
    with ad.default_dtype(np.float64):
        out = slice_values(ad.constant(constant), bags.simplex_index, bags.barycentric).data
    error = float(np.abs(out - 3.25).max())
    if error > 1e-6:
        raise AssertionError(f"slicing a constant field deviates by {error:.2e}")
    return f"max deviation {error:.1e}"


def _alignment_monotone(rng: np.random.Generator) -> str:
    hierarchy = LatticeHierarchy(dim=3, sigma=0.6, levels=2)
    counts = []
    first_keys = None
    for step in range(4):
        distribute(random_cloud(rng, 40, spread=3.0 + step), hierarchy.lattices[0])
        hierarchy.propagate()
        counts.append(hierarchy.vertex_counts())
        keys = hierarchy.lattices[0].keys
        if first_keys is not None and not np.array_equal(keys[: first_keys.shape[0]], first_keys):
            raise AssertionError("a shared key changed its row index")
        first_keys = keys
    counts = np.asarray(counts)
    if np.any(np.diff(counts, axis=0) < 0):
        raise AssertionError(f"vertex counts shrank: {counts.tolist()}")
    if np.any(counts[:, 1:] > counts[:, :-1]):
        raise AssertionError(f"a coarse level outgrew its fine level: {counts.tolist()}")
    return f"counts per step {counts.tolist()}"


def _upsample_weights_normalised(rng: np.random.Generator) -> str:
    hierarchy = LatticeHierarchy(dim=3, sigma=1.0, levels=1)
    distribute(random_cloud(rng, 60, spread=4.0), hierarchy.lattices[0])
    hierarchy.propagate()
    _, weights = upsample_weights(hierarchy.lattices[1], hierarchy.lattices[0].keys)
    error = float(np.abs(weights.sum(axis=1) - 1.0).max())
    if error > 1e-9:
        raise AssertionError(f"upsample weights do not sum to one (off by {error:.2e})")
    return f"{weights.shape[0]} fine vertices"


def _elevation_in_hyperplane(rng: np.random.Generator) -> str:
    elevated = elevate_many(rng.normal(size=(100, 3)) * 10.0, 0.6)
    error = float(np.abs(elevated.sum(axis=1)).max())
    if error > 1e-9:
        raise AssertionError(f"elevated points leave the hyperplane by {error:.2e}")
    return "100 points"


INVARIANTS: List[Callable[[np.random.Generator], str]] = [
    _elevation_in_hyperplane,
    _keys_sum_to_zero,
    _neighbors_symmetric,
    _partition_of_unity,
    _alignment_monotone,
    _upsample_weights_normalised,
]


def run_selfcheck(seed: int = 0, corrupt: Optional[str] = None) -> List[CheckResult]:
    """
    Run every gradient check and lattice invariant.

    Args:
        seed: Seed of the random fixtures.
        corrupt: Name of a gradient check whose analytic gradient is skewed on purpose.
    """
    results = []
    for result in run_all(seed=seed, corrupt=corrupt):
        results.append(
            CheckResult("gradient", result.name, result.passed, f"max rel err {result.error:.2e} over {result.trials} fixtures")
        )
    for check in INVARIANTS:
        name = check.__name__.lstrip("_")
        try:
            detail = check(np.random.default_rng(seed))
            results.append(CheckResult("invariant", name, True, detail))
        except AssertionError as e:
            logger.error(f"Invariant '{name}' failed: {e}")
            results.append(CheckResult("invariant", name, False, str(e)))
    passed = sum(r.passed for r in results)
    logger.info(f"Self-check: {passed}/{len(results)} checks passed ({len(REGISTRY)} gradient checks)")
    return results
