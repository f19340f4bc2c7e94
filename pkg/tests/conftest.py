"""Session-wide caches for the expensive artifacts (censuses, partitions).

Several modules need the same stadium periodic-orbit censuses and itinerary
partitions; they are built once per test session and memoized by parameters.
Partitions are built at the fine sweep floor so coarser floors can be applied
as views without recomputing the grid labeling.
"""

from __future__ import annotations

import time

import pytest

from chaoskit.dynamics import stadium_map
from chaoskit.orbits import default_seed_grid, find_periodic_orbits
from chaoskit.symbolic import SWEEP_AREA_FLOOR, stadium_partition

_census_store: dict = {}
_partition_store: dict = {}
_partition_walltimes: dict = {}


@pytest.fixture(scope="session")
def census_cache():
    def get(n, gamma=1.0, grid=250):
        key = (n, gamma, grid)
        if key not in _census_store:
            sysg = stadium_map(gamma)
            _census_store[key] = find_periodic_orbits(
                sysg, n, seed_grid=default_seed_grid(sysg, grid, grid))
        return _census_store[key]

    return get


@pytest.fixture(scope="session")
def partition_cache():
    def get(gamma, n):
        key = (gamma, n)
        if key not in _partition_store:
            t0 = time.monotonic()
            _partition_store[key] = stadium_partition(
                gamma, n, area_floor=SWEEP_AREA_FLOOR)
            _partition_walltimes[key] = time.monotonic() - t0
        return _partition_store[key]

    get.walltimes = _partition_walltimes
    return get


def count_at_floor(partition, floor: float) -> int:
    """Cell count the partition would report at a coarser area floor."""
    if floor < partition.area_floor:
        raise ValueError("partition was built at a coarser floor than requested")
    return sum(1 for c in partition.cells if c.area >= floor)
