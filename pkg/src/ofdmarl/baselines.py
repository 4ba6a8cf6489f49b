"""Classical benchmark schedulers.

All selectors are pure functions of (observation, own state): identical inputs
give identical outputs, and ties break toward the lowest UE index. The
selector objects carry whatever per-run state they need (a round-robin cursor,
a random generator) and expose ``reset(seed)`` + ``select(obs)``.
"""

from __future__ import annotations

import numpy as np

from ofdmarl.config import BASELINE_NAMES, CellConfig
from ofdmarl.env import Observation
from ofdmarl.errors import ConfigError
from ofdmarl.seeding import make_rng

PFCA_EPS = 1e-6


def rrit_select(obs: Observation, last_served: int) -> tuple[int, int]:
    """Round robin if traffic: next UE after the cursor with a non-empty buffer.

    Returns (selected UE, new cursor). With no traffic anywhere the cursor
    simply advances.
    """
    k = obs.k
    traffic = obs.has_traffic()
    for offset in range(1, k + 1):
        candidate = (last_served + offset) % k
        if traffic[candidate]:
            return candidate, candidate
    fallback = (last_served + 1) % k
    return fallback, fallback


def pfca_select(obs: Observation, tbs_table: tuple[int, ...]) -> int:
    """Proportional fair, channel aware.

    argmax of achievable-rate / average-throughput over UEs with traffic;
    falls back to the best channel when every buffer is empty.
    """
    tbs = np.asarray([tbs_table[c] for c in obs.cqi], dtype=float)
    traffic = obs.has_traffic()
    metric = tbs / np.maximum(obs.avg_throughput, PFCA_EPS)
    if traffic.any():
        metric = np.where(traffic, metric, -np.inf)
        return int(np.argmax(metric))
    return int(np.argmax(tbs))


def solve_knapsack(weights: np.ndarray, values: np.ndarray, capacity: int,
                   feasible: np.ndarray) -> tuple[float, list[int]]:
    """0/1 knapsack by dynamic programming over integer capacity.

    Infeasible items are excluded outright. Among maximum-value subsets the
    canonical selection is the one whose inclusion vector is lexicographically
    largest by ascending item index (greedily include an item whenever doing
    so still reaches the optimum). Returns (best value, selected indices).
    """
    n = len(weights)
    capacity = int(max(capacity, 0))
    # suffix[i][c]: best value using items i.. with capacity c
    suffix = np.zeros((n + 1, capacity + 1))
    for i in range(n - 1, -1, -1):
        suffix[i] = suffix[i + 1]
        w = int(weights[i])
        if feasible[i] and 0 <= w <= capacity:
            take = np.full(capacity + 1, -np.inf)
            take[w:] = values[i] + suffix[i + 1, : capacity + 1 - w]
            suffix[i] = np.maximum(suffix[i + 1], take)

    chosen: list[int] = []
    c = capacity
    for i in range(n):
        w = int(weights[i])
        if not feasible[i] or w > c:
            continue
        if values[i] + suffix[i + 1, c - w] == suffix[i, c]:
            chosen.append(i)
            c -= w
    return float(suffix[0, capacity]), chosen


def knapsack_select(obs: Observation, remaining_prbs: int,
                    config: CellConfig) -> int:
    """Pack head-of-line packets by urgency-weighted value.

    One item per UE with traffic: weight is the head-of-line packet's
    remaining bits, value is the class lateness weight scaled by
    1 / max(PDB - age + 1, 1). An item is feasible only if the UE could drain
    it within the remaining PRBs at its own rate; total capacity is the
    remaining PRBs at the best rate present. The scheduler serves the UE of
    the highest-value selected item (value ties and empty selections fall
    back toward the lowest index / proportional fair choice).
    """
    if remaining_prbs < 1:
        raise ValueError("remaining_prbs must be >= 1")
    traffic = obs.has_traffic()
    if not traffic.any():
        return pfca_select(obs, config.tbs_table)

    idx = np.nonzero(traffic)[0]
    weights = obs.sizes[idx, 0].astype(np.int64)
    ages = obs.ages[idx, 0]
    rates = np.asarray([config.tbs_table[obs.cqi[i]] for i in idx], dtype=np.int64)
    values = np.empty(len(idx))
    for j, i in enumerate(idx):
        profile = config.profile(int(obs.qi[i]))
        urgency = 1.0 / max(profile.pdb - int(ages[j]) + 1, 1)
        values[j] = profile.penalty_weight * urgency

    feasible = weights <= remaining_prbs * rates
    capacity = int(remaining_prbs * rates.max())
    _, selected = solve_knapsack(weights, values, capacity, feasible)
    if not selected:
        return pfca_select(obs, config.tbs_table)
    best = max(selected, key=lambda j: (values[j], -j))
    return int(idx[best])


# ---------------------------------------------------------------------------
# stateful selector objects
# ---------------------------------------------------------------------------


class RritScheduler:
    def __init__(self, config: CellConfig):
        self.config = config
        self.last_served = config.k - 1

    def reset(self, seed: int = 0) -> None:
        self.last_served = self.config.k - 1

    def select(self, obs: Observation) -> int:
        choice, self.last_served = rrit_select(obs, self.last_served)
        return choice


class PfcaScheduler:
    def __init__(self, config: CellConfig):
        self.config = config

    def reset(self, seed: int = 0) -> None:
        pass

    def select(self, obs: Observation) -> int:
        return pfca_select(obs, self.config.tbs_table)


class KnapsackScheduler:
    def __init__(self, config: CellConfig):
        self.config = config

    def reset(self, seed: int = 0) -> None:
        pass

    def select(self, obs: Observation) -> int:
        remaining = self.config.n_prb - obs.prb_cursor
        return knapsack_select(obs, remaining, self.config)


class RandomScheduler:
    def __init__(self, config: CellConfig, seed: int = 0):
        self.config = config
        self._seed = seed
        self._rng = make_rng(seed, "random-agent")

    def reset(self, seed: int = 0) -> None:
        self._rng = make_rng(seed, "random-agent")

    def select(self, obs: Observation) -> int:
        return int(self._rng.integers(0, self.config.k))


def make_baseline(name: str, config: CellConfig, seed: int = 0):
    """Instantiate a baseline scheduler by registry name."""
    factories = {
        "rrit": lambda: RritScheduler(config),
        "pfca": lambda: PfcaScheduler(config),
        "knapsack": lambda: KnapsackScheduler(config),
        "random": lambda: RandomScheduler(config, seed),
    }
    if name not in factories:
        raise ConfigError(
            f"unknown baseline {name!r}; expected one of {BASELINE_NAMES}")
    return factories[name]()
