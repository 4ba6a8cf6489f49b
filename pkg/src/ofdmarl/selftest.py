"""Built-in invariant suite behind ``ofdmarl selftest`` and ``gradcheck``.

Reduced-size versions of the heavyweight verification oracles: composed
network gradients against central finite differences, packet-shuffle
distributions, simulator invariants under random actions, and the knapsack
solver against exhaustive subset search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ofdmarl.agent import (Transition, clone_params, compute_td_loss,
                           named_tensors, new_agent)
from ofdmarl.baselines import solve_knapsack
from ofdmarl.config import CellConfig, QoSProfile, TrainConfig
from ofdmarl.env import DownlinkEnv
from ofdmarl.nn import grad_check
from ofdmarl.seeding import make_rng

# chi-square critical value for df=11 at p=0.001 (12-outcome placement test)
CHI2_CRIT_DF11_P001 = 31.264

GRADCHECK_TOLERANCE = 1e-4


def small_cell_config(k: int = 4, n_prb: int = 5, slots: int = 4) -> CellConfig:
    """Tiny cell used by gradient and invariant checks."""
    return CellConfig(
        k=k, n_prb=n_prb, buffer_slots=slots,
        qos_profiles=(
            QoSProfile(qi=1, gbr=20_000.0, pdb=10, packet_size=400,
                       arrival_period=4, penalty_weight=4.0),
            QoSProfile(qi=2, gbr=60_000.0, pdb=15, packet_size=1_200,
                       arrival_period=5, penalty_weight=3.0),
            QoSProfile(qi=3, gbr=40_000.0, pdb=30, packet_size=2_000,
                       arrival_period=0, poisson_mean=8.0, penalty_weight=2.0),
            QoSProfile(qi=4, gbr=20_000.0, pdb=50, packet_size=2_000,
                       arrival_period=0, poisson_mean=12.0, penalty_weight=1.0),
        ),
    )


def small_train_config(**overrides) -> TrainConfig:
    base = dict(encoder_hidden=(6, 4), main_hidden=(8, 8),
                shuffle_mode="rps", age_cap=True)
    base.update(overrides)
    return TrainConfig(**base)


def sample_transition(cell: CellConfig, seed: int, warmup_ttis: int = 6) -> Transition:
    """A transition with realistically populated buffers."""
    env = DownlinkEnv(cell, seed)
    rng = make_rng(seed, "selftest-warmup")
    for _ in range(warmup_ttis * cell.n_prb):
        env.allocate_prb(int(rng.integers(0, cell.k)))
    obs = env.observe()
    action = int(rng.integers(0, cell.k))
    _, reward = env.allocate_prb(action)
    return Transition(obs, action, reward - 0.5, env.observe(), False)


RELU_MARGIN = 1e-2      # reject instances whose forward sits this close to a
HUBER_MARGIN = 1e-3     # ReLU / Huber kink: central differences lie there


def composed_gradient_error(seed: int, inject_fault: bool = False,
                            max_probes: int = 10_000) -> float:
    """Max relative FD error of the full pipeline's analytic gradients.

    The loss is one transition's TD Huber loss through embedding, the four
    encoders and the main network, replayed with frozen shuffle/permutation
    draws so finite differences see a deterministic function. Instances whose
    forward pass lands within a small margin of a ReLU or Huber kink are
    redrawn: the loss is not differentiable there and finite differences
    report spurious errors. The bootstrap side carries no gradient, so check
    instances run with gamma = 0 and still exercise the whole trainable graph.
    """
    cell = small_cell_config()
    train = small_train_config(gamma=0.0)

    for attempt in range(64):
        instance = 1000 * seed + attempt
        params = new_agent(cell, train, instance)
        target = clone_params(params)
        batch = [sample_transition(cell, instance)]

        def loss_fn() -> float:
            rng = np.random.default_rng(instance + 1)  # identical draws per call
            loss, _ = compute_td_loss(params, target, batch, cell, train, rng,
                                      need_grads=False)
            return loss

        diag: dict = {}
        _, grads = compute_td_loss(params, target, batch, cell, train,
                                   np.random.default_rng(instance + 1),
                                   diagnostics=diag)
        if diag["relu_kink_margin"] < RELU_MARGIN or \
                diag["huber_kink_margin"] < HUBER_MARGIN:
            continue
        if inject_fault:
            grads = dict(grads)
            grads["main.b0"] = grads["main.b0"] + 0.5
        return grad_check(loss_fn, named_tensors(params), grads,
                          max_probes=max_probes,
                          rng=np.random.default_rng(instance + 2))
    raise RuntimeError("no kink-free gradient-check instance found")


def knapsack_brute_force(weights, values, capacity, feasible):
    """Exhaustive 0/1 knapsack with the solver's documented tie-break.

    Among maximum-value subsets, prefer the one whose inclusion vector is
    lexicographically largest by ascending item index. Value sums accumulate
    from the highest index down, mirroring the DP's fold order so float
    comparisons against the DP stay exact.
    """
    n = len(weights)
    best_value = 0.0
    best_bits: tuple[int, ...] = (0,) * n
    best_set: list[int] = []
    for mask in range(2 ** n):
        chosen = [i for i in range(n) if mask >> i & 1]
        if any(not feasible[i] for i in chosen):
            continue
        if sum(int(weights[i]) for i in chosen) > capacity:
            continue
        value = 0.0
        for i in reversed(chosen):
            value = values[i] + value
        bits = tuple(1 if mask >> i & 1 else 0 for i in range(n))
        if value > best_value or (value == best_value and bits > best_bits):
            best_value, best_bits, best_set = value, bits, chosen
    return best_value, best_set


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_gradients(inject_fault: bool = False, instances: int = 5) -> CheckResult:
    worst = max(composed_gradient_error(seed, inject_fault)
                for seed in range(instances))
    return CheckResult(
        "gradient-check", worst < GRADCHECK_TOLERANCE,
        f"max relative error {worst:.3e} over {instances} instances")


def check_shuffle_distributions(draws: int = 20_000) -> CheckResult:
    from ofdmarl.agent import shuffle_packets

    rng = make_rng(7, "selftest-shuffle")
    # order preservation of sorted shuffling
    slots = 8
    for trial in range(2_000):
        m = trial % slots + 1
        sizes = np.zeros(slots, dtype=np.int64)
        ages = np.zeros(slots, dtype=np.int64)
        sizes[:m] = np.arange(1, m + 1)
        ages[:m] = np.arange(m, 0, -1)
        out_sizes, _ = shuffle_packets(sizes, ages, "sps", rng)
        placed = out_sizes[out_sizes > 0]
        if not np.array_equal(placed, sizes[:m]):
            return CheckResult("shuffle-distributions", False,
                               "sorted shuffle broke packet order")

    # uniformity of random shuffling over all 12 placements (L=4, m=2)
    counts: dict[tuple[int, int], int] = {}
    sizes = np.array([1, 2, 0, 0], dtype=np.int64)
    ages = np.array([5, 3, 0, 0], dtype=np.int64)
    for _ in range(draws):
        out_sizes, _ = shuffle_packets(sizes, ages, "rps", rng)
        key = (int(np.nonzero(out_sizes == 1)[0][0]),
               int(np.nonzero(out_sizes == 2)[0][0]))
        counts[key] = counts.get(key, 0) + 1
    expected = draws / 12.0
    stat = sum((c - expected) ** 2 / expected for c in counts.values())
    stat += expected * (12 - len(counts))   # unseen outcomes
    passed = len(counts) == 12 and stat < CHI2_CRIT_DF11_P001
    return CheckResult("shuffle-distributions", passed,
                       f"chi-square {stat:.2f} (crit {CHI2_CRIT_DF11_P001})")


def check_env_invariants(ttis: int = 1_500) -> CheckResult:
    cell = small_cell_config()
    env = DownlinkEnv(cell, seed=11)
    rng = make_rng(11, "selftest-env")
    speeds0 = [float(np.hypot(*ue.velocity)) for ue in env.ues]

    prev_ages = {}
    for t in range(ttis):
        for _ in range(cell.n_prb):
            action = int(rng.integers(0, cell.k))
            _, reward = env.allocate_prb(action)
        if reward > 0:
            return CheckResult("env-invariants", False, f"positive reward {reward}")
        if env.tti != t + 1:
            return CheckResult("env-invariants", False, "TTI counter out of step")
        for i, ue in enumerate(env.ues):
            if not (0.0 <= ue.position[0] <= 1000.0
                    and 0.0 <= ue.position[1] <= 1000.0):
                return CheckResult("env-invariants", False, "UE left the area")
            speed = float(np.hypot(*ue.velocity))
            if not math.isclose(speed, speeds0[i], rel_tol=1e-9):
                return CheckResult("env-invariants", False, "speed drifted")
    return CheckResult("env-invariants", True, f"{ttis} TTIs, random actions")


def check_knapsack_oracle(instances: int = 200) -> CheckResult:
    rng = make_rng(3, "selftest-knapsack")
    for trial in range(instances):
        n = int(rng.integers(1, 11))
        weights = rng.integers(1, 50, size=n)
        values = rng.integers(0, 100, size=n).astype(float)
        capacity = int(rng.integers(10, 120))
        feasible = rng.random(n) > 0.15
        dp_value, dp_set = solve_knapsack(weights, values, capacity, feasible)
        bf_value, bf_set = knapsack_brute_force(weights, values, capacity,
                                                feasible)
        if dp_value != bf_value or dp_set != bf_set:
            return CheckResult("knapsack-oracle", False,
                               f"mismatch on instance {trial}")
    return CheckResult("knapsack-oracle", True, f"{instances} random instances")


def run_selftest(inject_gradient_fault: bool = False) -> list[CheckResult]:
    return [
        check_gradients(inject_fault=inject_gradient_fault),
        check_shuffle_distributions(),
        check_env_invariants(),
        check_knapsack_oracle(),
    ]
