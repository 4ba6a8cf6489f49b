"""Deterministic downlink scheduling simulator.

One base station at the center of a 1 km x 1 km square serves K roaming UEs.
Scheduling proceeds in allocation steps: each step hands one PRB to one UE,
draining that UE's packet buffer head-first at the transport block size of its
current CQI. After ``n_prb`` allocations a TTI completes: packets age, traffic
arrives, UEs move (bouncing off the square's edges at specular angles), the
channel is re-drawn, and a non-positive QoS penalty reward is emitted.

All randomness flows through named per-instance streams (mobility, traffic,
fading), so identical (config, seed) pairs replay bit-identically and distinct
instances share nothing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from ofdmarl.config import AREA_SIDE_M, CellConfig, QoSProfile
from ofdmarl.errors import ActionError
from ofdmarl.seeding import make_rng


@dataclass
class Packet:
    size: int   # remaining bits
    age: int    # completed TTIs since arrival


@dataclass
class UeState:
    position: np.ndarray        # (2,) meters
    velocity: np.ndarray        # (2,) m/s
    qi: int
    cqi: int
    cqi_mean: float
    buffer: list[Packet] = field(default_factory=list)   # index 0 = oldest
    avg_throughput: float = 0.0                          # bits/TTI EMA
    next_arrival: int = 1                                # TTIs until next packet


@dataclass(frozen=True)
class Observation:
    """Raw scheduler view of the cell at one allocation step.

    Buffer contents are padded to ``buffer_slots`` columns with (0, 0) for
    empty slots; row order is oldest packet first. Arrays are fresh copies,
    safe to keep (e.g. in a replay memory) after the environment moves on.
    """

    cqi: np.ndarray             # (K,) int
    cqi_mean: np.ndarray        # (K,) float
    sizes: np.ndarray           # (K, L) int, bits
    ages: np.ndarray            # (K, L) int, TTIs
    qi: np.ndarray              # (K,) int
    avg_throughput: np.ndarray  # (K,) float, bits/TTI
    prb_cursor: int             # next PRB index, 0-based
    tti: int

    @property
    def k(self) -> int:
        return self.cqi.shape[0]

    def has_traffic(self) -> np.ndarray:
        """(K,) bool: UE has at least one buffered packet."""
        return self.sizes[:, 0] > 0


def path_loss_db(distance_m: float) -> float:
    """Log-distance path loss with a 35 m close-in floor."""
    return 128.1 + 37.6 * math.log10(max(distance_m, 35.0) / 1000.0)


def compute_cqi(ue: UeState, fading_db: float, config: CellConfig) -> int:
    """Map the UE's SNR to a CQI index in [0, 15]; rounds half up."""
    bs = AREA_SIDE_M / 2.0
    d = math.hypot(ue.position[0] - bs, ue.position[1] - bs)
    snr_db = config.tx_power_dbm - path_loss_db(d) - config.noise_dbm + fading_db
    level = math.floor((snr_db - config.snr_min_db) / config.snr_step_db + 0.5)
    return int(min(max(level, 0), 15))


class DownlinkEnv:
    """Mutable simulator instance. Strictly single-threaded.

    The action API is :meth:`allocate_prb`; a completed TTI is advanced
    automatically and its reward returned with the completing allocation.
    """

    def __init__(self, config: CellConfig, seed: int):
        config.validate()
        self.config = config
        self.seed = seed
        self._rng_mobility = make_rng(seed, "env-mobility")
        self._rng_traffic = make_rng(seed, "env-traffic")
        self._rng_fading = make_rng(seed, "env-fading")

        self.tti = 0
        self.prb_cursor = 0
        self.dropped_total = 0
        self._served_this_tti = np.zeros(config.k, dtype=np.int64)
        self._dropped_this_tti = np.zeros(config.k, dtype=np.int64)

        self.ues = [self._init_ue(i) for i in range(config.k)]

    # -- construction -------------------------------------------------------

    def _init_ue(self, index: int) -> UeState:
        cfg = self.config
        position = self._rng_mobility.uniform(0.0, AREA_SIDE_M, size=2)
        speed = max(cfg.speed_floor,
                    self._rng_mobility.normal(cfg.speed_mean, cfg.speed_std))
        theta = self._rng_mobility.uniform(0.0, 2.0 * math.pi)
        velocity = np.array([speed * math.cos(theta), speed * math.sin(theta)])
        qi = index // (cfg.k // 4) + 1          # K/4 UEs per class, in blocks
        ue = UeState(position=position, velocity=velocity, qi=qi,
                     cqi=0, cqi_mean=0.0)
        ue.cqi = compute_cqi(ue, self._draw_fading(), cfg)
        ue.cqi_mean = float(ue.cqi)
        ue.next_arrival = self._first_arrival_gap(cfg.profile(qi))
        return ue

    def _draw_fading(self) -> float:
        std = self.config.fading_std_db
        return float(self._rng_fading.normal(0.0, std)) if std > 0 else 0.0

    def _first_arrival_gap(self, profile: QoSProfile) -> int:
        if profile.arrival_period > 0:
            # random phase so same-class UEs do not fire in lockstep
            return int(self._rng_traffic.integers(1, profile.arrival_period + 1))
        return self._poisson_gap(profile)

    def _poisson_gap(self, profile: QoSProfile) -> int:
        return max(1, math.ceil(self._rng_traffic.exponential(profile.poisson_mean)))

    # -- action API ---------------------------------------------------------

    def allocate_prb(self, ue_index: int) -> tuple[int, float]:
        """Give the current PRB to ``ue_index`` (0-based).

        Returns (bits drained, reward). The reward is 0.0 for allocations
        inside a TTI and the TTI's penalty reward for the allocation that
        completes it.
        """
        if not isinstance(ue_index, (int, np.integer)) or not 0 <= ue_index < self.config.k:
            raise ActionError(
                f"ue_index {ue_index!r} outside [0, {self.config.k - 1}]")

        ue = self.ues[ue_index]
        budget = self.config.tbs_table[ue.cqi]
        drained = 0
        while budget > 0 and ue.buffer:
            head = ue.buffer[0]
            take = min(head.size, budget)
            head.size -= take
            budget -= take
            drained += take
            if head.size == 0:
                ue.buffer.pop(0)
        self._served_this_tti[ue_index] += drained

        self.prb_cursor += 1
        reward = 0.0
        if self.prb_cursor >= self.config.n_prb:
            reward = self.advance_tti()
            self.prb_cursor = 0
        return drained, reward

    def advance_tti(self) -> float:
        """Complete one TTI; call only after all ``n_prb`` allocations.

        Order: packet aging, traffic arrival, mobility, channel update,
        moving averages, reward.
        """
        cfg = self.config
        for ue in self.ues:
            for packet in ue.buffer:
                packet.age += 1

        for i, ue in enumerate(self.ues):
            profile = cfg.profile(ue.qi)
            ue.next_arrival -= 1
            if ue.next_arrival <= 0:
                if len(ue.buffer) < cfg.buffer_slots:
                    ue.buffer.append(Packet(size=profile.packet_size, age=0))
                else:
                    self._dropped_this_tti[i] += 1
                    self.dropped_total += 1
                ue.next_arrival = (profile.arrival_period
                                   if profile.arrival_period > 0
                                   else self._poisson_gap(profile))

        for ue in self.ues:
            self._move(ue)

        for ue in self.ues:
            ue.cqi = compute_cqi(ue, self._draw_fading(), cfg)
            ue.cqi_mean += cfg.cqi_ema * (ue.cqi - ue.cqi_mean)

        for i, ue in enumerate(self.ues):
            served = float(self._served_this_tti[i])
            ue.avg_throughput += cfg.throughput_ema * (served - ue.avg_throughput)

        reward = self._compute_reward()
        self._served_this_tti[:] = 0
        self._dropped_this_tti[:] = 0
        self.tti += 1
        return reward

    def _move(self, ue: UeState) -> None:
        pos = ue.position + ue.velocity * self.config.tti_duration
        for axis in range(2):
            # specular reflection keeps |v| constant; loop covers large steps
            while pos[axis] < 0.0 or pos[axis] > AREA_SIDE_M:
                if pos[axis] < 0.0:
                    pos[axis] = -pos[axis]
                else:
                    pos[axis] = 2.0 * AREA_SIDE_M - pos[axis]
                ue.velocity[axis] = -ue.velocity[axis]
        ue.position = pos

    def _compute_reward(self) -> float:
        """Non-positive QoS penalty for the TTI just finished.

        Sums, over UEs: class-weighted count of buffered packets past their
        delay budget, weighted drops of this TTI, and the guaranteed-rate
        shortfall fraction. The rate term only applies to UEs with backlog
        left at the TTI boundary; an idle UE owes nothing.
        """
        cfg = self.config
        total = 0.0
        for i, ue in enumerate(self.ues):
            profile = cfg.profile(ue.qi)
            late = sum(1 for p in ue.buffer if p.age > profile.pdb)
            total += profile.penalty_weight * late
            total += cfg.drop_weight * float(self._dropped_this_tti[i])
            if ue.buffer and profile.gbr > 0 and cfg.gbr_weight > 0:
                target_bits = profile.gbr * cfg.tti_duration
                shortfall = max(0.0, 1.0 - self._served_this_tti[i] / target_bits)
                total += cfg.gbr_weight * shortfall
        return -total

    # -- observation --------------------------------------------------------

    def observe(self) -> Observation:
        cfg = self.config
        k, slots = cfg.k, cfg.buffer_slots
        sizes = np.zeros((k, slots), dtype=np.int64)
        ages = np.zeros((k, slots), dtype=np.int64)
        for i, ue in enumerate(self.ues):
            for j, packet in enumerate(ue.buffer):
                sizes[i, j] = packet.size
                ages[i, j] = packet.age
        return Observation(
            cqi=np.array([ue.cqi for ue in self.ues], dtype=np.int64),
            cqi_mean=np.array([ue.cqi_mean for ue in self.ues]),
            sizes=sizes,
            ages=ages,
            qi=np.array([ue.qi for ue in self.ues], dtype=np.int64),
            avg_throughput=np.array([ue.avg_throughput for ue in self.ues]),
            prb_cursor=self.prb_cursor,
            tti=self.tti,
        )


class TrajectoryWriter:
    """Optional per-allocation-step CSV dump for debugging."""

    HEADER = ("tti", "prb", "action", "allocated_bits", "reward_so_far")

    def __init__(self, stream: IO[str]):
        self._writer = csv.writer(stream)
        self._writer.writerow(self.HEADER)
        self._cumulative = 0.0

    def record(self, tti: int, prb: int, action: int, bits: int,
               reward: float) -> None:
        self._cumulative += reward
        self._writer.writerow([tti, prb, action, bits, repr(self._cumulative)])
