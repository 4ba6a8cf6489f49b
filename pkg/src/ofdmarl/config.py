"""Configuration model and YAML (de)serialization.

A run is described by three frozen dataclasses:

* ``CellConfig``   -- the simulated cell (UEs, PRBs, buffers, channel, traffic,
  reward weights).
* ``TrainConfig``  -- the learning agent (discount, exploration, replay,
  feature-pipeline switches, network widths).
* ``RunConfig``    -- the orchestration protocol (episode budget, evaluation
  cadence, seed-set sizes).

Config files are YAML with sections ``cell``, ``channel``, ``reward``, ``qos``,
``train`` and ``run``; any subset of keys may be given and the rest fall back
to the defaults below.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ofdmarl.errors import ConfigError

# Bits one PRB carries per TTI at each CQI: round(efficiency * bandwidth * tti).
# Standard 16-step spectral-efficiency ladder, 180 kHz PRB, 1 ms TTI.
SPECTRAL_EFFICIENCY = (
    0.0, 0.1523, 0.2344, 0.3770, 0.6016, 0.8770, 1.1758, 1.4766,
    1.9141, 2.4063, 2.7305, 3.3223, 3.9023, 4.5234, 5.1152, 5.5547,
)

CQI_LEVELS = 16
NUM_QOS_CLASSES = 4
AREA_SIDE_M = 1000.0

VARIANTS = ("enn", "nps", "rps", "sps")
SHUFFLE_MODES = ("none", "rps", "sps")
BASELINE_NAMES = ("rrit", "pfca", "knapsack", "random")


def default_tbs_table(prb_bandwidth_hz: float = 180_000.0,
                      tti_duration: float = 1e-3) -> tuple[int, ...]:
    """Transport block sizes (bits per PRB) for CQI 0..15."""
    return tuple(round(eta * prb_bandwidth_hz * tti_duration)
                 for eta in SPECTRAL_EFFICIENCY)


@dataclass(frozen=True)
class QoSProfile:
    """Traffic contract of one QoS class.

    ``arrival_period`` > 0 means one packet every that many TTIs;
    0 means Poisson arrivals with mean inter-arrival ``poisson_mean`` TTIs.
    """

    qi: int
    gbr: float              # guaranteed bit rate, bit/s
    pdb: int                # packet delay budget, TTIs
    packet_size: int        # bits per arriving packet
    arrival_period: int
    poisson_mean: float = 0.0
    penalty_weight: float = 1.0

    def validate(self) -> None:
        if self.qi not in (1, 2, 3, 4):
            raise ConfigError(f"qi must be in 1..4, got {self.qi}")
        if self.pdb < 1:
            raise ConfigError(f"pdb must be >= 1, got {self.pdb}")
        if self.packet_size < 1:
            raise ConfigError(f"packet_size must be >= 1, got {self.packet_size}")
        if self.penalty_weight < 0:
            raise ConfigError("penalty_weight must be >= 0")
        if self.arrival_period < 0:
            raise ConfigError("arrival_period must be >= 0")
        if self.arrival_period == 0 and self.poisson_mean <= 0:
            raise ConfigError(
                f"qi {self.qi}: arrival_period 0 requires poisson_mean > 0")
        if self.gbr < 0:
            raise ConfigError("gbr must be >= 0")


def default_qos_profiles() -> tuple[QoSProfile, ...]:
    """Voice-, video-, web- and background-like classes.

    GBR defaults equal the offered load of each class so that serving all
    arrivals on time satisfies the rate contract.
    """
    return (
        QoSProfile(qi=1, gbr=18_400.0, pdb=100, packet_size=368,
                   arrival_period=20, penalty_weight=4.0),
        QoSProfile(qi=2, gbr=300_000.0, pdb=150, packet_size=3_000,
                   arrival_period=10, penalty_weight=3.0),
        QoSProfile(qi=3, gbr=240_000.0, pdb=300, packet_size=12_000,
                   arrival_period=0, poisson_mean=50.0, penalty_weight=2.0),
        QoSProfile(qi=4, gbr=120_000.0, pdb=500, packet_size=12_000,
                   arrival_period=0, poisson_mean=100.0, penalty_weight=1.0),
    )


@dataclass(frozen=True)
class CellConfig:
    """Static description of the simulated cell."""

    k: int = 32                      # UE count, multiple of 4
    n_prb: int = 25                  # PRBs allocated per TTI
    buffer_slots: int = 32           # per-UE buffer length L
    tti_duration: float = 1e-3       # seconds
    qos_profiles: tuple[QoSProfile, ...] = field(default_factory=default_qos_profiles)
    tbs_table: tuple[int, ...] = field(default_factory=default_tbs_table)

    # mobility (pedestrian-like by default)
    speed_mean: float = 1.4          # m/s
    speed_std: float = 0.2
    speed_floor: float = 0.1

    # channel model constants
    tx_power_dbm: float = 40.0
    noise_dbm: float = -100.0
    snr_min_db: float = 0.0
    snr_step_db: float = 2.0
    fading_std_db: float = 4.0

    # reward weights (per-class lateness weights live in the QoS profiles)
    drop_weight: float = 5.0
    gbr_weight: float = 1.0

    # exponential moving averages, per TTI
    cqi_ema: float = 0.01
    throughput_ema: float = 0.01

    def validate(self) -> None:
        if self.k < 4 or self.k % 4 != 0:
            raise ConfigError(f"k must be a positive multiple of 4, got {self.k}")
        if self.n_prb < 1:
            raise ConfigError(f"n_prb must be >= 1, got {self.n_prb}")
        if self.buffer_slots < 1:
            raise ConfigError(f"buffer_slots must be >= 1, got {self.buffer_slots}")
        if self.tti_duration <= 0:
            raise ConfigError("tti_duration must be > 0")
        if len(self.qos_profiles) != NUM_QOS_CLASSES:
            raise ConfigError("exactly 4 QoS profiles required")
        if sorted(p.qi for p in self.qos_profiles) != [1, 2, 3, 4]:
            raise ConfigError("QoS profiles must cover qi 1..4 exactly once")
        for profile in self.qos_profiles:
            profile.validate()
        if len(self.tbs_table) != CQI_LEVELS:
            raise ConfigError(f"tbs_table must have {CQI_LEVELS} entries")
        if self.tbs_table[0] != 0:
            raise ConfigError("tbs_table[0] must be 0")
        if any(b > a for b, a in zip(self.tbs_table, self.tbs_table[1:])):
            raise ConfigError("tbs_table must be non-decreasing")
        if self.speed_floor <= 0:
            raise ConfigError("speed_floor must be > 0")
        if not 0 < self.cqi_ema <= 1 or not 0 < self.throughput_ema <= 1:
            raise ConfigError("EMA coefficients must be in (0, 1]")
        if self.drop_weight < 0 or self.gbr_weight < 0:
            raise ConfigError("reward weights must be >= 0")
        if self.snr_step_db <= 0:
            raise ConfigError("snr_step_db must be > 0")

    def profile(self, qi: int) -> QoSProfile:
        for p in self.qos_profiles:
            if p.qi == qi:
                return p
        raise ConfigError(f"no QoS profile for qi {qi}")

    @property
    def max_packet_bits(self) -> int:
        return max(p.packet_size for p in self.qos_profiles)


def embedding_dim(n_prb: int) -> int:
    """Smallest n with n**4 >= n_prb (integer fourth root, rounded up)."""
    n = 1
    while n ** 4 < n_prb:
        n += 1
    return n


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters and feature-pipeline switches of the learning agent."""

    gamma: float = 0.95
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    # None: resolved to 30% of the run's total allocation steps at run start.
    epsilon_decay_steps: int | None = None

    mu0: float = 1.0                 # initial expert-match bonus
    rho: float = 0.95                # per-episode bonus decay

    batch_size: int = 64
    replay_capacity: int = 50_000
    learn_every: int = 4
    target_sync: int = 1_000         # learn steps between target syncs; 0 = online bootstrap

    shuffle_mode: str = "none"       # none | rps | sps (training-time feature copy only)
    age_cap: bool = False
    ue_shuffle_train: bool = True    # fresh input permutation per training forward pass
    eval_random_perm: bool = False   # evaluation defaults to the identity permutation
    expert: str = "knapsack"         # parallel expert granting the match bonus

    optimizer: str = "adam"          # adam | sgd
    learning_rate: float = 1e-4
    huber_delta: float = 1.0

    encoder_hidden: tuple[int, ...] = (16, 8)
    encoder_out: int = 3
    main_hidden: tuple[int, ...] = (79, 79)

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must be in [0, 1]")
        for name in ("epsilon_start", "epsilon_end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.epsilon_decay_steps is not None and self.epsilon_decay_steps < 1:
            raise ConfigError("epsilon_decay_steps must be >= 1 when set")
        if self.mu0 < 0:
            raise ConfigError("mu0 must be >= 0")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError("rho must be in (0, 1)")
        if self.batch_size < 1 or self.replay_capacity < 1:
            raise ConfigError("batch_size and replay_capacity must be >= 1")
        if self.batch_size > self.replay_capacity:
            raise ConfigError("batch_size cannot exceed replay_capacity")
        if self.learn_every < 1:
            raise ConfigError("learn_every must be >= 1")
        if self.target_sync < 0:
            raise ConfigError("target_sync must be >= 0")
        if self.shuffle_mode not in SHUFFLE_MODES:
            raise ConfigError(f"shuffle_mode must be one of {SHUFFLE_MODES}")
        if self.expert not in BASELINE_NAMES:
            raise ConfigError(f"expert must be one of {BASELINE_NAMES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.huber_delta <= 0:
            raise ConfigError("huber_delta must be > 0")
        if self.encoder_out < 1 or not self.encoder_hidden or not self.main_hidden:
            raise ConfigError("network widths must be positive and non-empty")


def apply_variant(cfg: TrainConfig, variant: str) -> TrainConfig:
    """Return ``cfg`` with the feature switches of a named agent variant.

    All variants keep the expert-match bonus, UE shuffling and the per-class
    encoders; they differ in age capping and packet shuffling:
    ``enn`` neither, ``nps`` capping only, ``rps``/``sps`` capping plus
    random/sorted packet shuffling.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    switches = {
        "enn": dict(age_cap=False, shuffle_mode="none"),
        "nps": dict(age_cap=True, shuffle_mode="none"),
        "rps": dict(age_cap=True, shuffle_mode="rps"),
        "sps": dict(age_cap=True, shuffle_mode="sps"),
    }[variant]
    return dataclasses.replace(cfg, **switches)


@dataclass(frozen=True)
class RunConfig:
    """Training/evaluation protocol settings."""

    episodes: int = 500
    steps_per_episode: int = 17_500   # allocation steps per training episode
    eval_every: int = 10              # episodes between evaluation points
    eval_steps: int | None = None     # None: one episode's worth of steps
    n_training_seeds: int = 7
    n_eval_seeds: int = 5
    n_test_seeds: int = 300
    benchmark_steps: int = 65_536

    def validate(self) -> None:
        if self.episodes < 1 or self.steps_per_episode < 1:
            raise ConfigError("episodes and steps_per_episode must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.eval_steps is not None and self.eval_steps < 1:
            raise ConfigError("eval_steps must be >= 1 when set")
        if min(self.n_training_seeds, self.n_eval_seeds, self.n_test_seeds) < 1:
            raise ConfigError("seed-set sizes must be >= 1")
        if self.benchmark_steps < 1:
            raise ConfigError("benchmark_steps must be >= 1")

    @property
    def resolved_eval_steps(self) -> int:
        return self.eval_steps if self.eval_steps is not None else self.steps_per_episode


@dataclass(frozen=True)
class WorkbenchConfig:
    """Bundle of the three config sections used by the harness and CLI."""

    cell: CellConfig = field(default_factory=CellConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> None:
        self.cell.validate()
        self.train.validate()
        self.run.validate()


# ---------------------------------------------------------------------------
# dict / YAML round-trip
# ---------------------------------------------------------------------------

_CELL_KEYS = ("k", "n_prb", "buffer_slots", "tti_duration", "tbs_table",
              "speed_mean", "speed_std", "speed_floor", "cqi_ema",
              "throughput_ema")
_CHANNEL_KEYS = ("tx_power_dbm", "noise_dbm", "snr_min_db", "snr_step_db",
                 "fading_std_db")
_REWARD_KEYS = ("drop_weight", "gbr_weight")


def config_to_dict(cfg: WorkbenchConfig) -> dict[str, Any]:
    """Plain-type dict mirroring the YAML layout (manifest echo, file dumps)."""
    cell = cfg.cell
    return {
        "cell": {k: _plain(getattr(cell, k)) for k in _CELL_KEYS},
        "channel": {k: getattr(cell, k) for k in _CHANNEL_KEYS},
        "reward": {k: getattr(cell, k) for k in _REWARD_KEYS},
        "qos": [dataclasses.asdict(p) for p in cell.qos_profiles],
        "train": _plain(dataclasses.asdict(cfg.train)),
        "run": dataclasses.asdict(cfg.run),
    }


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_from_dict(data: dict[str, Any]) -> WorkbenchConfig:
    """Build a validated config from a (possibly partial) nested dict."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(data) - {"cell", "channel", "reward", "qos", "train", "run"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    cell_kwargs: dict[str, Any] = {}
    for section, keys in (("cell", _CELL_KEYS), ("channel", _CHANNEL_KEYS),
                          ("reward", _REWARD_KEYS)):
        payload = data.get(section) or {}
        if not isinstance(payload, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        bad = set(payload) - set(keys)
        if bad:
            raise ConfigError(f"unknown keys in {section!r}: {sorted(bad)}")
        cell_kwargs.update(payload)
    if "tbs_table" in cell_kwargs:
        cell_kwargs["tbs_table"] = tuple(int(v) for v in cell_kwargs["tbs_table"])

    if "qos" in data and data["qos"] is not None:
        profiles = []
        for entry in data["qos"]:
            try:
                profiles.append(QoSProfile(**entry))
            except TypeError as exc:
                raise ConfigError(f"bad QoS profile entry: {exc}") from exc
        cell_kwargs["qos_profiles"] = tuple(profiles)

    def build(cls, payload, tuple_keys=()):
        payload = dict(payload or {})
        for key in tuple_keys:
            if key in payload:
                payload[key] = tuple(payload[key])
        try:
            return cls(**payload)
        except TypeError as exc:
            raise ConfigError(f"bad {cls.__name__} section: {exc}") from exc

    cfg = WorkbenchConfig(
        cell=build(CellConfig, cell_kwargs),
        train=build(TrainConfig, data.get("train"),
                    tuple_keys=("encoder_hidden", "main_hidden")),
        run=build(RunConfig, data.get("run")),
    )
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> WorkbenchConfig:
    """Read a YAML config file; missing keys fall back to defaults."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data or {})


def save_config(cfg: WorkbenchConfig, path: str | Path) -> None:
    Path(path).write_text(
        yaml.safe_dump(config_to_dict(cfg), sort_keys=False), encoding="utf-8")
