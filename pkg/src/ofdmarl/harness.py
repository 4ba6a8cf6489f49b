"""Training, evaluation and benchmark orchestration.

Seed handling: a single master seed is split by purpose label into disjoint
training / evaluation / test environment seed sets plus the agent's own
streams (initialization, exploration, feature shuffling, replay sampling).
Every number in every emitted CSV is a pure function of (config, master seed).

Emitted files (all under the run's output directory):

* ``training_log.csv``  -- one row per allocation step:
  step, episode, epsilon, mu, base_reward, bonus, loss (empty when no update).
* ``eval_log.csv``      -- one row per evaluation point:
  episode, step, mean, median, q1, q3, min, max, checkpoint.
* ``benchmark.csv``     -- one row per (agent, seed) plus one summary row per
  agent: agent, seed, mean_reward, median, q1, q3, min, max, outliers.
* ``checkpoints/episode_NNNN.ckpt``.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ofdmarl.agent import (DqnPolicy, ReplayMemory, Transition, bonus_scale,
                           clone_params, load_agent, mimic_bonus, new_agent,
                           q_values, save_agent, select_action, td_train_step)
from ofdmarl.baselines import make_baseline
from ofdmarl.config import (CellConfig, TrainConfig, WorkbenchConfig,
                            BASELINE_NAMES)
from ofdmarl.env import DownlinkEnv, TrajectoryWriter
from ofdmarl.errors import ConfigError, NumericError
from ofdmarl.nn import OptimizerState
from ofdmarl.seeding import derive_seed, make_rng


# ---------------------------------------------------------------------------
# seed splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvSplit:
    """Pairwise-disjoint environment seed sets."""

    training_seeds: tuple[int, ...]
    eval_seeds: tuple[int, ...]
    test_seeds: tuple[int, ...]

    def validate(self) -> None:
        groups = (set(self.training_seeds), set(self.eval_seeds),
                  set(self.test_seeds))
        sizes = (len(self.training_seeds), len(self.eval_seeds),
                 len(self.test_seeds))
        if tuple(len(g) for g in groups) != sizes:
            raise ConfigError("duplicate seeds within a split group")
        if groups[0] & groups[1] or groups[0] & groups[2] or groups[1] & groups[2]:
            raise ConfigError("environment seed sets must be pairwise disjoint")


def make_split(master_seed: int, n_training: int = 7, n_eval: int = 5,
               n_test: int = 300) -> EnvSplit:
    split = EnvSplit(
        training_seeds=tuple(derive_seed(master_seed, f"env-train:{i}")
                             for i in range(n_training)),
        eval_seeds=tuple(derive_seed(master_seed, f"env-eval:{i}")
                         for i in range(n_eval)),
        test_seeds=tuple(derive_seed(master_seed, f"env-test:{i}")
                         for i in range(n_test)),
    )
    split.validate()
    return split


# ---------------------------------------------------------------------------
# rollout + evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    """Per-environment mean rewards plus their aggregate statistics."""

    per_seed: tuple[tuple[int, float], ...]
    mean: float
    median: float
    q1: float
    q3: float
    min: float
    max: float

    @classmethod
    def from_per_seed(cls, per_seed: list[tuple[int, float]]) -> "EvalReport":
        values = np.array([v for _, v in per_seed])
        return cls(
            per_seed=tuple(per_seed),
            mean=float(values.mean()),
            median=float(np.median(values)),
            q1=float(np.percentile(values, 25)),
            q3=float(np.percentile(values, 75)),
            min=float(values.min()),
            max=float(values.max()),
        )

    def outliers(self) -> list[tuple[int, float]]:
        """Seeds beyond 1.5 IQR outside the quartiles (box-plot rule)."""
        iqr = self.q3 - self.q1
        lo, hi = self.q1 - 1.5 * iqr, self.q3 + 1.5 * iqr
        return [(s, v) for s, v in self.per_seed if v < lo or v > hi]


def rollout(policy, cell: CellConfig, seed: int, steps: int,
            trajectory: TrajectoryWriter | None = None) -> float:
    """Run ``steps`` allocation steps on a fresh environment.

    Returns the mean reward per completed TTI (0.0 if no TTI completed).
    """
    env = DownlinkEnv(cell, seed)
    policy.reset(seed)
    obs = env.observe()
    total = 0.0
    for _ in range(steps):
        action = policy.select(obs)
        bits, reward = env.allocate_prb(action)
        total += reward
        if trajectory is not None:
            trajectory.record(obs.tti, obs.prb_cursor, action, bits, reward)
        obs = env.observe()
    return total / env.tti if env.tti else 0.0


def run_eval(policy, cell: CellConfig, seeds: tuple[int, ...],
             steps: int) -> EvalReport:
    """Evaluate one policy across environments; deterministic per inputs."""
    per_seed = [(seed, rollout(policy, cell, seed, steps)) for seed in seeds]
    return EvalReport.from_per_seed(per_seed)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainingResult:
    training_log: Path
    eval_log: Path
    checkpoints: list[Path]
    episodes_completed: int
    aborted: bool = False
    error: str | None = None

    @property
    def final_checkpoint(self) -> Path | None:
        return self.checkpoints[-1] if self.checkpoints else None


def epsilon_at(step: int, train: TrainConfig, decay_steps: int) -> float:
    frac = min(step / decay_steps, 1.0) if decay_steps > 0 else 1.0
    return train.epsilon_start + (train.epsilon_end - train.epsilon_start) * frac


def _fmt(value: float) -> str:
    return repr(float(value))


def run_training(cfg: WorkbenchConfig, split: EnvSplit, master_seed: int,
                 out_dir: str | Path,
                 debug_nan_at: int | None = None) -> TrainingResult:
    """Full training run: episodes round-robin over the training seeds,
    epsilon-greedy acting with the expert-match bonus, replay learning, and
    an evaluation + checkpoint every ``eval_every`` episodes.

    A numeric failure stops the run but keeps all logs and the checkpoints
    written so far.
    """
    cfg.validate()
    split.validate()
    cell, train, run = cfg.cell, cfg.train, cfg.run
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    total_steps = run.episodes * run.steps_per_episode
    decay_steps = (train.epsilon_decay_steps if train.epsilon_decay_steps
                   else max(int(0.3 * total_steps), 1))

    params = new_agent(cell, train, master_seed)
    target = params if train.target_sync == 0 else clone_params(params)
    opt = OptimizerState(method=train.optimizer,
                         learning_rate=train.learning_rate)
    replay = ReplayMemory(train.replay_capacity)
    expert = make_baseline(train.expert, cell)

    rng_explore = make_rng(master_seed, "explore")
    rng_shuffle = make_rng(master_seed, "shuffle")
    rng_perm = make_rng(master_seed, "perm")
    rng_replay = make_rng(master_seed, "replay")

    checkpoints: list[Path] = []
    result_error: str | None = None
    global_step = 0
    learn_steps = 0
    episodes_done = 0

    training_log = out_dir / "training_log.csv"
    eval_log = out_dir / "eval_log.csv"
    with open(training_log, "w", newline="") as tlog_f, \
            open(eval_log, "w", newline="") as elog_f:
        tlog = csv.writer(tlog_f)
        tlog.writerow(["step", "episode", "epsilon", "mu", "base_reward",
                       "bonus", "loss"])
        elog = csv.writer(elog_f)
        elog.writerow(["episode", "step", "mean", "median", "q1", "q3",
                       "min", "max", "checkpoint"])

        def save_point(episode: int) -> Path:
            path = ckpt_dir / f"episode_{episode:04d}.ckpt"
            save_agent(path, params, cell, train, opt)
            checkpoints.append(path)
            return path

        def eval_point(episode: int) -> None:
            path = save_point(episode)
            policy = DqnPolicy(params, cell, train)
            report = run_eval(policy, cell, split.eval_seeds,
                              run.resolved_eval_steps)
            elog.writerow([episode, global_step, _fmt(report.mean),
                           _fmt(report.median), _fmt(report.q1),
                           _fmt(report.q3), _fmt(report.min),
                           _fmt(report.max), path.name])
            elog_f.flush()

        try:
            for episode in range(run.episodes):
                env_seed = split.training_seeds[episode % len(split.training_seeds)]
                env = DownlinkEnv(cell, env_seed)
                expert.reset(env_seed)
                mu = bonus_scale(episode, train)
                obs = env.observe()

                for step_in_episode in range(run.steps_per_episode):
                    epsilon = epsilon_at(global_step, train, decay_steps)
                    if train.ue_shuffle_train:
                        perm = rng_perm.permutation(cell.k)
                    else:
                        perm = np.arange(cell.k)
                    q = q_values(params, obs, obs.prb_cursor, perm, cell,
                                 train, rng=rng_shuffle, training=True)
                    action = select_action(q, epsilon, rng_explore)
                    expert_action = expert.select(obs)
                    bonus = mimic_bonus(action, expert_action, episode, train)

                    _, base_reward = env.allocate_prb(action)
                    next_obs = env.observe()
                    terminal = step_in_episode == run.steps_per_episode - 1
                    replay.push(Transition(obs, action, base_reward + bonus,
                                           next_obs, terminal))

                    loss_repr = ""
                    if global_step % train.learn_every == 0:
                        batch = replay.sample(train.batch_size, rng_replay)
                        if batch is not None:
                            if debug_nan_at is not None and global_step >= debug_nan_at:
                                params.main.layers[0].w[0, 0] = np.nan
                            loss = td_train_step(params, target, batch, cell,
                                                 train, opt, rng_shuffle)
                            loss_repr = _fmt(loss)
                            learn_steps += 1
                            if train.target_sync > 0 and \
                                    learn_steps % train.target_sync == 0:
                                target = clone_params(params)

                    tlog.writerow([global_step, episode, _fmt(epsilon),
                                   _fmt(mu), _fmt(base_reward), _fmt(bonus),
                                   loss_repr])
                    obs = next_obs
                    global_step += 1

                episodes_done = episode + 1
                if episodes_done % run.eval_every == 0:
                    eval_point(episodes_done)

            if not checkpoints or episodes_done % run.eval_every != 0:
                save_point(episodes_done)
        except NumericError as exc:
            result_error = str(exc)

    return TrainingResult(
        training_log=training_log,
        eval_log=eval_log,
        checkpoints=checkpoints,
        episodes_completed=episodes_done,
        aborted=result_error is not None,
        error=result_error,
    )


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


def make_policy(spec: str, cell: CellConfig, seed: int = 0):
    """Policy from an agent spec: a baseline name or ``dqn:<checkpoint>``."""
    if spec.startswith("dqn:"):
        path = Path(spec[4:])
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        params, ckpt_cell, train, _ = load_agent(path)
        for field_name in ("k", "n_prb", "buffer_slots"):
            if getattr(ckpt_cell, field_name) != getattr(cell, field_name):
                raise ConfigError(
                    f"checkpoint {path} was trained with {field_name}="
                    f"{getattr(ckpt_cell, field_name)}, run uses "
                    f"{getattr(cell, field_name)}")
        return DqnPolicy(params, cell, train, seed)
    if spec in BASELINE_NAMES:
        return make_baseline(spec, cell, seed)
    raise ConfigError(
        f"unknown agent {spec!r}; expected one of {BASELINE_NAMES} or dqn:<ckpt>")


def _bench_task(args) -> tuple[str, int, float]:
    spec, cell, seed, steps = args
    policy = make_policy(spec, cell)
    return spec, seed, rollout(policy, cell, seed, steps)


def run_benchmark(specs: list[str], cell: CellConfig,
                  seeds: tuple[int, ...], steps: int,
                  jobs: int = 1) -> dict[str, EvalReport]:
    """Cross product of agents and test environments."""
    for spec in specs:
        make_policy(spec, cell)     # fail fast on bad specs / checkpoints
    tasks = [(spec, cell, seed, steps) for spec in specs for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_bench_task, tasks, chunksize=4))
    else:
        results = [_bench_task(t) for t in tasks]

    reports: dict[str, EvalReport] = {}
    for spec in specs:
        per_seed = [(seed, value) for s, seed, value in results if s == spec]
        reports[spec] = EvalReport.from_per_seed(per_seed)
    return reports


def write_benchmark_csv(reports: dict[str, EvalReport], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["agent", "seed", "mean_reward", "median", "q1", "q3",
                         "min", "max", "outliers"])
        for spec, report in reports.items():
            for seed, value in report.per_seed:
                writer.writerow([spec, seed, _fmt(value), "", "", "", "", "", ""])
            outliers = ";".join(f"{s}:{_fmt(v)}" for s, v in report.outliers())
            writer.writerow([spec, "summary", _fmt(report.mean),
                             _fmt(report.median), _fmt(report.q1),
                             _fmt(report.q3), _fmt(report.min),
                             _fmt(report.max), outliers])


def write_eval_csv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seed", "mean_reward"])
        for seed, value in report.per_seed:
            writer.writerow([seed, _fmt(value)])
        writer.writerow(["mean", _fmt(report.mean)])
        writer.writerow(["median", _fmt(report.median)])
        writer.writerow(["q1", _fmt(report.q1)])
        writer.writerow(["q3", _fmt(report.q3)])
        writer.writerow(["min", _fmt(report.min)])
        writer.writerow(["max", _fmt(report.max)])


# ---------------------------------------------------------------------------
# training-band aggregation (plot-ready CSV over several runs)
# ---------------------------------------------------------------------------


def aggregate_bands(eval_logs: list[str | Path], path: str | Path) -> None:
    """Combine several runs' eval logs into per-episode band columns.

    Columns: episode, median, inner_lo, inner_hi, outer_lo, outer_hi, where
    the inner band averages the 2nd/3rd worst and 2nd/3rd best runs and the
    outer band is the min/max envelope.
    """
    series: dict[int, list[float]] = {}
    for log in eval_logs:
        with open(log, newline="") as f:
            for row in csv.DictReader(f):
                series.setdefault(int(row["episode"]), []).append(
                    float(row["mean"]))
    n_runs = len(eval_logs)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["episode", "median", "inner_lo", "inner_hi",
                         "outer_lo", "outer_hi"])
        for episode in sorted(series):
            values = sorted(series[episode])
            if len(values) != n_runs:
                continue    # episode not present in every run
            if n_runs >= 3:
                inner_lo = float(np.mean(values[1:3]))
                inner_hi = float(np.mean(values[-3:-1]))
            else:
                inner_lo, inner_hi = values[0], values[-1]
            writer.writerow([episode, _fmt(float(np.median(values))),
                             _fmt(inner_lo), _fmt(inner_hi),
                             _fmt(values[0]), _fmt(values[-1])])
