"""Deep-Q scheduling agent.

The action-value network is composed of three trainable parts:

* four per-class encoders (one parameter set shared by every UE of a QoS
  class) compressing each UE's raw features (CQI, its mean, and all buffer
  slot sizes and ages) down to a few values;
* a PRB embedding table giving the categorical "which PRB is next" input a
  small learned vector;
* a main dense network mapping the concatenated UE encodings plus the PRB
  vector to one Q value per UE.

Training-time regularization lives in the feature pipeline: packet ages can
be capped just past the delay budget, buffer slots can be re-drawn uniformly
(order-free or order-preserving) on the feature copy only, and the UE order
is shuffled around the main network with the inverse permutation applied to
its output, so Q[k] always scores UE k. A parallel expert scheduler grants a
per-episode-constant, exponentially decaying reward bonus whenever the
agent's action matches the expert's.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ofdmarl.checkpoint import load_checkpoint, save_checkpoint
from ofdmarl.config import (CellConfig, TrainConfig, WorkbenchConfig,
                            config_from_dict, config_to_dict, embedding_dim)
from ofdmarl.env import Observation
from ofdmarl.errors import ConfigError, NumericError
from ofdmarl.nn import (EmbeddingTable, Mlp, OptimizerState, huber,
                        init_embedding, init_mlp, mlp_backward, mlp_forward,
                        optimizer_step)
from ofdmarl.seeding import make_rng

QOS_CLASSES = (1, 2, 3, 4)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class AgentParams:
    encoders: dict[int, Mlp]        # per-QI shared encoder
    main: Mlp
    embedding: EmbeddingTable


def feature_width(cell: CellConfig) -> int:
    return 2 + 2 * cell.buffer_slots


def init_agent_params(cell: CellConfig, train: TrainConfig,
                      rng: np.random.Generator) -> AgentParams:
    enc_dims = (feature_width(cell), *train.encoder_hidden, train.encoder_out)
    encoders = {qi: init_mlp(enc_dims, rng, output_activation="relu")
                for qi in QOS_CLASSES}
    emb_dim = embedding_dim(cell.n_prb)
    main_dims = (cell.k * train.encoder_out + emb_dim, *train.main_hidden, cell.k)
    return AgentParams(
        encoders=encoders,
        main=init_mlp(main_dims, rng, output_activation="linear"),
        embedding=init_embedding(cell.n_prb, emb_dim, rng),
    )


def named_tensors(params: AgentParams) -> dict[str, np.ndarray]:
    """Stable name -> array view of every trainable tensor."""
    out: dict[str, np.ndarray] = {}
    for qi in QOS_CLASSES:
        for i, layer in enumerate(params.encoders[qi].layers):
            out[f"enc{qi}.w{i}"] = layer.w
            out[f"enc{qi}.b{i}"] = layer.b
    for i, layer in enumerate(params.main.layers):
        out[f"main.w{i}"] = layer.w
        out[f"main.b{i}"] = layer.b
    out["embedding"] = params.embedding.rows
    return out


def clone_params(params: AgentParams) -> AgentParams:
    return AgentParams(
        encoders={qi: Mlp([dataclasses.replace(l, w=l.w.copy(), b=l.b.copy())
                           for l in mlp.layers])
                  for qi, mlp in params.encoders.items()},
        main=Mlp([dataclasses.replace(l, w=l.w.copy(), b=l.b.copy())
                  for l in params.main.layers]),
        embedding=EmbeddingTable(rows=params.embedding.rows.copy()),
    )


# ---------------------------------------------------------------------------
# feature pipeline
# ---------------------------------------------------------------------------


def cap_age(age, pdb):
    """Clamp a packet age to just past its delay budget: min(age, pdb + 1)."""
    return np.minimum(age, np.asarray(pdb) + 1)


def shuffle_packets(sizes: np.ndarray, ages: np.ndarray, mode: str,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Re-draw the buffer-slot positions of one UE's packets (feature copy).

    ``rps`` places the m packets on a uniformly random m-subset of slots in
    uniformly random order; ``sps`` uses a uniformly random m-subset but keeps
    the packets' relative order; ``none`` is the identity.
    """
    if mode == "none":
        return sizes, ages
    occupied = sizes > 0
    m = int(occupied.sum())
    if m == 0:
        return sizes, ages
    slots = sizes.shape[0]
    new_sizes = np.zeros_like(sizes)
    new_ages = np.zeros_like(ages)
    if mode == "rps":
        positions = rng.permutation(slots)[:m]
    elif mode == "sps":
        positions = np.sort(rng.permutation(slots)[:m])
    else:
        raise ConfigError(f"unknown shuffle mode {mode!r}")
    new_sizes[positions] = sizes[occupied]
    new_ages[positions] = ages[occupied]
    return new_sizes, new_ages


def _shuffle_batch(sizes: np.ndarray, ages: np.ndarray, mode: str,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized per-(sample, UE) packet shuffling on (B, K, L) arrays.

    Relies on buffers being packed front-first in the observation, so the
    occupied slots of each row are exactly 0..m-1 in packet order.
    """
    b, k, slots = sizes.shape
    occ = sizes > 0
    m = occ.sum(axis=-1)                                    # (B, K)
    keys = rng.random((b, k, slots))
    perm = np.argsort(keys, axis=-1)                        # uniform permutation per row
    new_sizes = np.zeros_like(sizes)
    new_ages = np.zeros_like(ages)
    if mode == "rps":
        bi, ki, ji = np.nonzero(occ)
        pos = perm[bi, ki, ji]                              # packet j -> perm[j]
        new_sizes[bi, ki, pos] = sizes[bi, ki, ji]
        new_ages[bi, ki, pos] = ages[bi, ki, ji]
    else:  # sps: m slots with the smallest sort keys, filled in slot order
        rank = np.argsort(perm, axis=-1)
        subset = rank < m[..., None]
        new_sizes[subset] = sizes[occ]
        new_ages[subset] = ages[occ]
    return new_sizes, new_ages


def build_features(observations: list[Observation], cell: CellConfig,
                   train: TrainConfig, rng: np.random.Generator | None = None,
                   training: bool = False) -> np.ndarray:
    """Per-UE feature tensor (B, K, 2 + 2L).

    Layout per UE: [cqi, cqi_mean, sizes 1..L, ages 1..L] with empty slots
    contributing (0, 0). Sizes are scaled into [0, 1] by the largest packet,
    ages by 1/(pdb + 1). Age capping and packet shuffling apply before
    scaling; shuffling runs only when ``training`` is set.
    """
    sizes = np.stack([o.sizes for o in observations]).astype(float)
    ages = np.stack([o.ages for o in observations]).astype(float)
    qi = observations[0].qi
    pdb = np.array([cell.profile(int(q)).pdb for q in qi], dtype=float)

    if train.age_cap:
        ages = np.minimum(ages, pdb[None, :, None] + 1.0)
    if training and train.shuffle_mode != "none":
        if rng is None:
            raise ValueError("training-time shuffling needs an rng")
        sizes, ages = _shuffle_batch(sizes, ages, train.shuffle_mode, rng)

    sizes /= float(cell.max_packet_bits)
    ages /= (pdb[None, :, None] + 1.0)
    cqi = np.stack([o.cqi for o in observations]).astype(float)
    cqi_mean = np.stack([o.cqi_mean for o in observations])
    return np.concatenate(
        [cqi[..., None], cqi_mean[..., None], sizes, ages], axis=-1)


def build_ue_features(obs: Observation, ue: int, cell: CellConfig,
                      train: TrainConfig, rng: np.random.Generator | None = None,
                      training: bool = False) -> np.ndarray:
    """Single UE's feature vector (2 + 2L,); see :func:`build_features`."""
    return build_features([obs], cell, train, rng, training)[0, ue]


def encode_ue(params: AgentParams, qi: int, features: np.ndarray) -> np.ndarray:
    """Compress one UE's features through its class's shared encoder."""
    y, _ = mlp_forward(params.encoders[qi], features)
    return y


def identity_perm(k: int) -> np.ndarray:
    return np.arange(k, dtype=np.int64)


# ---------------------------------------------------------------------------
# Q computation (batched core + single-state wrapper)
# ---------------------------------------------------------------------------


@dataclass
class _ForwardState:
    enc_caches: dict[int, tuple]    # qi -> (cache, ue columns)
    enc: np.ndarray                 # (B, K, E)
    main_cache: object
    perms: np.ndarray               # (B, K)
    prb_indices: np.ndarray         # (B,)
    x: np.ndarray                   # (B, K*E + emb)


def _forward_q(params: AgentParams, feats: np.ndarray, qi_by_ue: np.ndarray,
               prb_indices: np.ndarray,
               perms: np.ndarray) -> tuple[np.ndarray, _ForwardState]:
    b, k, _ = feats.shape
    e = params.encoders[1].output_dim
    enc = np.empty((b, k, e))
    enc_caches: dict[int, tuple] = {}
    for qi in QOS_CLASSES:
        cols = np.nonzero(qi_by_ue == qi)[0]
        if cols.size == 0:
            continue
        flat = feats[:, cols, :].reshape(b * len(cols), -1)
        y, cache = mlp_forward(params.encoders[qi], flat)
        enc[:, cols, :] = y.reshape(b, len(cols), e)
        enc_caches[qi] = (cache, cols)

    gathered = np.take_along_axis(enc, perms[..., None], axis=1)
    emb_rows = params.embedding.rows[prb_indices]
    x = np.concatenate([gathered.reshape(b, k * e), emb_rows], axis=1)
    out, main_cache = mlp_forward(params.main, x)
    q = np.empty_like(out)
    np.put_along_axis(q, perms, out, axis=1)    # undo the UE shuffle
    return q, _ForwardState(enc_caches, enc, main_cache, perms, prb_indices, x)


def q_values(params: AgentParams, obs: Observation, prb_index: int,
             perm: np.ndarray, cell: CellConfig, train: TrainConfig,
             rng: np.random.Generator | None = None,
             training: bool = False) -> np.ndarray:
    """Q vector over UEs for one observation; ``q[k]`` always scores UE k."""
    feats = build_features([obs], cell, train, rng, training)
    q, _ = _forward_q(params, feats, obs.qi, np.asarray([prb_index]),
                      np.asarray(perm)[None, :])
    return q[0]


def _backward_q(params: AgentParams, state: _ForwardState,
                dq: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of sum(q * dq) w.r.t. every trainable tensor."""
    b, k = dq.shape
    e = params.encoders[1].output_dim
    dout = np.take_along_axis(dq, state.perms, axis=1)
    main_grads, dx = mlp_backward(params.main, state.main_cache, dout)

    grads: dict[str, np.ndarray] = {}
    for i, (dw, db) in enumerate(main_grads):
        grads[f"main.w{i}"] = dw
        grads[f"main.b{i}"] = db

    d_gathered = dx[:, : k * e].reshape(b, k, e)
    denc = np.zeros_like(state.enc)
    np.put_along_axis(denc, state.perms[..., None],
                      d_gathered, axis=1)
    for qi, (cache, cols) in state.enc_caches.items():
        flat = denc[:, cols, :].reshape(b * len(cols), e)
        enc_grads, _ = mlp_backward(params.encoders[qi], cache, flat)
        for i, (dw, db) in enumerate(enc_grads):
            grads[f"enc{qi}.w{i}"] = dw
            grads[f"enc{qi}.b{i}"] = db
    for qi in QOS_CLASSES:
        if qi not in state.enc_caches:
            for i, layer in enumerate(params.encoders[qi].layers):
                grads[f"enc{qi}.w{i}"] = np.zeros_like(layer.w)
                grads[f"enc{qi}.b{i}"] = np.zeros_like(layer.b)

    demb = np.zeros_like(params.embedding.rows)
    np.add.at(demb, state.prb_indices, dx[:, k * e:])
    grads["embedding"] = demb
    return grads


# ---------------------------------------------------------------------------
# action selection and reward shaping
# ---------------------------------------------------------------------------


def select_action(q: np.ndarray, epsilon: float,
                  rng: np.random.Generator) -> int:
    """Epsilon-greedy over the Q vector; greedy ties go to the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(0, len(q)))
    return int(np.argmax(q))


def bonus_scale(episode: int, train: TrainConfig) -> float:
    """Expert-match bonus value for an episode: mu0 * rho**episode."""
    return train.mu0 * train.rho ** episode


def mimic_bonus(agent_action: int, expert_action: int, episode: int,
                train: TrainConfig) -> float:
    """Bonus granted when the agent picked the parallel expert's action."""
    if episode < 0:
        raise ValueError("episode must be >= 0")
    return bonus_scale(episode, train) if agent_action == expert_action else 0.0


# ---------------------------------------------------------------------------
# replay memory
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    obs: Observation
    action: int
    reward: float               # shaped: base penalty + match bonus
    next_obs: Observation
    terminal: bool


class ReplayMemory:
    """Bounded ring of transitions with uniform without-replacement sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._cursor = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, transition: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._cursor] = transition
        self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, batch_size: int,
               rng: np.random.Generator) -> list[Transition] | None:
        """A uniform batch, or None while the memory is still under-filled."""
        if len(self._items) < batch_size:
            return None
        picks = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in picks]


# ---------------------------------------------------------------------------
# TD training step
# ---------------------------------------------------------------------------


def _draw_perms(b: int, k: int, enabled: bool,
                rng: np.random.Generator) -> np.ndarray:
    if not enabled:
        return np.tile(identity_perm(k), (b, 1))
    return np.stack([rng.permutation(k) for _ in range(b)])


def compute_td_loss(params: AgentParams, target_params: AgentParams,
                    batch: list[Transition], cell: CellConfig,
                    train: TrainConfig, rng: np.random.Generator,
                    diagnostics: dict | None = None, need_grads: bool = True,
                    ) -> tuple[float, dict[str, np.ndarray] | None]:
    """Mean Huber TD loss over a batch plus gradients for every tensor.

    Stored observations are replayed through the full feature pipeline with
    fresh shuffle and permutation draws. The bootstrap term comes from
    ``target_params`` (pass the online params for plain online bootstrapping)
    and is dropped on terminal transitions.

    ``need_grads=False`` skips the backward pass (finite-difference probing).
    When ``diagnostics`` is given it receives the distances of this forward
    pass to the nearest ReLU and Huber kinks (finite differences are only
    trustworthy away from both).
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    b = len(batch)
    k = cell.k
    actions = np.array([t.action for t in batch])
    rewards = np.array([t.reward for t in batch])
    terminal = np.array([t.terminal for t in batch])

    qi_by_ue = batch[0].obs.qi
    feats = build_features([t.obs for t in batch], cell, train, rng, training=True)
    prbs = np.array([t.obs.prb_cursor for t in batch])
    perms = _draw_perms(b, k, train.ue_shuffle_train, rng)
    q, state = _forward_q(params, feats, qi_by_ue, prbs, perms)
    q_taken = q[np.arange(b), actions]

    if train.gamma == 0.0:
        targets = rewards           # no bootstrap term at all
    else:
        next_feats = build_features([t.next_obs for t in batch], cell, train,
                                    rng, training=True)
        next_prbs = np.array([t.next_obs.prb_cursor for t in batch])
        next_perms = _draw_perms(b, k, train.ue_shuffle_train, rng)
        q_next, _ = _forward_q(target_params, next_feats, qi_by_ue, next_prbs,
                               next_perms)
        targets = np.where(terminal, rewards,
                           rewards + train.gamma * q_next.max(axis=1))

    losses, dpred = huber(q_taken, targets, train.huber_delta)
    loss = float(np.mean(losses))

    grads = None
    if need_grads:
        dq = np.zeros((b, k))
        dq[np.arange(b), actions] = dpred / b
        grads = _backward_q(params, state, dq)
    if diagnostics is not None:
        diagnostics["relu_kink_margin"] = _relu_kink_margin(params, state)
        diagnostics["huber_kink_margin"] = float(
            np.min(np.abs(np.abs(q_taken - targets) - train.huber_delta)))
    return loss, grads


def _relu_kink_margin(params: AgentParams, state: _ForwardState) -> float:
    """Smallest |pre-activation| over the online pass's ReLU layers."""
    margin = np.inf
    caches = [cache for cache, _ in state.enc_caches.values()]
    caches.append(state.main_cache)
    for cache in caches:
        for layer, z in zip(cache.mlp.layers, cache.preacts):
            if layer.activation == "relu" and z.size:
                margin = min(margin, float(np.min(np.abs(z))))
    return margin


def td_train_step(params: AgentParams, target_params: AgentParams,
                  batch: list[Transition], cell: CellConfig,
                  train: TrainConfig, opt: OptimizerState,
                  rng: np.random.Generator) -> float:
    """One descent step on the batch TD loss; returns the loss.

    A non-finite loss raises NumericError before any parameter changes.
    """
    loss, grads = compute_td_loss(params, target_params, batch, cell, train, rng)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite TD loss {loss!r}; step aborted")
    optimizer_step(opt, named_tensors(params), grads)
    return loss


# ---------------------------------------------------------------------------
# greedy evaluation policy
# ---------------------------------------------------------------------------


class DqnPolicy:
    """Greedy scheduler over a trained Q network (no exploration).

    Evaluation keeps the real buffer layout (no packet shuffling) and uses
    the identity UE permutation unless ``eval_random_perm`` is set.
    """

    def __init__(self, params: AgentParams, cell: CellConfig,
                 train: TrainConfig, seed: int = 0):
        self.params = params
        self.cell = cell
        self.train = train
        self._seed = seed
        self._rng = make_rng(seed, "eval-perm")

    def reset(self, seed: int = 0) -> None:
        self._rng = make_rng(seed, "eval-perm")

    def select(self, obs: Observation) -> int:
        if self.train.eval_random_perm:
            perm = self._rng.permutation(self.cell.k)
        else:
            perm = identity_perm(self.cell.k)
        q = q_values(self.params, obs, obs.prb_cursor, perm,
                     self.cell, self.train)
        return int(np.argmax(q))


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def save_agent(path, params: AgentParams, cell: CellConfig, train: TrainConfig,
               opt: OptimizerState | None = None) -> None:
    tensors = dict(named_tensors(params))
    if opt is not None:
        tensors["opt.step"] = np.asarray(float(opt.step))
        for name, m in opt.m.items():
            tensors[f"opt.m.{name}"] = m
        for name, v in opt.v.items():
            tensors[f"opt.v.{name}"] = v
    meta = config_to_dict(WorkbenchConfig(cell=cell, train=train))
    del meta["run"]
    meta["optimizer"] = {"method": train.optimizer,
                         "learning_rate": train.learning_rate,
                         "has_state": opt is not None}
    save_checkpoint(path, tensors, meta)


def load_agent(path) -> tuple[AgentParams, CellConfig, TrainConfig, OptimizerState]:
    tensors, meta = load_checkpoint(path)
    cfg = config_from_dict({k: v for k, v in meta.items()
                            if k in ("cell", "channel", "reward", "qos", "train")})
    cell, train = cfg.cell, cfg.train
    params = init_agent_params(cell, train, np.random.default_rng(0))
    for name, array in named_tensors(params).items():
        stored = tensors.get(name)
        if stored is None or stored.shape != array.shape:
            raise ConfigError(f"checkpoint tensor {name!r} missing or misshaped")
        array[...] = stored

    opt = OptimizerState(method=train.optimizer,
                         learning_rate=train.learning_rate)
    if "opt.step" in tensors:
        opt.step = int(tensors["opt.step"])
        for name in named_tensors(params):
            if f"opt.m.{name}" in tensors:
                opt.m[name] = tensors[f"opt.m.{name}"].copy()
                opt.v[name] = tensors[f"opt.v.{name}"].copy()
    return params, cell, train, opt


def new_agent(cell: CellConfig, train: TrainConfig, seed: int) -> AgentParams:
    """Freshly initialized agent parameters for one training run."""
    return init_agent_params(cell, train, make_rng(seed, "agent-init"))
