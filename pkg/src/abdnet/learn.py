"""Training tracks: PPO-lite policy optimization, supervised dynamics
regression, and mass-shift retention evaluation.

Everything is seeded and single-process; rerunning with the same config is
bit-reproducible (wall-clock columns are zeroed in deterministic mode).
"""
from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, asdict, replace as dc_replace

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor, adam_step, backward, parameter
from .actors import (
    AbdParams,
    CriticMlp,
    TreeMismatchError,  # re-exported: retention evaluation raises it
    encode,
    load_checkpoint,
    make_actor,
    match_width,
    message_pass,
    orth_loss,
    orthogonal,
    param_count,
    save_checkpoint,
)
from .dynamics import mass_scaled
from .envs import Environment, EnvSpec, TrajectoryBatch, VecEnvs

Array = np.ndarray


class NaNLossError(Exception):
    """Training loss went non-finite; carries the offending iteration."""

    def __init__(self, iteration: int, detail: str = ""):
        self.iteration = iteration
        super().__init__(f"non-finite loss at iteration {iteration} {detail}".rstrip())


class EmptyDatasetError(Exception):
    pass


def _deterministic_default() -> bool:
    return os.environ.get("ABD_DETERMINISTIC", "") == "1"


@dataclass
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    lr: float = 3e-4
    lambda_orth: float = 1e-2
    entropy_coef: float = 1e-3
    value_coef: float = 0.5
    total_steps: int = 100_000
    n_envs: int = 8
    rollout_steps: int = 128
    seed: int = 0
    eval_interval: int = 10
    d: int = 16
    critic_hidden: int = 64
    orth_per_sample: bool = False
    stop_return: float | None = None
    deterministic: bool = field(default_factory=_deterministic_default)
    # regression track
    regress_epochs: int = 40
    regress_lr: float = 1e-3
    qd_scale: float = 0.1  # fixed per-block scaling of velocity observations

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if not self.clip_eps > 0.0:
            raise ValueError(f"clip_eps must be positive, got {self.clip_eps}")
        if self.minibatch < 1 or self.epochs < 1 or self.n_envs < 1:
            raise ValueError("minibatch, epochs and n_envs must be >= 1")

    def as_dict(self) -> dict:
        return asdict(self)


METRICS_COLUMNS = ["iter", "env_steps", "mean_return", "policy_loss",
                   "value_loss", "entropy", "orth_loss", "wall_ms"]


# ---------------------------------------------------------------------------
# Gaussian policy math (numpy for rollouts, tape ops for updates; both omit
# the same additive constant so ratios and entropies stay consistent)
# ---------------------------------------------------------------------------

def gaussian_logp_np(actions: Array, mean: Array, log_std: Array) -> Array:
    z = (actions - mean) * np.exp(-log_std)[None, :]
    return -0.5 * np.sum(z * z, axis=1) - np.sum(log_std)


def _gaussian_logp_graph(actions: Array, mean_t, log_std_t):
    diff = ad.sub(Tensor(actions), mean_t)
    inv_std = ad.exp(ad.scalar_mul(log_std_t, -1.0))
    z = ad.mul_rowvec(diff, inv_std)
    quad = ad.scalar_mul(ad.sum_axis(ad.square(z), 1), -0.5)
    return ad.add_scalar(quad, ad.scalar_mul(ad.sum_(log_std_t), -1.0))


def ppo_actor_loss(actor, obs: Array, actions: Array, advantages: Array,
                   logp_old: Array, config: TrainConfig):
    """Clipped-surrogate actor loss (+ orthogonality penalty, - entropy bonus).

    Pure function of the actor parameters given a frozen batch, so it doubles
    as the target of the finite-difference gradient audit.
    """
    want_orth = config.lambda_orth > 0.0
    out = actor.forward(Tensor(obs), want_orth=want_orth)
    logp = _gaussian_logp_graph(actions, out.mean, out.log_std)
    ratio = ad.exp(ad.sub(logp, Tensor(logp_old)))
    adv = Tensor(advantages)
    clipped = ad.clamp(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps)
    surrogate = ad.minimum(ad.elementwise_mul(ratio, adv),
                           ad.elementwise_mul(clipped, adv))
    policy_loss = ad.scalar_mul(ad.mean(surrogate), -1.0)
    entropy = ad.sum_(out.log_std)  # diagonal Gaussian, up to a constant
    total = ad.sub(policy_loss, ad.scalar_mul(entropy, config.entropy_coef))
    orth_value = 0.0
    if out.orth_loss is not None:
        total = ad.add(total, ad.scalar_mul(out.orth_loss, config.lambda_orth))
        orth_value = out.orth_loss.item()
    parts = {"policy_loss": policy_loss.item(), "entropy": entropy.item(),
             "orth_loss": orth_value}
    return total, parts


# ---------------------------------------------------------------------------
# Generalized advantage estimation
# ---------------------------------------------------------------------------

def gae_advantages(rewards: Array, values: Array, dones: Array, truncs: Array,
                   bootstrap: Array, last_values: Array,
                   gamma: float, lam: float) -> tuple[Array, Array]:
    """Advantages/returns for a (T, N) rollout block.

    `bootstrap[t, k]` is V(s_{t+1}) where stream k was truncated at step t;
    `last_values[k]` bootstraps streams still running at the block boundary.
    True terminals propagate zero value and both kinds of episode end cut the
    recursive accumulation.
    """
    T, N = rewards.shape
    adv = np.zeros((T, N))
    running = np.zeros(N)
    for t in range(T - 1, -1, -1):
        if t == T - 1:
            v_next = last_values.copy()
        else:
            v_next = values[t + 1].copy()
        ended = dones[t] | truncs[t]
        v_next[truncs[t]] = bootstrap[t, truncs[t]]
        v_next[dones[t]] = 0.0
        delta = rewards[t] + gamma * v_next - values[t]
        running = delta + gamma * lam * np.where(ended, 0.0, running)
        adv[t] = running
    return adv, adv + values


# ---------------------------------------------------------------------------
# PPO training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    actor: object
    critic: CriticMlp
    metrics: list[dict]
    checkpoints: list[str]
    spec: EnvSpec
    config: TrainConfig


def _forward_mean_nograd(actor, obs: Array):
    out = actor.forward(Tensor(obs), want_orth=False)
    return out.mean.data, out.log_std.data


def _critic_values_nograd(critic, obs: Array) -> Array:
    return critic.forward(Tensor(obs)).data[:, 0].astype(np.float64)


def ppo_train(actor_kind: str, spec: EnvSpec, config: TrainConfig,
              out_dir: str | None = None) -> TrainResult:
    """Clipped-surrogate PPO with GAE and a shared MLP critic.

    The orthogonality penalty joins the objective only for the constrained
    tree actor; with lambda_orth = 0 the term never enters the graph.
    """
    rng = np.random.default_rng(config.seed)
    actor = make_actor(actor_kind, spec.tree, spec.obs_dim, config.d, seed=config.seed)
    critic = CriticMlp(spec.obs_dim, config.critic_hidden,
                       np.random.default_rng(config.seed + 1))
    adam_actor, adam_critic = AdamState(), AdamState()
    envs = VecEnvs(spec, config.n_envs, seed=config.seed)
    obs = envs.reset_all()
    N, A = config.n_envs, spec.action_dim

    ep_return = np.zeros(N)
    finished_returns: list[float] = []
    mean_return = 0.0
    metrics: list[dict] = []
    checkpoints: list[str] = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    steps_done, it = 0, 0
    stop = False
    while steps_done < config.total_steps and not stop:
        t_start = time.perf_counter()
        T = config.rollout_steps
        buf_obs = np.zeros((T, N, spec.obs_dim))
        buf_act = np.zeros((T, N, A))
        buf_logp = np.zeros((T, N))
        buf_val = np.zeros((T, N))
        buf_rew = np.zeros((T, N))
        buf_done = np.zeros((T, N), dtype=bool)
        buf_trunc = np.zeros((T, N), dtype=bool)
        buf_boot = np.zeros((T, N))
        iter_returns: list[float] = []

        for t in range(T):
            mean, log_std = _forward_mean_nograd(actor, obs)
            std = np.exp(log_std)
            acts = mean + std[None, :] * rng.standard_normal((N, A))
            buf_obs[t] = obs
            buf_act[t] = acts
            buf_logp[t] = gaussian_logp_np(acts, mean, log_std)
            buf_val[t] = _critic_values_nograd(critic, obs)
            trs = envs.step_all(acts)
            next_obs = np.zeros_like(obs)
            for k, tr in enumerate(trs):
                buf_rew[t, k] = tr.reward
                buf_done[t, k] = tr.done
                buf_trunc[t, k] = tr.truncated
                ep_return[k] += tr.reward
                if tr.truncated:
                    buf_boot[t, k] = _critic_values_nograd(
                        critic, tr.next_obs[None, :])[0]
                if tr.done or tr.truncated:
                    iter_returns.append(ep_return[k])
                    finished_returns.append(ep_return[k])
                    ep_return[k] = 0.0
                    next_obs[k] = envs.envs[k].reset()
                else:
                    next_obs[k] = tr.next_obs
            obs = next_obs
        steps_done += T * N

        last_values = _critic_values_nograd(critic, obs)
        adv, ret = gae_advantages(buf_rew, buf_val, buf_done, buf_trunc,
                                  buf_boot, last_values,
                                  config.gamma, config.gae_lambda)

        flat_obs = buf_obs.reshape(T * N, -1)
        flat_act = buf_act.reshape(T * N, -1)
        flat_logp = buf_logp.reshape(-1)
        flat_adv = adv.reshape(-1)
        flat_ret = ret.reshape(-1)
        flat_adv = (flat_adv - flat_adv.mean()) / (flat_adv.std() + 1e-8)

        parts_acc = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
                     "orth_loss": 0.0}
        n_updates = 0
        for _ in range(config.epochs):
            perm = rng.permutation(T * N)
            for start in range(0, T * N, config.minibatch):
                mb = perm[start:start + config.minibatch]
                with Tape() as tape:
                    actor_total, parts = ppo_actor_loss(
                        actor, flat_obs[mb], flat_act[mb], flat_adv[mb],
                        flat_logp[mb], config)
                    v_pred = critic.forward(Tensor(flat_obs[mb]))
                    v_err = ad.sub(ad.reshape(v_pred, (len(mb),)), Tensor(flat_ret[mb]))
                    value_loss = ad.mean(ad.square(v_err))
                    total = ad.add(actor_total,
                                   ad.scalar_mul(value_loss, config.value_coef))
                if not np.isfinite(total.item()):
                    raise NaNLossError(it, f"(actor={actor_kind})")
                grads = backward(tape, total)
                adam_step(actor.tensors,
                          {n: grads[t] for n, t in actor.tensors.items() if t in grads},
                          adam_actor, lr=config.lr)
                adam_step(critic.tensors,
                          {n: grads[t] for n, t in critic.tensors.items() if t in grads},
                          adam_critic, lr=config.lr)
                for key in parts:
                    parts_acc[key] += parts[key]
                parts_acc["value_loss"] += value_loss.item()
                n_updates += 1

        if iter_returns:
            mean_return = float(np.mean(iter_returns))
        wall_ms = 0 if config.deterministic else int(
            (time.perf_counter() - t_start) * 1000)
        row = {
            "iter": it,
            "env_steps": steps_done,
            "mean_return": mean_return,
            "policy_loss": parts_acc["policy_loss"] / n_updates,
            "value_loss": parts_acc["value_loss"] / n_updates,
            "entropy": parts_acc["entropy"] / n_updates,
            "orth_loss": parts_acc["orth_loss"] / n_updates,
            "wall_ms": wall_ms,
        }
        metrics.append(row)

        if out_dir and (it % config.eval_interval == 0):
            path = os.path.join(out_dir, f"ck_{it:06d}.npz")
            save_checkpoint(path, actor, spec.tree, extra={"env_steps": steps_done})
            checkpoints.append(path)
        if config.stop_return is not None and len(finished_returns) >= 10:
            if float(np.mean(finished_returns[-10:])) >= config.stop_return:
                stop = True
        it += 1

    if out_dir:
        path = os.path.join(out_dir, "ck_final.npz")
        save_checkpoint(path, actor, spec.tree, extra={"env_steps": steps_done})
        checkpoints.append(path)
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), metrics)
    return TrainResult(actor, critic, metrics, checkpoints, spec, config)


def write_metrics_csv(path: str, metrics: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRICS_COLUMNS)
        w.writeheader()
        for row in metrics:
            w.writerow({k: row[k] for k in METRICS_COLUMNS})


# ---------------------------------------------------------------------------
# Policy evaluation, random baseline, retention
# ---------------------------------------------------------------------------

def evaluate_policy(actor, spec: EnvSpec, n_episodes: int, seed: int = 0) -> Array:
    """Deterministic (mean-action) episode returns."""
    returns = np.zeros(n_episodes)
    env = Environment(spec, seed=seed)
    for ep in range(n_episodes):
        obs = env.reset(seed=seed + 7919 * ep)
        total = 0.0
        while True:
            mean, _ = _forward_mean_nograd(actor, obs[None, :])
            tr = env.step(mean[0])
            total += tr.reward
            obs = tr.next_obs
            if tr.done or tr.truncated:
                break
        returns[ep] = total
    return returns


def measure_random_baseline(spec: EnvSpec, n_episodes: int = 20, seed: int = 0) -> float:
    """Mean return of uniform-random torques inside the limit box."""
    rng = np.random.default_rng(seed)
    env = Environment(spec, seed=seed)
    totals = []
    for ep in range(n_episodes):
        obs = env.reset(seed=seed + 104729 * ep)
        total = 0.0
        while True:
            a = rng.uniform(-spec.torque_limit, spec.torque_limit)
            tr = env.step(a)
            total += tr.reward
            if tr.done or tr.truncated:
                break
        totals.append(total)
    return float(np.mean(totals))


def _bootstrap_ci(values: Array, seed: int, n_boot: int = 1000) -> tuple[float, float]:
    if len(values) == 1:
        return float(values[0]), float(values[0])
    rng = np.random.default_rng(seed)
    means = np.array([
        rng.choice(values, size=len(values), replace=True).mean()
        for _ in range(n_boot)
    ])
    return float(np.percentile(means, 2.5)), float(np.percentile(means, 97.5))


@dataclass
class RetentionReport:
    nominal_return: float
    nominal_ci: tuple[float, float]
    shifted_return: dict[float, float]
    shifted_ci: dict[float, tuple[float, float]]
    retention_pct: dict[float, float]
    n_episodes: int
    seed: int
    link_name: str
    random_baseline: float
    converged: bool  # nominal >= 2x random baseline, else reported as N/C


def heaviest_moving_link(spec: EnvSpec) -> str:
    links = spec.tree.links[1:]
    return max(links, key=lambda l: (l.inertia.mass, -l.index)).name


def eval_retention(checkpoint_path: str, spec: EnvSpec, factors, n_episodes: int,
                   seed: int = 0, link_name: str | None = None) -> RetentionReport:
    """Deterministic returns on the nominal tree and mass-scaled variants.

    Retention is the shifted mean return as a percentage of nominal; 95% CIs
    come from an episode-level bootstrap. Runs whose nominal return fails the
    2x-random-baseline bar are flagged as not converged (N/C).
    """
    actor = load_checkpoint(checkpoint_path, spec.tree)
    link = link_name or heaviest_moving_link(spec)
    nominal = evaluate_policy(actor, spec, n_episodes, seed=seed)
    nom_mean = float(nominal.mean())
    baseline = measure_random_baseline(spec, n_episodes=min(n_episodes, 20), seed=seed)

    shifted_return, shifted_ci, retention = {}, {}, {}
    for f in factors:
        tree_f = mass_scaled(spec.tree, link, float(f))
        spec_f = dc_replace(spec, tree=tree_f)
        rets = evaluate_policy(actor, spec_f, n_episodes, seed=seed)
        shifted_return[f] = float(rets.mean())
        shifted_ci[f] = _bootstrap_ci(rets, seed=seed + 1)
        # ratio first: identical dynamics (factor 1.0) must give exactly 100%
        retention[f] = 100.0 * (shifted_return[f] / nom_mean)
    return RetentionReport(
        nominal_return=nom_mean,
        nominal_ci=_bootstrap_ci(nominal, seed=seed),
        shifted_return=shifted_return,
        shifted_ci=shifted_ci,
        retention_pct=retention,
        n_episodes=n_episodes,
        seed=seed,
        link_name=link,
        random_baseline=baseline,
        converged=bool(nom_mean >= 2.0 * baseline),
    )


# ---------------------------------------------------------------------------
# Dynamics-model regression ((s, a) -> s')
# ---------------------------------------------------------------------------

def obs_owners(spec: EnvSpec) -> tuple[list[tuple[int, list[int]]], list[int]]:
    """Group observation positions by owning link.

    Returns ([(link_index, positions)...] for dof joints, plus root-owned
    positions for blocks that belong to no joint (e.g. previous action).
    History must be 1 for the regression track.
    """
    if spec.history != 1:
        raise ValueError("dynamics regression expects history length 1")
    owners: dict[int, list[int]] = {}
    root_positions: list[int] = []
    pos = 0
    dof_links = spec.tree.dof_joint_indices()
    for b in spec.obs_blocks:
        if b.kind in ("q", "qd"):
            for slot in spec._block_indices(b):
                owners.setdefault(dof_links[slot], []).append(pos)
                pos += 1
        else:
            for _ in range(spec.action_dim):
                root_positions.append(pos)
                pos += 1
    ordered = [(link, owners[link]) for link in sorted(owners)]
    return ordered, root_positions


class AbdDynamicsModel:
    """Tree-structured next-state predictor: the action is appended to the
    observation before encoding; per-joint heads predict that joint's state
    blocks and a root head covers any global blocks. Like the actor decoder,
    the head for joint j reads the PARENT link's representation, which
    aggregates the contributions of everything below it."""

    kind = "abdnet"

    def __init__(self, spec: EnvSpec, d: int, rng: np.random.Generator):
        self.spec = spec
        self.tree = spec.tree
        self.d = d
        self.in_dim = spec.obs_dim + spec.action_dim
        self.obs_dim = spec.obs_dim
        self.core = AbdParams(self.tree, self.in_dim, d, rng, constrained=True,
                              with_heads=False)
        self.owners, self.root_positions = obs_owners(spec)
        self.tensors = dict(self.core.tensors)
        for link, positions in self.owners:
            n_out = len(positions)
            self.tensors[f"out_W1_{link}"] = parameter(orthogonal(rng, d, d))
            self.tensors[f"out_b1_{link}"] = parameter(np.zeros(d))
            self.tensors[f"out_W2_{link}"] = parameter(orthogonal(rng, d, n_out, scale=0.1))
            self.tensors[f"out_b2_{link}"] = parameter(np.zeros(n_out))
        if self.root_positions:
            n_out = len(self.root_positions)
            self.tensors["out_W1_root"] = parameter(orthogonal(rng, d, d))
            self.tensors["out_b1_root"] = parameter(np.zeros(d))
            self.tensors["out_W2_root"] = parameter(orthogonal(rng, d, n_out, scale=0.1))
            self.tensors["out_b2_root"] = parameter(np.zeros(n_out))
        self.core.tensors = self.tensors

    def forward(self, obs_act: Tensor):
        feats = message_pass(self.core, self.tree, encode(self.core, obs_act))
        columns: list[tuple[int, object]] = []

        def head(tag, v, positions):
            h = ad.tanh(ad.add_rowvec(ad.matmul(v, self.tensors[f"out_W1_{tag}"]),
                                      self.tensors[f"out_b1_{tag}"]))
            out = ad.add_rowvec(ad.matmul(h, self.tensors[f"out_W2_{tag}"]),
                                self.tensors[f"out_b2_{tag}"])
            for k, p in enumerate(positions):
                columns.append((p, ad.narrow(out, 1, k, 1)))

        for link, positions in self.owners:
            head(link, feats.v[self.tree.parent(link)], positions)
        if self.root_positions:
            head("root", feats.v[0], self.root_positions)
        columns.sort(key=lambda c: c[0])
        return ad.concat([c[1] for c in columns], axis=1), feats

    def orth_penalty(self, feats):
        return orth_loss(self.core, feats)

    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


class MlpDynamicsModel:
    kind = "mlp"

    def __init__(self, spec: EnvSpec, hidden: int, rng: np.random.Generator):
        self.spec = spec
        self.in_dim = spec.obs_dim + spec.action_dim
        self.obs_dim = spec.obs_dim
        self.d = hidden
        self.tensors = {
            "W1": parameter(orthogonal(rng, self.in_dim, hidden)),
            "b1": parameter(np.zeros(hidden)),
            "W2": parameter(orthogonal(rng, hidden, hidden)),
            "b2": parameter(np.zeros(hidden)),
            "W3": parameter(orthogonal(rng, hidden, spec.obs_dim, scale=0.1)),
            "b3": parameter(np.zeros(spec.obs_dim)),
        }

    def forward(self, obs_act: Tensor):
        h1 = ad.tanh(ad.add_rowvec(ad.matmul(obs_act, self.tensors["W1"]), self.tensors["b1"]))
        h2 = ad.tanh(ad.add_rowvec(ad.matmul(h1, self.tensors["W2"]), self.tensors["b2"]))
        return ad.add_rowvec(ad.matmul(h2, self.tensors["W3"]), self.tensors["b3"]), None

    def orth_penalty(self, feats):
        return None

    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def mlp_dynamics_width_for_budget(spec: EnvSpec, target: int, max_width: int = 1024) -> int:
    in_dim, out = spec.obs_dim + spec.action_dim, spec.obs_dim
    best, gap = 1, float("inf")
    for h in range(1, max_width + 1):
        n = in_dim * h + h + h * h + h + h * out + out
        g = abs(n - target)
        if g < gap:
            best, gap = h, g
    return best


@dataclass
class RegressionResult:
    model: object
    train_losses: list[float]
    val_mse: float
    rollout_mse: dict[int, float]
    n_params: int


def make_dynamics_model(kind: str, spec: EnvSpec, d: int, seed: int):
    rng = np.random.default_rng(seed)
    if kind == "abdnet":
        return AbdDynamicsModel(spec, d, rng)
    if kind == "mlp":
        probe = AbdDynamicsModel(spec, d, np.random.default_rng(seed))
        hidden = mlp_dynamics_width_for_budget(spec, probe.n_params())
        return MlpDynamicsModel(spec, hidden, rng)
    raise ValueError(f"unknown dynamics model kind '{kind}'")


def split_by_episode(dataset: TrajectoryBatch, val_fraction: float = 0.1):
    """Deterministic 90/10 split on whole episodes."""
    episodes = np.unique(dataset.episode_ids)
    if len(episodes) < 2:
        raise EmptyDatasetError("need at least 2 episodes to split train/val")
    stride = max(2, int(round(1.0 / val_fraction)))
    val_eps = set(episodes[::stride].tolist())
    val_mask = np.isin(dataset.episode_ids, list(val_eps))
    return ~val_mask, val_mask


def obs_scale_vector(spec: EnvSpec, qd_scale: float) -> Array:
    """Fixed per-block observation scaling (velocity blocks compressed)."""
    scales = []
    for b in spec.obs_blocks:
        if b.kind == "qd":
            scales.extend([qd_scale] * len(spec._block_indices(b)))
        elif b.kind == "q":
            scales.extend([1.0] * len(spec._block_indices(b)))
        else:
            scales.extend([1.0] * spec.action_dim)
    return np.asarray(scales * spec.history)


def regress_dynamics(model_kind: str, spec: EnvSpec, dataset: TrajectoryBatch,
                     config: TrainConfig) -> RegressionResult:
    """Mean-squared-error training of a next-observation model on (s, a) pairs.

    Observations and targets get the same fixed per-block scaling (velocities
    compressed, actions normalized by torque limits) for every model kind, so
    losses are comparable across models and the error is not dominated by the
    fastest coordinates.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("empty dataset")
    train_mask, val_mask = split_by_episode(dataset)
    s_obs = obs_scale_vector(spec, config.qd_scale)
    s_act = 1.0 / spec.torque_limit
    x = np.concatenate([dataset.obs * s_obs, dataset.actions * s_act], axis=1)
    y = dataset.next_obs * s_obs
    x_tr, y_tr = x[train_mask], y[train_mask]
    x_val, y_val = x[val_mask], y[val_mask]

    model = make_dynamics_model(model_kind, spec, config.d, config.seed)
    adam = AdamState()
    rng = np.random.default_rng(config.seed)
    n = len(x_tr)
    losses = []
    for epoch in range(config.regress_epochs):
        perm = rng.permutation(n)
        epoch_loss, n_mb = 0.0, 0
        for start in range(0, n, config.minibatch):
            mb = perm[start:start + config.minibatch]
            with Tape() as tape:
                pred, feats = model.forward(Tensor(x_tr[mb]))
                loss = ad.mean(ad.square(ad.sub(pred, Tensor(y_tr[mb]))))
                orth = model.orth_penalty(feats) if config.lambda_orth > 0 else None
                total = loss if orth is None else ad.add(
                    loss, ad.scalar_mul(orth, config.lambda_orth))
            if not np.isfinite(total.item()):
                raise NaNLossError(epoch, f"(model={model_kind})")
            grads = backward(tape, total)
            adam_step(model.tensors,
                      {nm: grads[t] for nm, t in model.tensors.items() if t in grads},
                      adam, lr=config.regress_lr)
            epoch_loss += loss.item()
            n_mb += 1
        losses.append(epoch_loss / n_mb)

    pred_val, _ = model.forward(Tensor(x_val))
    val_mse = float(np.mean((pred_val.data - y_val) ** 2))
    rollout = rollout_error(model, dataset, val_mask, ks=(1, 3, 5),
                            s_obs=s_obs, s_act=s_act)
    return RegressionResult(model, losses, val_mse, rollout, model.n_params())


def rollout_error(model, dataset: TrajectoryBatch, val_mask: Array,
                  ks=(1, 3, 5), s_obs=None, s_act=None) -> dict[int, float]:
    """k-step open-loop prediction MSE on validation episodes (scaled space).

    Starting states with k in-episode successors feed the model its own
    predictions, replaying the logged actions.
    """
    kmax = max(ks)
    idx = np.flatnonzero(val_mask)
    starts = []
    for i in idx:
        ep = dataset.episode_ids[i]
        ok = True
        for step in range(kmax):
            j = i + step
            if j >= len(dataset) or dataset.episode_ids[j] != ep:
                ok = False
                break
        if ok:
            starts.append(i)
    if not starts:
        raise EmptyDatasetError(f"no validation windows of length {kmax}")
    starts = np.asarray(starts)
    if s_obs is None:
        s_obs = np.ones(dataset.obs.shape[1])
    if s_act is None:
        s_act = np.ones(dataset.actions.shape[1])

    state = dataset.obs[starts] * s_obs
    out: dict[int, float] = {}
    for step in range(1, kmax + 1):
        actions = dataset.actions[starts + step - 1] * s_act
        pred, _ = model.forward(Tensor(np.concatenate([state, actions], axis=1)))
        state = pred.data.astype(np.float64)
        if step in ks:
            truth = dataset.next_obs[starts + step - 1] * s_obs
            out[step] = float(np.mean((state - truth) ** 2))
    return out


# ---------------------------------------------------------------------------
# Ablation suite
# ---------------------------------------------------------------------------

DEFAULT_VARIANTS = ("abdnet", "abdnet-noorth", "gnn", "mlp")


def ablation_suite(spec: EnvSpec, config: TrainConfig,
                   variants=DEFAULT_VARIANTS, seeds=(0, 1, 2, 3, 4),
                   factors=(), n_eval_episodes: int = 10,
                   out_dir: str | None = None) -> list[dict]:
    """Train every variant with matched parameter budgets and identical
    seeds/env-steps; emit one long-format row per (variant, seed, metric)."""
    target = param_count("abdnet", spec.tree, config.d, spec.obs_dim)
    rows: list[dict] = []
    for variant in variants:
        d = config.d if variant == "abdnet" else match_width(
            variant, spec.tree, spec.obs_dim, target)
        for seed in seeds:
            cfg = dc_replace(config, seed=seed, d=d)
            run_dir = os.path.join(out_dir, f"{variant}_s{seed}") if out_dir else None
            result = ppo_train(variant, spec, cfg, out_dir=run_dir)
            final_eval = evaluate_policy(result.actor, spec, n_eval_episodes, seed=seed)
            rows.append({"variant": variant, "seed": seed,
                         "metric": "final_return", "value": float(final_eval.mean())})
            rows.append({"variant": variant, "seed": seed,
                         "metric": "orth_loss_final",
                         "value": result.metrics[-1]["orth_loss"]})
            if factors and run_dir:
                report = eval_retention(result.checkpoints[-1], spec, factors,
                                        n_episodes=n_eval_episodes, seed=seed)
                for f in factors:
                    rows.append({"variant": variant, "seed": seed,
                                 "metric": f"retention_{f}",
                                 "value": report.retention_pct[f]})
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["variant", "seed", "metric", "value"])
            w.writeheader()
            w.writerows(rows)
    return rows
