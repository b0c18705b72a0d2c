"""Torque-controlled environments defined directly on the exact dynamics.

Presets: double-pendulum balance (inverted, stay up), double-pendulum
swing-up, a 4-link chain used only for dynamics-regression datasets, and a
planar hopper whose base moves through passive prismatic/revolute joints.
Ground contact for the hopper is a one-sided spring-damper on the foot
points, fed back as joint torques through the point Jacobian transpose.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .dynamics import (
    JointState,
    points_pos_jac,
    step_semi_implicit,
    total_com_height,
)
from .morphology import KinematicTree, load_tree, parse_native

Array = np.ndarray

REWARD_KINDS = ("balance", "swingup", "hop_forward", "regress_only")


class DimensionError(Exception):
    pass


@dataclass(frozen=True)
class ObsBlock:
    kind: str  # "q" | "qd" | "prev_action"
    exclude: tuple[str, ...] = ()


@dataclass
class ContactPoint:
    link: str
    offset: Array


@dataclass
class ContactModel:
    points: list[ContactPoint]
    stiffness: float
    damping: float
    tangential: float
    mu: float


@dataclass
class EnvSpec:
    name: str
    tree: KinematicTree
    dt: float
    decimation: int
    horizon: int
    obs_blocks: tuple[ObsBlock, ...]
    history: int
    reward_kind: str
    torque_limit: Array
    gravity: Array
    q_center: Array
    q_range: Array
    qd_noise: float
    weights: dict[str, float] = field(default_factory=dict)
    fall: dict[str, float] = field(default_factory=dict)
    contact: ContactModel | None = None

    def __post_init__(self):
        if not (self.dt > 0 and self.decimation >= 1 and self.horizon >= 1):
            raise ValueError("dt > 0, decimation >= 1, horizon >= 1 required")
        if self.reward_kind not in REWARD_KINDS:
            raise ValueError(f"unknown reward kind '{self.reward_kind}'")
        if len(self.torque_limit) != self.tree.n_actuated:
            raise DimensionError(
                f"torque_limit has {len(self.torque_limit)} entries for "
                f"{self.tree.n_actuated} actuated joints"
            )

    @property
    def action_dim(self) -> int:
        return self.tree.n_actuated

    def _block_indices(self, block: ObsBlock) -> list[int]:
        tree = self.tree
        out = []
        for slot, link_i in enumerate(tree.dof_joint_indices()):
            if tree.joints[link_i].name not in block.exclude:
                out.append(slot)
        return out

    def base_obs_layout(self) -> list[tuple[str, int]]:
        """(kind, width) per block of one unstacked observation."""
        layout = []
        for b in self.obs_blocks:
            if b.kind in ("q", "qd"):
                layout.append((b.kind, len(self._block_indices(b))))
            elif b.kind == "prev_action":
                layout.append((b.kind, self.action_dim))
            else:
                raise ValueError(f"unknown obs block '{b.kind}'")
        return layout

    @property
    def base_obs_dim(self) -> int:
        return sum(w for _, w in self.base_obs_layout())

    @property
    def obs_dim(self) -> int:
        return self.base_obs_dim * self.history

    def reward_bound(self) -> float:
        """Per-step reward magnitude bound implied by the configuration."""
        w = self.weights
        if self.reward_kind == "balance":
            return w.get("w_upright", 1.0)
        if self.reward_kind == "swingup":
            return w.get("w_height", 1.0)
        if self.reward_kind == "hop_forward":
            return w.get("w_forward", 1.0) * w.get("v_max", 4.0) + w.get("alive", 1.0)
        return 0.0


@dataclass
class Transition:
    obs: Array
    action: Array
    reward: float
    next_obs: Array
    done: bool
    truncated: bool


def _resolve_tree(ref: str, base_dir=None) -> KinematicTree:
    if ref.endswith((".json", ".urdf", ".xml")):
        import os

        path = ref if base_dir is None else os.path.join(base_dir, ref)
        return load_tree(path)
    text = resources.files("abdnet.presets").joinpath(f"trees/{ref}.json").read_text()
    return parse_native(json.loads(text))


def load_env_spec(name_or_path: str) -> EnvSpec:
    """Load a preset by name (e.g. 'double_pendulum_balance') or a config path."""
    import os

    if os.path.exists(name_or_path):
        raw = json.loads(open(name_or_path).read())
        base_dir = os.path.dirname(os.path.abspath(name_or_path))
    else:
        try:
            text = resources.files("abdnet.presets").joinpath(
                f"envs/{name_or_path}.json").read_text()
        except FileNotFoundError:
            raise FileNotFoundError(f"no env preset or file named '{name_or_path}'")
        raw = json.loads(text)
        base_dir = None
    return spec_from_dict(raw, base_dir)


def spec_from_dict(raw: dict, base_dir=None) -> EnvSpec:
    tree = _resolve_tree(raw["tree"], base_dir)
    obs = raw.get("obs", {"blocks": [{"kind": "q"}, {"kind": "qd"}], "history": 1})
    blocks = tuple(ObsBlock(b["kind"], tuple(b.get("exclude", ()))) for b in obs["blocks"])
    contact = None
    if raw.get("contact"):
        c = raw["contact"]
        contact = ContactModel(
            points=[ContactPoint(p["link"], np.asarray(p["offset"], dtype=np.float64))
                    for p in c["points"]],
            stiffness=float(c["stiffness"]),
            damping=float(c["damping"]),
            tangential=float(c["tangential"]),
            mu=float(c.get("mu", 1.0)),
        )
    reward = dict(raw["reward"])
    kind = reward.pop("kind")
    return EnvSpec(
        name=raw["name"],
        tree=tree,
        dt=float(raw["dt"]),
        decimation=int(raw["decimation"]),
        horizon=int(raw["horizon"]),
        obs_blocks=blocks,
        history=int(obs.get("history", 1)),
        reward_kind=kind,
        torque_limit=np.asarray(raw["torque_limit"], dtype=np.float64),
        gravity=np.asarray(raw.get("gravity", [0.0, 0.0, -9.81]), dtype=np.float64),
        q_center=np.asarray(raw["reset"]["q_center"], dtype=np.float64),
        q_range=np.asarray(raw["reset"]["q_range"], dtype=np.float64),
        qd_noise=float(raw["reset"].get("qd_noise", 0.0)),
        weights=reward,
        fall=raw.get("fall", {}),
        contact=contact,
    )


def contact_torques(spec: EnvSpec, state: JointState) -> Array:
    """One-sided spring-damper ground forces mapped through J^T.

    The normal force is a clamped spring-damper on penetration depth; a
    viscous tangential force, Coulomb-capped by mu times the normal force,
    lets stance legs push the body around (a normal-only model would conserve
    horizontal momentum and make forward locomotion impossible).
    """
    tau = np.zeros(spec.tree.n_dof)
    c = spec.contact
    if c is None:
        return tau
    pts = [(spec.tree.link_by_name(pt.link).index, pt.offset) for pt in c.points]
    for p, J in points_pos_jac(spec.tree, state.q, pts):
        if p[2] >= 0.0:
            continue
        v = J @ state.qd
        fz = max(0.0, -c.stiffness * p[2] - c.damping * v[2])
        cap = c.mu * fz
        fx = float(np.clip(-c.tangential * v[0], -cap, cap))
        fy = float(np.clip(-c.tangential * v[1], -cap, cap))
        tau += J.T @ np.array([fx, fy, fz])
    return tau


class Environment:
    """Owns one episode's state; step applies clamped torques with substeps."""

    def __init__(self, spec: EnvSpec, seed: int = 0):
        self.spec = spec
        self._rng = np.random.default_rng(seed)
        self._act_slots = [spec.tree.dof_index(i) for i in spec.tree.actuated_joint_indices()]
        self.state: JointState | None = None
        self.prev_action = np.zeros(spec.action_dim)
        self.t = 0
        self._history: list[Array] = []

    def reset(self, seed: int | None = None) -> Array:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        spec = self.spec
        q = spec.q_center + self._rng.uniform(-spec.q_range, spec.q_range)
        qd = self._rng.normal(size=spec.tree.n_dof) * spec.qd_noise
        self.state = JointState(q, qd)
        self.prev_action = np.zeros(spec.action_dim)
        self.t = 0
        self._history = []
        return self._observe()

    def _base_obs(self) -> Array:
        spec = self.spec
        parts = []
        for b in spec.obs_blocks:
            if b.kind == "q":
                parts.append(self.state.q[spec._block_indices(b)])
            elif b.kind == "qd":
                parts.append(self.state.qd[spec._block_indices(b)])
            else:
                parts.append(self.prev_action)
        return np.concatenate(parts) if parts else np.zeros(0)

    def _observe(self) -> Array:
        base = self._base_obs()
        if self.spec.history <= 1:
            return base
        self._history.append(base)
        hist = self._history[-self.spec.history:]
        pad = [np.zeros_like(base)] * (self.spec.history - len(hist))
        return np.concatenate(pad + hist)

    def step(self, action) -> Transition:
        spec = self.spec
        if self.state is None:
            raise RuntimeError("step before reset")
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape[0] != spec.action_dim:
            raise DimensionError(
                f"action has {action.shape[0]} entries, expected {spec.action_dim}"
            )
        obs_before = self._peek_obs()
        applied = np.clip(action, -spec.torque_limit, spec.torque_limit)

        state = self.state
        for _ in range(spec.decimation):
            tau = np.zeros(spec.tree.n_dof)
            tau[self._act_slots] = applied
            if spec.contact is not None:
                tau += contact_torques(spec, state)
            state = step_semi_implicit(spec.tree, state, tau, spec.gravity, spec.dt)
        self.state = state
        self.prev_action = applied
        self.t += 1

        reward = self._reward(applied)
        done = self._fallen()
        truncated = (not done) and self.t >= spec.horizon
        next_obs = self._observe()
        return Transition(obs_before, applied, reward, next_obs, done, truncated)

    def _peek_obs(self) -> Array:
        """Observation for the current state without advancing history."""
        base = self._base_obs()
        if self.spec.history <= 1:
            return base
        hist = (self._history + [base])[-self.spec.history:]
        pad = [np.zeros_like(base)] * (self.spec.history - len(hist))
        return np.concatenate(pad + hist)

    def _act_q(self) -> Array:
        return self.state.q[self._act_slots]

    def _reward(self, action: Array) -> float:
        spec = self.spec
        w = spec.weights
        ctrl = float(action @ action)
        if spec.reward_kind == "balance":
            fall_angle = spec.fall.get("max_joint_angle", 1.0)
            q = self._act_q()
            upright = float(np.mean(1.0 - np.square(q / fall_angle)))
            return w.get("w_upright", 1.0) * upright - w.get("w_ctrl", 0.0) * ctrl
        if spec.reward_kind == "swingup":
            h = total_com_height(spec.tree, self.state.q)
            h_max = abs(total_com_height(spec.tree, np.zeros(spec.tree.n_dof)))
            return w.get("w_height", 1.0) * (h / h_max) - w.get("w_ctrl", 0.0) * ctrl
        if spec.reward_kind == "hop_forward":
            vx = self.state.qd[self._forward_slot()]
            vx = float(np.clip(vx, -w.get("v_max", 4.0), w.get("v_max", 4.0)))
            return (w.get("w_forward", 1.0) * vx + w.get("alive", 1.0)
                    - w.get("w_ctrl", 0.0) * ctrl)
        return 0.0

    def _forward_slot(self) -> int:
        """q/qd slot of the passive joint carrying base forward motion."""
        name = self.spec.weights.get("forward_joint", "base_x")
        for i in self.spec.tree.dof_joint_indices():
            if self.spec.tree.joints[i].name == name:
                return self.spec.tree.dof_index(i)
        raise DimensionError(f"no dof joint named '{name}' for forward velocity")

    def _fallen(self) -> bool:
        spec = self.spec
        if spec.reward_kind == "balance":
            fall_angle = spec.fall.get("max_joint_angle", 1.0)
            return bool(np.any(np.abs(self._act_q()) >= fall_angle))
        if spec.reward_kind == "hop_forward":
            min_h = spec.fall.get("min_height", 0.6)
            max_pitch = spec.fall.get("max_pitch", 1.0)
            qz = self.state.q[self._named_slot(spec.fall.get("height_joint", "base_z"))]
            pitch = self.state.q[self._named_slot(spec.fall.get("pitch_joint", "base_pitch"))]
            return bool(qz < min_h or abs(pitch) > max_pitch)
        return False

    def _named_slot(self, name: str) -> int:
        for i in self.spec.tree.dof_joint_indices():
            if self.spec.tree.joints[i].name == name:
                return self.spec.tree.dof_index(i)
        raise DimensionError(f"no dof joint named '{name}'")


@dataclass
class TrajectoryBatch:
    """Flat per-step rollout storage with episode boundaries marked."""

    obs: Array
    actions: Array
    rewards: Array
    next_obs: Array
    dones: Array
    truncations: Array
    episode_ids: Array
    log_probs: Array | None = None
    values: Array | None = None
    advantages: Array | None = None
    returns: Array | None = None

    def __len__(self):
        return len(self.obs)


def rollout_dataset(spec: EnvSpec, policy, n_steps: int, seed: int = 0) -> TrajectoryBatch:
    """Collect transitions with auto-reset; `policy` maps obs -> action."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    env = Environment(spec, seed=seed)
    obs = env.reset(seed=seed)
    rows = {k: [] for k in ("obs", "actions", "rewards", "next_obs", "dones",
                            "truncations", "episode_ids")}
    episode = 0
    for _ in range(n_steps):
        tr = env.step(policy(obs))
        rows["obs"].append(tr.obs)
        rows["actions"].append(tr.action)
        rows["rewards"].append(tr.reward)
        rows["next_obs"].append(tr.next_obs)
        rows["dones"].append(tr.done)
        rows["truncations"].append(tr.truncated)
        rows["episode_ids"].append(episode)
        if tr.done or tr.truncated:
            episode += 1
            obs = env.reset()
        else:
            obs = tr.next_obs
    return TrajectoryBatch(
        obs=np.asarray(rows["obs"]),
        actions=np.asarray(rows["actions"]),
        rewards=np.asarray(rows["rewards"]),
        next_obs=np.asarray(rows["next_obs"]),
        dones=np.asarray(rows["dones"], dtype=bool),
        truncations=np.asarray(rows["truncations"], dtype=bool),
        episode_ids=np.asarray(rows["episode_ids"], dtype=np.int64),
    )


class VecEnvs:
    """Fixed-order batch of environment instances (deterministic gathering)."""

    def __init__(self, spec: EnvSpec, n: int, seed: int = 0):
        self.envs = [Environment(spec, seed=seed + 1000 * k) for k in range(n)]
        self.spec = spec

    def reset_all(self) -> Array:
        return np.stack([e.reset() for e in self.envs])

    def step_all(self, actions: Array) -> list[Transition]:
        return [e.step(actions[k]) for k, e in enumerate(self.envs)]
