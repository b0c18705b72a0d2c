"""Policy actors over kinematic trees.

The main actor mirrors the articulated-body recursion: per-link embeddings
are combined leaf-to-root, each child passing its parent a contribution with
learned feature directions projected out, the same way the exact algorithm
removes inertia along joint-permitted directions before propagating. Baseline
actors (bidirectional GNN, plain MLP) share the action-space contract so the
training harness can swap them freely.

Four actor kinds: "abdnet", "abdnet-noorth" (unconstrained projection slot,
no orthogonality loss), "gnn", "mlp".
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, parameter, stage
from .morphology import KinematicTree, leaf_to_root, tree_hash

Array = np.ndarray

ACTOR_KINDS = ("abdnet", "abdnet-noorth", "gnn", "mlp")

GNN_ROUNDS = 2
LOG_STD_INIT = float(np.log(0.5))


class CheckpointError(Exception):
    pass


class TreeMismatchError(CheckpointError):
    """Checkpoint was trained on a different morphology than requested."""


def orthogonal(rng: np.random.Generator, rows: int, cols: int, scale: float = 1.0) -> Array:
    """Orthogonal(-column) init: QR of a Gaussian, sliced to shape."""
    n = max(rows, cols)
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    q = q * np.sign(np.diag(r))
    return (scale * q[:rows, :cols]).astype(np.float64)


@dataclass
class LinkFeatures:
    """Per-link tensors from one forward pass (batch-first shapes B x d)."""

    z: list[Tensor]
    v: list[Tensor]
    v_a: dict[int, Tensor]
    m: list[Tensor]


@dataclass
class ActorOutput:
    mean: Tensor
    log_std: Tensor
    orth_loss: Tensor | None
    features: LinkFeatures | None


class AbdParams:
    """Learnable tensors for the tree-structured actor.

    Per link i: encoder (phi_W_i, phi_b_i) over the full observation, base
    feature base_i; per non-root link a motion basis basis_i (d x d); per
    actuated joint a two-layer action head; one state-independent log_std.
    """

    def __init__(self, tree: KinematicTree, obs_dim: int, d: int,
                 rng: np.random.Generator, constrained: bool = True,
                 with_heads: bool = True):
        self.tree = tree
        self.obs_dim = obs_dim
        self.d = d
        self.constrained = constrained
        self.tensors: dict[str, Tensor] = {}
        K = tree.K
        for i in range(K):
            self.tensors[f"phi_W_{i}"] = parameter(orthogonal(rng, obs_dim, d))
            self.tensors[f"phi_b_{i}"] = parameter(np.zeros(d))
            self.tensors[f"base_{i}"] = parameter(np.zeros(d))
        for i in range(1, K):
            self.tensors[f"basis_{i}"] = parameter(orthogonal(rng, d, d))
        action_dim = 0
        if with_heads:
            for j in tree.actuated_joint_indices():
                nj = tree.joints[j].dof
                self.tensors[f"head_W1_{j}"] = parameter(orthogonal(rng, d, d))
                self.tensors[f"head_b1_{j}"] = parameter(np.zeros(d))
                self.tensors[f"head_W2_{j}"] = parameter(orthogonal(rng, d, nj, scale=0.1))
                self.tensors[f"head_b2_{j}"] = parameter(np.zeros(nj))
                action_dim += nj
            self.tensors["log_std"] = parameter(np.full(action_dim, LOG_STD_INIT))
        self.action_dim = action_dim

    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def encode(params: AbdParams, obs: Tensor) -> list[Tensor]:
    """Per-link embeddings: every link projects the FULL observation vector."""
    if obs.data.ndim != 2 or obs.data.shape[1] != params.obs_dim:
        raise ad.ShapeError(
            f"encode: obs shape {obs.data.shape} does not match ({'B'}, {params.obs_dim})"
        )
    z = []
    with stage("encode"):
        for i in range(params.tree.K):
            zi = ad.add_rowvec(ad.matmul(obs, params.tensors[f"phi_W_{i}"]),
                               params.tensors[f"phi_b_{i}"])
            z.append(zi)
    return z


def message_pass(params: AbdParams, tree: KinematicTree, z: list[Tensor]) -> LinkFeatures:
    """Leaf-to-root aggregation of link representations.

    v_i = softplus(z_i + base_i) + m_i, with each non-root link handing its
    parent v_i minus the component selected by its learned projection
    basis_i @ basis_i^T (or an unconstrained matrix in the ablation variant).
    """
    B = z[0].data.shape[0]
    d = params.d
    zeros = lambda: Tensor(np.zeros((B, d)))
    m: list[Tensor] = [zeros() for _ in range(tree.K)]
    v: list[Tensor | None] = [None] * tree.K
    v_a: dict[int, Tensor] = {}

    embedded = []
    with stage("embed"):
        for i in range(tree.K):
            embedded.append(ad.add_rowvec(z[i], params.tensors[f"base_{i}"]))

    for i in leaf_to_root(tree):
        with stage("activation"):
            act = ad.softplus(embedded[i])
        if i != 0:
            with stage("message_pass"):
                vi = ad.add(act, m[i])
                W = params.tensors[f"basis_{i}"]
                if params.constrained:
                    t = ad.matmul_bt(ad.matmul(vi, W), W)
                else:
                    t = ad.matmul_bt(vi, W)
                vai = ad.sub(vi, ad.elementwise_mul(vi, t))
                p = tree.parent(i)
                m[p] = ad.add(m[p], vai)
            v[i] = vi
            v_a[i] = vai
        else:
            with stage("root_update"):
                v[0] = ad.add(act, m[0])
    return LinkFeatures(z=z, v=list(v), v_a=v_a, m=m)


def decode(params: AbdParams, tree: KinematicTree, features: LinkFeatures) -> Tensor:
    """Mean action per actuated joint, read from the PARENT's representation."""
    outs = []
    with stage("decode"):
        for j in tree.actuated_joint_indices():
            vp = features.v[tree.parent(j)]
            h = ad.tanh(ad.add_rowvec(ad.matmul(vp, params.tensors[f"head_W1_{j}"]),
                                      params.tensors[f"head_b1_{j}"]))
            outs.append(ad.add_rowvec(ad.matmul(h, params.tensors[f"head_W2_{j}"]),
                                      params.tensors[f"head_b2_{j}"]))
        if not outs:
            return Tensor(np.zeros((features.v[0].data.shape[0], 0)))
        return outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)


def orth_loss(params: AbdParams, features: LinkFeatures,
              per_sample: bool = False) -> Tensor:
    """(1/K) sum over non-root links of ||W^T diag(v) W - I||_F^2.

    v is batch-averaged by default; `per_sample` evaluates the penalty per
    sample and averages (exposed for the ablation study).
    """
    tree = params.tree
    d = params.d
    if tree.K == 1:
        return Tensor(0.0)
    eye = Tensor(np.eye(d))
    terms = []
    with stage("orth"):
        for i in range(1, tree.K):
            W = params.tensors[f"basis_{i}"]
            if per_sample:
                B = features.v[i].data.shape[0]
                per = []
                for b in range(B):
                    vb = ad.reshape(ad.narrow(features.v[i], 0, b, 1), (d,))
                    G = ad.matmul_at(W, ad.mul_colvec(W, vb))
                    per.append(ad.frobenius_norm_sq(ad.sub(G, eye)))
                acc = per[0]
                for t in per[1:]:
                    acc = ad.add(acc, t)
                terms.append(ad.scalar_mul(acc, 1.0 / B))
            else:
                v_bar = ad.mean_axis(features.v[i], 0)
                G = ad.matmul_at(W, ad.mul_colvec(W, v_bar))
                terms.append(ad.frobenius_norm_sq(ad.sub(G, eye)))
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return ad.scalar_mul(total, 1.0 / tree.K)


class AbdNetActor:
    """Tree-structured actor with the constrained projection and Eq-style
    orthogonality penalty (kind "abdnet"), or the unconstrained ablation
    (kind "abdnet-noorth")."""

    def __init__(self, tree: KinematicTree, obs_dim: int, d: int,
                 rng: np.random.Generator, constrained: bool = True):
        self.kind = "abdnet" if constrained else "abdnet-noorth"
        self.tree = tree
        self.obs_dim = obs_dim
        self.d = d
        self.params = AbdParams(tree, obs_dim, d, rng, constrained=constrained)

    @property
    def tensors(self) -> dict[str, Tensor]:
        return self.params.tensors

    @property
    def action_dim(self) -> int:
        return self.params.action_dim

    def forward(self, obs: Tensor, want_orth: bool = True) -> ActorOutput:
        z = encode(self.params, obs)
        feats = message_pass(self.params, self.tree, z)
        mean = decode(self.params, self.tree, feats)
        orth = None
        if want_orth and self.params.constrained:
            orth = orth_loss(self.params, feats)
        return ActorOutput(mean, self.tensors["log_std"], orth, feats)

    def n_params(self) -> int:
        return self.params.n_params()


class GnnActor:
    """Bidirectional message passing over parent+children neighborhoods,
    two rounds with a shared learned update."""

    def __init__(self, tree: KinematicTree, obs_dim: int, d: int, rng: np.random.Generator):
        self.kind = "gnn"
        self.tree = tree
        self.obs_dim = obs_dim
        self.d = d
        self.tensors: dict[str, Tensor] = {}
        for i in range(tree.K):
            self.tensors[f"phi_W_{i}"] = parameter(orthogonal(rng, obs_dim, d))
            self.tensors[f"phi_b_{i}"] = parameter(np.zeros(d))
        for r in range(GNN_ROUNDS):
            self.tensors[f"upd_W_{r}"] = parameter(orthogonal(rng, 2 * d, d))
            self.tensors[f"upd_b_{r}"] = parameter(np.zeros(d))
        action_dim = 0
        for j in tree.actuated_joint_indices():
            nj = tree.joints[j].dof
            self.tensors[f"head_W1_{j}"] = parameter(orthogonal(rng, d, d))
            self.tensors[f"head_b1_{j}"] = parameter(np.zeros(d))
            self.tensors[f"head_W2_{j}"] = parameter(orthogonal(rng, d, nj, scale=0.1))
            self.tensors[f"head_b2_{j}"] = parameter(np.zeros(nj))
            action_dim += nj
        self.action_dim = action_dim
        self.tensors["log_std"] = parameter(np.full(action_dim, LOG_STD_INIT))

    def _neighbors(self, i: int) -> list[int]:
        nb = list(self.tree.children(i))
        if self.tree.parent(i) is not None:
            nb.append(self.tree.parent(i))
        return sorted(nb)

    def forward(self, obs: Tensor, want_orth: bool = True) -> ActorOutput:
        tree = self.tree
        B = obs.data.shape[0]
        with stage("encode"):
            v = [ad.add_rowvec(ad.matmul(obs, self.tensors[f"phi_W_{i}"]),
                               self.tensors[f"phi_b_{i}"]) for i in range(tree.K)]
        with stage("message_pass"):
            for r in range(GNN_ROUNDS):
                new_v = []
                for i in range(tree.K):
                    nb = self._neighbors(i)
                    if nb:
                        agg = v[nb[0]]
                        for k in nb[1:]:
                            agg = ad.add(agg, v[k])
                        agg = ad.scalar_mul(agg, 1.0 / len(nb))
                    else:
                        agg = Tensor(np.zeros((B, self.d)))
                    cat = ad.concat([v[i], agg], axis=1)
                    new_v.append(ad.tanh(ad.add_rowvec(
                        ad.matmul(cat, self.tensors[f"upd_W_{r}"]),
                        self.tensors[f"upd_b_{r}"])))
                v = new_v
        outs = []
        with stage("decode"):
            for j in tree.actuated_joint_indices():
                vp = v[tree.parent(j)]
                h = ad.tanh(ad.add_rowvec(ad.matmul(vp, self.tensors[f"head_W1_{j}"]),
                                          self.tensors[f"head_b1_{j}"]))
                outs.append(ad.add_rowvec(ad.matmul(h, self.tensors[f"head_W2_{j}"]),
                                          self.tensors[f"head_b2_{j}"]))
            if not outs:
                mean = Tensor(np.zeros((B, 0)))
            else:
                mean = outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)
        return ActorOutput(mean, self.tensors["log_std"], None, None)

    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


class MlpActor:
    """Two hidden tanh layers over the raw observation."""

    def __init__(self, tree: KinematicTree, obs_dim: int, d: int, rng: np.random.Generator):
        self.kind = "mlp"
        self.tree = tree
        self.obs_dim = obs_dim
        self.d = d
        self.action_dim = sum(tree.joints[j].dof for j in tree.actuated_joint_indices())
        self.tensors = {
            "W1": parameter(orthogonal(rng, obs_dim, d)),
            "b1": parameter(np.zeros(d)),
            "W2": parameter(orthogonal(rng, d, d)),
            "b2": parameter(np.zeros(d)),
            "W3": parameter(orthogonal(rng, d, self.action_dim, scale=0.1)),
            "b3": parameter(np.zeros(self.action_dim)),
            "log_std": parameter(np.full(self.action_dim, LOG_STD_INIT)),
        }

    def forward(self, obs: Tensor, want_orth: bool = True) -> ActorOutput:
        with stage("mlp"):
            h1 = ad.tanh(ad.add_rowvec(ad.matmul(obs, self.tensors["W1"]), self.tensors["b1"]))
            h2 = ad.tanh(ad.add_rowvec(ad.matmul(h1, self.tensors["W2"]), self.tensors["b2"]))
            mean = ad.add_rowvec(ad.matmul(h2, self.tensors["W3"]), self.tensors["b3"])
        return ActorOutput(mean, self.tensors["log_std"], None, None)

    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def make_actor(kind: str, tree: KinematicTree, obs_dim: int, d: int, seed: int):
    rng = np.random.default_rng(seed)
    if kind == "abdnet":
        return AbdNetActor(tree, obs_dim, d, rng, constrained=True)
    if kind == "abdnet-noorth":
        return AbdNetActor(tree, obs_dim, d, rng, constrained=False)
    if kind == "gnn":
        return GnnActor(tree, obs_dim, d, rng)
    if kind == "mlp":
        return MlpActor(tree, obs_dim, d, rng)
    raise ValueError(f"unknown actor kind '{kind}' (choose from {ACTOR_KINDS})")


class CriticMlp:
    """Value network shared by every actor kind: two tanh hidden layers."""

    def __init__(self, obs_dim: int, hidden: int, rng: np.random.Generator):
        self.tensors = {
            "W1": parameter(orthogonal(rng, obs_dim, hidden)),
            "b1": parameter(np.zeros(hidden)),
            "W2": parameter(orthogonal(rng, hidden, hidden)),
            "b2": parameter(np.zeros(hidden)),
            "W3": parameter(orthogonal(rng, hidden, 1, scale=0.1)),
            "b3": parameter(np.zeros(1)),
        }

    def forward(self, obs: Tensor) -> Tensor:
        h1 = ad.tanh(ad.add_rowvec(ad.matmul(obs, self.tensors["W1"]), self.tensors["b1"]))
        h2 = ad.tanh(ad.add_rowvec(ad.matmul(h1, self.tensors["W2"]), self.tensors["b2"]))
        return ad.add_rowvec(ad.matmul(h2, self.tensors["W3"]), self.tensors["b3"])


# ---------------------------------------------------------------------------
# Parameter budgets
# ---------------------------------------------------------------------------

def param_count(kind: str, tree: KinematicTree, d: int, obs_dim: int) -> int:
    """Analytic learnable-parameter count; matches n_params() exactly."""
    K = tree.K
    A = sum(tree.joints[j].dof for j in tree.actuated_joint_indices())
    heads = sum(d * d + d + d * tree.joints[j].dof + tree.joints[j].dof
                for j in tree.actuated_joint_indices())
    if kind in ("abdnet", "abdnet-noorth"):
        return K * (obs_dim * d + d) + K * d + (K - 1) * d * d + heads + A
    if kind == "gnn":
        return K * (obs_dim * d + d) + GNN_ROUNDS * (2 * d * d + d) + heads + A
    if kind == "mlp":
        return obs_dim * d + d + d * d + d + d * A + A + A
    raise ValueError(f"unknown actor kind '{kind}'")


def match_width(kind: str, tree: KinematicTree, obs_dim: int, target_params: int,
                max_width: int = 1024) -> int:
    """Hidden width whose parameter count lands closest to the target."""
    best, best_gap = 1, float("inf")
    for d in range(1, max_width + 1):
        gap = abs(param_count(kind, tree, d, obs_dim) - target_params)
        if gap < best_gap:
            best, best_gap = d, gap
    return best


# ---------------------------------------------------------------------------
# FLOPs accounting
# ---------------------------------------------------------------------------

def flops_count(kind: str, tree: KinematicTree, d: int, obs_dim: int) -> dict[str, int]:
    """Analytic multiply-add counts of one forward pass (batch of one).

    Buckets mirror the instrumentation stages; `message_pass` covers exactly
    the per-edge work, so it is zero for a single link and proportional to
    the edge count on chains.
    """
    K = tree.K
    E = K - 1
    acts = tree.actuated_joint_indices()
    decode_cost = sum(d * d + d + d * tree.joints[j].dof + tree.joints[j].dof for j in acts)
    if kind in ("abdnet", "abdnet-noorth"):
        per_edge = (2 * d * d if kind == "abdnet" else d * d) + 4 * d
        out = {
            "encode": K * (obs_dim * d + d),
            "embed": K * d,
            "message_pass": E * per_edge,
            "root_update": d,
            "decode": decode_cost,
        }
    elif kind == "gnn":
        deg_sum = 2 * E
        out = {
            "encode": K * (obs_dim * d + d),
            "message_pass": GNN_ROUNDS * (K * (2 * d * d + d) + deg_sum * d),
            "decode": decode_cost,
        }
    elif kind == "mlp":
        A = sum(tree.joints[j].dof for j in acts)
        out = {"mlp": obs_dim * d + d + d * d + d + d * A + A}
    else:
        raise ValueError(f"unknown actor kind '{kind}'")
    out["total"] = sum(out.values())
    return out


def instrumented_flops(kind: str, tree: KinematicTree, d: int, obs_dim: int,
                       seed: int = 0) -> dict[str, int]:
    """Measured multiply-add counts from a recorded single-sample forward."""
    actor = make_actor(kind, tree, obs_dim, d, seed)
    obs = Tensor(np.zeros((1, obs_dim)))
    with Tape() as tape:
        actor.forward(obs, want_orth=False)
    stages = {n.stage for n in tape.nodes}
    out = {s: tape.muladd_count(stage=s) for s in sorted(stages) if s != "activation"}
    out.pop("default", None)
    out["total"] = sum(out.values())
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, actor, tree: KinematicTree, extra: dict | None = None) -> None:
    """Manifest plus named little-endian parameter arrays in one npz file."""
    manifest = {
        "version": CHECKPOINT_VERSION,
        "kind": actor.kind,
        "tree_hash": tree_hash(tree),
        "d": actor.d,
        "obs_dim": actor.obs_dim,
        "action_dim": actor.action_dim,
        "precision": str(np.dtype(ad.get_default_dtype()).name),
        "extra": extra or {},
    }
    arrays = {name: np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
              for name, t in actor.tensors.items()}
    np.savez(path, __manifest__=np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8),
             **arrays)


def load_manifest(path: str) -> dict:
    with np.load(path) as data:
        return json.loads(bytes(data["__manifest__"]).decode())


def load_checkpoint(path: str, tree: KinematicTree):
    """Rebuild the actor; refuses to load onto a mismatched morphology."""
    with np.load(path) as data:
        manifest = json.loads(bytes(data["__manifest__"]).decode())
        if manifest["tree_hash"] != tree_hash(tree):
            raise TreeMismatchError(
                f"checkpoint built for tree {manifest['tree_hash'][:12]}..., "
                f"got {tree_hash(tree)[:12]}..."
            )
        actor = make_actor(manifest["kind"], tree, manifest["obs_dim"], manifest["d"], seed=0)
        for name, t in actor.tensors.items():
            t.data = np.asarray(data[name], dtype=t.data.dtype)
    return actor
