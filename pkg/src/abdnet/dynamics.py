"""Exact forward dynamics on kinematic trees.

Two independent routes produce joint accelerations:

- `aba_forward_dynamics`: the O(K) articulated-body recursion. Articulated
  inertias and bias forces propagate leaf-to-root; each child contributes its
  articulated inertia with the joint-permitted directions projected out.
- `crba_oracle_dynamics`: dense route via the composite-rigid-body mass matrix
  and a zero-acceleration Newton-Euler sweep for the bias vector, solving
  M qdd = tau - bias. The two must agree to tight tolerance; the oracle is the
  correctness anchor for everything built on top.

Gravity enters both as a fictitious base acceleration, so the code paths stay
identical and the equivalence check is exact.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .morphology import KinematicTree, leaf_to_root, root_to_leaf
from .spatial import (
    SpatialInertia,
    SpatialTransform,
    SpatialVector,
    inertia_apply,
    spatial_cross_force,
    spatial_cross_motion,
    transform_force_inverse,
    transform_motion,
)

Array = np.ndarray

SINGULAR_TOL = 1e-12


class DynamicsError(Exception):
    pass


class SingularJointInertiaError(DynamicsError):
    """S^T I^A S became numerically singular (degenerate inertia input)."""


class NonPosDefMassMatrixError(DynamicsError):
    """Joint-space mass matrix failed its Cholesky factorization."""


class UnknownLinkError(DynamicsError):
    pass


@dataclass(frozen=True)
class JointState:
    """Positions and velocities for every dof joint, in ascending link order."""

    q: Array
    qd: Array

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "qd", np.asarray(self.qd, dtype=np.float64).reshape(-1))
        if self.q.shape != self.qd.shape:
            raise ValueError(f"q and qd lengths differ: {self.q.shape} vs {self.qd.shape}")
        if not (np.isfinite(self.q).all() and np.isfinite(self.qd).all()):
            raise ValueError("joint state must be finite")

    @staticmethod
    def zero(tree: KinematicTree) -> "JointState":
        return JointState(np.zeros(tree.n_dof), np.zeros(tree.n_dof))


def _check_dims(tree: KinematicTree, state: JointState, tau: Array) -> Array:
    tau = np.asarray(tau, dtype=np.float64).reshape(-1)
    if len(state.q) != tree.n_dof or len(tau) != tree.n_dof:
        raise ValueError(
            f"expected {tree.n_dof} dof, got q={len(state.q)}, tau={len(tau)}"
        )
    return tau


def _link_transforms(tree: KinematicTree, q: Array) -> list[SpatialTransform | None]:
    """Xup[i]: transform from the parent link frame into link i's frame."""
    xup: list[SpatialTransform | None] = [None] * tree.K
    for i in range(1, tree.K):
        j = tree.joints[i]
        qi = q[tree.dof_index(i)] if j.dof else 0.0
        xup[i] = j.joint_transform(qi).compose(j.parent_to_joint)
    return xup


# ---------------------------------------------------------------------------
# Raw-array fast path for the articulated-body recursion.
#
# The per-tree constants (parent indices, joint axes, rest transforms, dense
# inertia blocks) are flattened once; the recursion then runs on bare float64
# arrays with hand-rolled cross products, which keeps the per-step cost low
# enough for the training loops. The CRBA/RNEA oracle deliberately stays on
# the factored spatial-algebra layer so the two routes share as little code
# as possible.
# ---------------------------------------------------------------------------

_KIND_REVOLUTE, _KIND_PRISMATIC, _KIND_FIXED = 0, 1, 2


class _TreeData:
    __slots__ = ("parent", "kind", "axis", "E_T", "r_T", "S", "slot", "I_dense",
                 "order_down", "order_up", "n_dof", "limits")

    def __init__(self, tree: KinematicTree):
        K = tree.K
        self.parent = [tree.parent(i) for i in range(K)]
        self.kind = [None] * K
        self.axis = [None] * K
        self.E_T = [None] * K
        self.r_T = [None] * K
        self.S = [None] * K
        self.slot = [None] * K
        self.limits = [None] * K
        self.I_dense = [l.inertia.matrix() for l in tree.links]
        self.order_down = [i for i in root_to_leaf(tree) if i != 0]
        self.order_up = [i for i in leaf_to_root(tree) if i != 0]
        self.n_dof = tree.n_dof
        for i in range(1, K):
            j = tree.joints[i]
            self.kind[i] = {"revolute": _KIND_REVOLUTE, "prismatic": _KIND_PRISMATIC,
                            "fixed": _KIND_FIXED}[j.kind]
            self.axis[i] = j.axis
            self.E_T[i] = j.parent_to_joint.rotation
            self.r_T[i] = j.parent_to_joint.translation
            if j.dof:
                self.S[i] = j.motion_subspace()[:, 0]
                self.slot[i] = tree.dof_index(i)
                self.limits[i] = j.position_limits


# Keyed by id with a strong reference to the tree, so an id can never be
# recycled while its cache entry is alive.
_TREE_DATA: dict[int, tuple[KinematicTree, _TreeData]] = {}


def _tree_data(tree: KinematicTree) -> _TreeData:
    entry = _TREE_DATA.get(id(tree))
    if entry is None or entry[0] is not tree:
        if len(_TREE_DATA) > 256:
            _TREE_DATA.clear()
        entry = (tree, _TreeData(tree))
        _TREE_DATA[id(tree)] = entry
    return entry[1]


def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _joint_E_r(data: _TreeData, i: int, qi: float):
    """Rotation/translation of the joint displacement transform."""
    kind = data.kind[i]
    if kind == _KIND_REVOLUTE:
        a = data.axis[i]
        K = _skew(a)
        s, c = np.sin(qi), np.cos(qi)
        E = (np.eye(3) + s * K + (1.0 - c) * (K @ K)).T
        return E, None
    if kind == _KIND_PRISMATIC:
        return None, -qi * data.axis[i]
    return None, None


def _xup_raw(data: _TreeData, q: Array):
    """(E, r) per link for the parent-to-link coordinate transforms."""
    E_up = [None] * len(data.parent)
    r_up = [None] * len(data.parent)
    for i in data.order_down:
        E_J, r_J = _joint_E_r(data, i, q[data.slot[i]] if data.S[i] is not None else 0.0)
        if E_J is not None:  # revolute
            E_up[i] = E_J @ data.E_T[i]
            r_up[i] = E_J @ data.r_T[i]
        elif r_J is not None:  # prismatic
            E_up[i] = data.E_T[i]
            r_up[i] = data.r_T[i] + r_J
        else:  # fixed
            E_up[i] = data.E_T[i]
            r_up[i] = data.r_T[i]
    return E_up, r_up


def aba_forward_dynamics(
    tree: KinematicTree, state: JointState, tau, gravity=(0.0, 0.0, -9.81)
) -> Array:
    """Joint accelerations via the articulated-body recursion.

    Leaf-to-root, each link's articulated inertia is its own rigid-body
    inertia plus the child contributions
        Ia_child = IA - IA S (S^T IA S)^-1 S^T IA,
    which carry no inertia along the joint-permitted directions. Gravity
    enters as a fictitious upward base acceleration.
    """
    tau = _check_dims(tree, state, tau)
    g = np.asarray(gravity, dtype=np.float64).reshape(3)
    data = _tree_data(tree)
    K = len(data.parent)
    q, qd = state.q, state.qd
    E_up, r_up = _xup_raw(data, q)

    zero6 = np.zeros(6)
    v = [zero6] * K
    c = [zero6] * K
    IA = [m.copy() for m in data.I_dense]
    pA = [zero6] * K

    for i in data.order_down:
        p = data.parent[i]
        E, r = E_up[i], r_up[i]
        vp = v[p]
        w = E @ vp[:3]
        vi = np.concatenate([w, E @ vp[3:] + _cross(r, w)])
        S = data.S[i]
        if S is not None:
            vJ = S * qd[data.slot[i]]
            vi = vi + vJ
            # velocity-product term crm(v) @ vJ
            c[i] = np.concatenate([
                _cross(vi[:3], vJ[:3]),
                _cross(vi[:3], vJ[3:]) + _cross(vi[3:], vJ[:3]),
            ])
        v[i] = vi
        h = data.I_dense[i] @ vi
        pA[i] = np.concatenate([
            _cross(vi[:3], h[:3]) + _cross(vi[3:], h[3:]),
            _cross(vi[:3], h[3:]),
        ])

    U = [None] * K
    d = np.empty(K)
    u = np.empty(K)

    for i in data.order_up:
        S = data.S[i]
        if S is not None:
            Ui = IA[i] @ S
            di = S @ Ui
            if abs(di) <= SINGULAR_TOL:
                raise SingularJointInertiaError(
                    f"joint '{tree.joints[i].name}': S^T IA S = {di} is singular"
                )
            ui = tau[data.slot[i]] - S @ pA[i]
            U[i], d[i], u[i] = Ui, di, ui
            Ia = IA[i] - np.outer(Ui, Ui) / di
            pa = pA[i] + Ia @ c[i] + Ui * (ui / di)
        else:
            Ia = IA[i]
            pa = pA[i] + Ia @ c[i]
        p = data.parent[i]
        E, r = E_up[i], r_up[i]
        Xm = np.zeros((6, 6))
        Xm[:3, :3] = E
        Xm[3:, 3:] = E
        Xm[3:, :3] = _skew(r) @ E
        IA[p] = IA[p] + Xm.T @ Ia @ Xm
        # force transform back to the parent frame
        pA[p] = pA[p] + np.concatenate([
            E.T @ (pa[:3] - _cross(r, pa[3:])), E.T @ pa[3:]
        ])

    a = [None] * K
    a[0] = np.concatenate([np.zeros(3), -g])
    qdd = np.zeros(data.n_dof)

    for i in data.order_down:
        p = data.parent[i]
        E, r = E_up[i], r_up[i]
        ap = a[p]
        w = E @ ap[:3]
        ai = np.concatenate([w, E @ ap[3:] + _cross(r, w)]) + c[i]
        S = data.S[i]
        if S is not None:
            qi = (u[i] - U[i] @ ai) / d[i]
            qdd[data.slot[i]] = qi
            ai = ai + S * qi
        a[i] = ai
    return qdd


def articulated_inertia_contributions(
    tree: KinematicTree, state: JointState
) -> tuple[list[Array], list[Array]]:
    """(I^A per link, child contribution I^a per link) for structural checks.

    I^a[i] is what link i passes to its parent, expressed in link i's frame,
    before the coordinate change.
    """
    xup = _link_transforms(tree, state.q)
    IA = [l.inertia.matrix() for l in tree.links]
    Ia: list[Array] = [np.zeros((6, 6))] * tree.K
    for i in [k for k in leaf_to_root(tree) if k != 0]:
        S = tree.joints[i].motion_subspace()
        if S.shape[1]:
            U = IA[i] @ S
            d = S.T @ U
            Ia[i] = IA[i] - U @ np.linalg.inv(d) @ U.T
        else:
            Ia[i] = IA[i]
        Xm = xup[i].motion_matrix()
        p = tree.parent(i)
        IA[p] = IA[p] + Xm.T @ Ia[i] @ Xm
    return IA, Ia


def crba_mass_matrix(tree: KinematicTree, q: Array) -> Array:
    """Joint-space mass matrix via composite rigid-body inertias."""
    xup = _link_transforms(tree, q)
    IC = [l.inertia.matrix() for l in tree.links]
    for i in [k for k in leaf_to_root(tree) if k != 0]:
        Xm = xup[i].motion_matrix()
        IC[tree.parent(i)] += Xm.T @ IC[i] @ Xm

    dof_links = tree.dof_joint_indices()
    idx = {link: n for n, link in enumerate(dof_links)}
    n = len(dof_links)
    H = np.zeros((n, n))
    for i in dof_links:
        Si = tree.joints[i].motion_subspace()[:, 0]
        F = IC[i] @ Si
        H[idx[i], idx[i]] = Si @ F
        j = i
        while tree.parent(j) != 0:
            F = transform_force_inverse(xup[j], SpatialVector.from_array(F)).as_array()
            j = tree.parent(j)
            if tree.joints[j].dof:
                Sj = tree.joints[j].motion_subspace()[:, 0]
                H[idx[i], idx[j]] = F @ Sj
                H[idx[j], idx[i]] = H[idx[i], idx[j]]
    return H


def rnea_bias(tree: KinematicTree, state: JointState, gravity=(0.0, 0.0, -9.81)) -> Array:
    """Joint-space bias torques: inverse dynamics with zero joint acceleration.

    Covers Coriolis/centrifugal and gravity terms (gravity via the fictitious
    base acceleration, matching the forward recursion).
    """
    g = np.asarray(gravity, dtype=np.float64).reshape(3)
    K = tree.K
    xup = _link_transforms(tree, state.q)
    v: list[SpatialVector] = [SpatialVector.zero()] * K
    a: list[SpatialVector] = [SpatialVector.zero()] * K
    f: list[SpatialVector] = [SpatialVector.zero()] * K
    a[0] = SpatialVector(np.zeros(3), -g)

    for i in [k for k in root_to_leaf(tree) if k != 0]:
        j = tree.joints[i]
        S = j.motion_subspace()
        vj = (
            SpatialVector.from_array(S[:, 0] * state.qd[tree.dof_index(i)])
            if j.dof
            else SpatialVector.zero()
        )
        p = tree.parent(i)
        v[i] = transform_motion(xup[i], v[p]) + vj
        a[i] = transform_motion(xup[i], a[p]) + spatial_cross_motion(v[i], vj)
        inertia = tree.links[i].inertia
        f[i] = inertia_apply(inertia, a[i]) + spatial_cross_force(
            v[i], inertia_apply(inertia, v[i])
        )

    bias = np.zeros(tree.n_dof)
    for i in [k for k in leaf_to_root(tree) if k != 0]:
        j = tree.joints[i]
        if j.dof:
            bias[tree.dof_index(i)] = j.motion_subspace()[:, 0] @ f[i].as_array()
        f[tree.parent(i)] = f[tree.parent(i)] + transform_force_inverse(xup[i], f[i])
    return bias


def crba_oracle_dynamics(
    tree: KinematicTree, state: JointState, tau, gravity=(0.0, 0.0, -9.81)
) -> Array:
    """Forward dynamics through the dense route: solve M qdd = tau - bias."""
    tau = _check_dims(tree, state, tau)
    M = crba_mass_matrix(tree, state.q)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as e:
        raise NonPosDefMassMatrixError(f"mass matrix not positive definite: {e}") from e
    rhs = tau - rnea_bias(tree, state, gravity)
    y = np.linalg.solve(L, rhs)
    return np.linalg.solve(L.T, y)


def step_semi_implicit(
    tree: KinematicTree, state: JointState, tau, gravity=(0.0, 0.0, -9.81), dt: float = 1e-3
) -> JointState:
    """One semi-implicit Euler step; position limits clamp with velocity zeroing."""
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    qdd = aba_forward_dynamics(tree, state, tau, gravity)
    qd_new = state.qd + dt * qdd
    q_new = state.q + dt * qd_new
    for i in tree.dof_joint_indices():
        lim = tree.joints[i].position_limits
        if lim is None:
            continue
        k = tree.dof_index(i)
        clamped = min(max(q_new[k], lim[0]), lim[1])
        if clamped != q_new[k]:
            q_new[k] = clamped
            qd_new[k] = 0.0
    return JointState(q_new, qd_new)


def mass_scaled(tree: KinematicTree, link_name: str, factor: float) -> KinematicTree:
    """New tree with one link's mass and rotational inertia scaled."""
    if not factor > 0.0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    names = [l.name for l in tree.links]
    if link_name not in names:
        raise UnknownLinkError(f"no link named '{link_name}' (have {names})")
    idx = names.index(link_name)
    old = tree.links[idx].inertia
    scaled = SpatialInertia(factor * old.mass, old.com, factor * old.rot_inertia)
    links = list(tree.links)
    links[idx] = replace(links[idx], inertia=scaled)
    return KinematicTree(tuple(links), tree.joints)


# ---------------------------------------------------------------------------
# Forward kinematics helpers (energies, contact points)
# ---------------------------------------------------------------------------

def _fk_raw(data: _TreeData, q: Array):
    """World pose (axis matrix, origin) of every link frame in base coords."""
    K = len(data.parent)
    R = [None] * K
    p = [None] * K
    R[0] = np.eye(3)
    p[0] = np.zeros(3)
    for i in data.order_down:
        par = data.parent[i]
        E_J, r_J = _joint_E_r(data, i, q[data.slot[i]] if data.S[i] is not None else 0.0)
        if E_J is not None:
            E = E_J @ data.E_T[i]
            r = E_J @ data.r_T[i]
        elif r_J is not None:
            E = data.E_T[i]
            r = data.r_T[i] + r_J
        else:
            E = data.E_T[i]
            r = data.r_T[i]
        # frame pose of (E, r): axes E^T, origin -E^T r, chained into world
        R[i] = R[par] @ E.T
        p[i] = p[par] + R[par] @ (-E.T @ r)
    return R, p


def base_to_link_transforms(tree: KinematicTree, q: Array) -> list[SpatialTransform]:
    """X0[i]: transform from base (link 0) coordinates into link i coordinates."""
    R, p = _fk_raw(_tree_data(tree), q)
    return [SpatialTransform.from_pose(R[i], p[i]) for i in range(tree.K)]


def com_positions(tree: KinematicTree, q: Array) -> Array:
    """Per-link com positions in base coordinates, shape (K, 3)."""
    R, p = _fk_raw(_tree_data(tree), q)
    return np.stack([p[i] + R[i] @ tree.links[i].inertia.com for i in range(tree.K)])


def total_com_height(tree: KinematicTree, q: Array) -> float:
    """Mass-weighted com height of the moving links (root excluded)."""
    pos = com_positions(tree, q)
    masses = np.array([l.inertia.mass for l in tree.links])
    masses[0] = 0.0
    return float((masses @ pos[:, 2]) / masses.sum())


def point_position(tree: KinematicTree, q: Array, link_index: int, offset) -> Array:
    R, p = _fk_raw(_tree_data(tree), q)
    return p[link_index] + R[link_index] @ np.asarray(offset, dtype=np.float64)


def point_jacobian(tree: KinematicTree, q: Array, link_index: int, offset) -> Array:
    """3 x n_dof linear-velocity Jacobian of a point fixed in a link's frame."""
    data = _tree_data(tree)
    R, po = _fk_raw(data, q)
    return _point_jac_from_fk(data, R, po, link_index,
                              np.asarray(offset, dtype=np.float64))[1]


def _point_jac_from_fk(data: _TreeData, R, po, link_index: int, offset: Array):
    p = po[link_index] + R[link_index] @ offset
    J = np.zeros((3, data.n_dof))
    j = link_index
    while j != 0:
        if data.S[j] is not None:
            axis_w = R[j] @ data.axis[j]
            if data.kind[j] == _KIND_REVOLUTE:
                col = _cross(axis_w, p - po[j])
            else:
                col = axis_w
            J[:, data.slot[j]] = col
        j = data.parent[j]
    return p, J


def points_pos_jac(tree: KinematicTree, q: Array, points) -> list[tuple[Array, Array]]:
    """Positions and Jacobians for several (link_index, offset) pairs from a
    single kinematics pass (the contact model calls this every substep)."""
    data = _tree_data(tree)
    R, po = _fk_raw(data, q)
    return [_point_jac_from_fk(data, R, po, link, np.asarray(off, dtype=np.float64))
            for link, off in points]


def kinetic_energy(tree: KinematicTree, state: JointState) -> float:
    M = crba_mass_matrix(tree, state.q)
    return float(0.5 * state.qd @ M @ state.qd)


def potential_energy(tree: KinematicTree, q: Array, gravity=(0.0, 0.0, -9.81)) -> float:
    g = np.asarray(gravity, dtype=np.float64).reshape(3)
    pos = com_positions(tree, q)
    masses = np.array([l.inertia.mass for l in tree.links])
    return float(-np.sum(masses[1:] * (pos[1:] @ g)))


def total_energy(tree: KinematicTree, state: JointState, gravity=(0.0, 0.0, -9.81)) -> float:
    return kinetic_energy(tree, state) + potential_energy(tree, state.q, gravity)
