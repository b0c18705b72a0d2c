"""Robot morphology: parsing structured descriptions into a kinematic tree.

The tree is the shared substrate for both the exact dynamics algorithms and
the learned actors: links are nodes, joints are edges, and the leaf-to-root /
root-to-leaf orders drive every recursive traversal in the project.
"""
from __future__ import annotations

import hashlib
import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from .spatial import (
    SpatialInertia,
    SpatialTransform,
    inertia_add,
    rotation_about_axis,
    rpy_matrix,
    transform_inertia,
)

Array = np.ndarray

# Fixed-joint children lighter than this with no actuated descendants are
# treated as sensor attachments and merged away during URDF import.
SENSOR_MASS_THRESHOLD = 1e-4


class MorphologyError(Exception):
    """Base class for morphology parsing/validation failures."""


class ParseError(MorphologyError):
    pass


class CycleError(MorphologyError):
    pass


class MultiRootError(MorphologyError):
    pass


class MissingInertiaError(MorphologyError):
    pass


class BadAxisError(MorphologyError):
    pass


class UnsupportedJointError(MorphologyError):
    pass


JOINT_KINDS = ("revolute", "prismatic", "fixed")


@dataclass(frozen=True)
class Joint:
    """Joint connecting a link to its parent. 1-dof (revolute/prismatic) or fixed."""

    name: str
    kind: str
    axis: Array
    parent_to_joint: SpatialTransform
    dof: int
    position_limits: tuple[float, float] | None = None
    actuated: bool = False

    def __post_init__(self):
        if self.kind not in JOINT_KINDS:
            raise UnsupportedJointError(f"joint '{self.name}' has unsupported kind '{self.kind}'")
        a = np.asarray(self.axis, dtype=np.float64).reshape(3)
        n = np.linalg.norm(a)
        if self.kind != "fixed":
            if n < 1e-8:
                raise BadAxisError(f"joint '{self.name}' axis is not normalizable")
            a = a / n
        object.__setattr__(self, "axis", a)
        if (self.kind == "fixed") != (self.dof == 0):
            raise ParseError(f"joint '{self.name}': fixed kind must have dof 0 and vice versa")
        if self.actuated and self.dof < 1:
            raise ParseError(f"joint '{self.name}' is actuated but has no dof")

    def motion_subspace(self) -> Array:
        """6 x dof matrix of permitted motion directions, angular part first."""
        if self.dof == 0:
            return np.zeros((6, 0))
        col = np.zeros(6)
        if self.kind == "revolute":
            col[:3] = self.axis
        else:
            col[3:] = self.axis
        return col.reshape(6, 1)

    def joint_transform(self, q: float) -> SpatialTransform:
        """Transform from the joint rest frame into the displaced child frame."""
        if self.kind == "revolute":
            return SpatialTransform(rotation_about_axis(self.axis, q), np.zeros(3))
        if self.kind == "prismatic":
            return SpatialTransform(np.eye(3), -q * self.axis)
        return SpatialTransform.identity()


@dataclass(frozen=True)
class Link:
    name: str
    index: int
    inertia: SpatialInertia
    parent: int | None
    children: tuple[int, ...]


@dataclass(frozen=True)
class KinematicTree:
    """Rooted tree of links; joints[i] connects link i to its parent (i >= 1)."""

    links: tuple[Link, ...]
    joints: tuple[Joint | None, ...]

    @property
    def K(self) -> int:
        return len(self.links)

    def parent(self, i: int) -> int | None:
        return self.links[i].parent

    def children(self, i: int) -> tuple[int, ...]:
        return self.links[i].children

    @property
    def leaf_to_root_order(self) -> tuple[int, ...]:
        return leaf_to_root(self)

    def dof_joint_indices(self) -> list[int]:
        """Link indices whose joint has dof >= 1, ascending."""
        return [i for i in range(1, self.K) if self.joints[i].dof >= 1]

    def actuated_joint_indices(self) -> list[int]:
        return [i for i in range(1, self.K) if self.joints[i].dof >= 1 and self.joints[i].actuated]

    @property
    def n_dof(self) -> int:
        return len(self.dof_joint_indices())

    @property
    def n_actuated(self) -> int:
        return len(self.actuated_joint_indices())

    def dof_index(self, link_index: int) -> int:
        """Position of this link's joint in the q/qd vectors."""
        return self.dof_joint_indices().index(link_index)

    def link_by_name(self, name: str) -> Link:
        for l in self.links:
            if l.name == name:
                return l
        raise KeyError(name)

    def descendants(self, i: int) -> set[int]:
        out, stack = set(), list(self.children(i))
        while stack:
            j = stack.pop()
            out.add(j)
            stack.extend(self.children(j))
        return out


def _depths(links: tuple[Link, ...]) -> list[int]:
    # Document order need not respect the hierarchy, so walk parent chains.
    depth: list[int | None] = [None] * len(links)

    def d(i: int) -> int:
        if depth[i] is None:
            p = links[i].parent
            depth[i] = 0 if p is None else d(p) + 1
        return depth[i]

    return [d(l.index) for l in links]


def root_to_leaf(tree: KinematicTree) -> tuple[int, ...]:
    """Indices ordered so every parent precedes its children; siblings ascend."""
    d = _depths(tree.links)
    return tuple(sorted(range(tree.K), key=lambda i: (d[i], i)))


def leaf_to_root(tree: KinematicTree) -> tuple[int, ...]:
    """Indices ordered so every child precedes its parent; siblings ascend."""
    d = _depths(tree.links)
    return tuple(sorted(range(tree.K), key=lambda i: (-d[i], i)))


def _validate_tree(links: list[Link], joints: list[Joint | None]) -> None:
    roots = [l.index for l in links if l.parent is None]
    if len(roots) > 1:
        raise MultiRootError(f"multiple root links: {[links[i].name for i in roots]}")
    if not roots:
        raise CycleError("no root link: parent chain is cyclic")
    if roots[0] != 0:
        raise ParseError("root link must have index 0")
    # Walk every parent chain; a revisit is a cycle, and connectivity follows
    # from every non-root link reaching the root.
    for l in links:
        seen = set()
        i = l.index
        while i is not None:
            if i in seen:
                raise CycleError(f"cycle through link '{links[i].name}'")
            seen.add(i)
            i = links[i].parent
        if 0 not in seen:
            raise CycleError(f"link '{l.name}' does not reach the root")
    for l in links:
        for c in l.children:
            if links[c].parent != l.index:
                raise ParseError("inconsistent parent/child maps")


def _build_tree(links: list[Link], joints: list[Joint | None]) -> KinematicTree:
    _validate_tree(links, joints)
    return KinematicTree(tuple(links), tuple(joints))


def parse_native(doc: dict) -> KinematicTree:
    """Parse the native JSON morphology document into a validated tree.

    Link indices follow document order, with the root link moved to index 0.
    """
    if not isinstance(doc, dict) or "links" not in doc or "joints" not in doc:
        raise ParseError("document must contain 'links' and 'joints'")

    raw_links = doc["links"]
    raw_joints = doc["joints"]
    names = [l.get("name") for l in raw_links]
    if len(set(names)) != len(names):
        raise ParseError("duplicate link names")

    child_names = [j.get("child") for j in raw_joints]
    parent_of: dict[str, dict] = {}
    for j in raw_joints:
        for key in ("parent", "child", "name", "kind"):
            if key not in j:
                raise ParseError(f"joint missing field '{key}'")
        if j["parent"] not in names or j["child"] not in names:
            raise ParseError(f"joint '{j['name']}' references unknown link")
        if j["child"] in parent_of:
            raise ParseError(f"link '{j['child']}' has multiple parent joints")
        parent_of[j["child"]] = j

    root_names = [n for n in names if n not in child_names]
    if len(root_names) > 1:
        raise MultiRootError(f"multiple root links: {root_names}")
    if not root_names:
        raise CycleError("no root link: every link is some joint's child")

    ordered = [n for n in names if n == root_names[0]] + [n for n in names if n != root_names[0]]
    index_of = {n: i for i, n in enumerate(ordered)}

    links: list[Link] = []
    joints: list[Joint | None] = [None] * len(ordered)
    children: dict[int, list[int]] = {i: [] for i in range(len(ordered))}
    raw_by_name = {l["name"]: l for l in raw_links}

    for name in ordered:
        raw = raw_by_name[name]
        mass = raw.get("mass")
        if mass is None or not mass > 0.0:
            raise MissingInertiaError(f"link '{name}' needs a positive mass, got {mass}")
        try:
            inertia = SpatialInertia(float(mass), raw.get("com", [0, 0, 0]),
                                     _inertia_from_six(raw.get("inertia", [0] * 6)))
        except ValueError as e:
            raise MissingInertiaError(f"link '{name}': {e}") from e
        i = index_of[name]
        jraw = parent_of.get(name)
        parent = index_of[jraw["parent"]] if jraw is not None else None
        if parent is not None:
            children[parent].append(i)
            joints[i] = _joint_from_raw(jraw)
        links.append(Link(name, i, inertia, parent, ()))

    links.sort(key=lambda l: l.index)
    links = [replace(l, children=tuple(sorted(children[l.index]))) for l in links]
    return _build_tree(links, joints)


def _inertia_from_six(vals) -> Array:
    if len(vals) != 6:
        raise ParseError(f"inertia must have 6 entries (xx,yy,zz,xy,xz,yz), got {len(vals)}")
    xx, yy, zz, xy, xz, yz = [float(v) for v in vals]
    return np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])


def _joint_from_raw(j: dict) -> Joint:
    origin = j.get("origin", {})
    xyz = origin.get("xyz", [0, 0, 0])
    rpy = origin.get("rpy", [0, 0, 0])
    X = SpatialTransform.from_pose(rpy_matrix(*rpy), xyz)
    limits = None
    if j.get("limits") is not None:
        limits = (float(j["limits"]["lower"]), float(j["limits"]["upper"]))
    kind = j["kind"]
    if kind not in JOINT_KINDS:
        raise UnsupportedJointError(f"joint '{j['name']}' has unsupported kind '{kind}'")
    return Joint(
        name=j["name"],
        kind=kind,
        axis=np.asarray(j.get("axis", [0, 0, 1]), dtype=np.float64),
        parent_to_joint=X,
        dof=0 if kind == "fixed" else 1,
        position_limits=limits,
        actuated=bool(j.get("actuated", kind != "fixed")),
    )


def serialize_native(tree: KinematicTree) -> dict:
    """Canonical native document; parse_native round-trips it structurally."""
    links = []
    for l in tree.links:
        I = l.inertia.rot_inertia
        links.append({
            "name": l.name,
            "mass": float(l.inertia.mass),
            "com": [float(v) for v in l.inertia.com],
            "inertia": [float(I[0, 0]), float(I[1, 1]), float(I[2, 2]),
                        float(I[0, 1]), float(I[0, 2]), float(I[1, 2])],
        })
    joints = []
    for i in range(1, tree.K):
        j = tree.joints[i]
        R_frame, origin = j.parent_to_joint.frame_pose()
        rpy = _rpy_from_matrix(R_frame)
        entry = {
            "name": j.name,
            "parent": tree.links[tree.parent(i)].name,
            "child": tree.links[i].name,
            "kind": j.kind,
            "axis": [float(v) for v in j.axis],
            "origin": {"xyz": [float(v) for v in origin], "rpy": [float(v) for v in rpy]},
            "actuated": bool(j.actuated),
        }
        if j.position_limits is not None:
            entry["limits"] = {"lower": j.position_limits[0], "upper": j.position_limits[1]}
        joints.append(entry)
    return {"links": links, "joints": joints}


def _rpy_from_matrix(R: Array) -> tuple[float, float, float]:
    pitch = np.arctan2(-R[2, 0], np.hypot(R[0, 0], R[1, 0]))
    if abs(abs(pitch) - np.pi / 2) < 1e-9:
        roll = np.arctan2(R[0, 1], R[1, 1]) * (-1.0 if pitch > 0 else 1.0)
        return float(roll), float(pitch), 0.0
    roll = np.arctan2(R[2, 1], R[2, 2])
    yaw = np.arctan2(R[1, 0], R[0, 0])
    return float(roll), float(pitch), float(yaw)


def tree_hash(tree: KinematicTree) -> str:
    """Content hash of the morphology; guards checkpoints against mismatches."""
    payload = json.dumps(serialize_native(tree), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def structurally_equal(a: KinematicTree, b: KinematicTree, tol: float = 0.0) -> bool:
    if a.K != b.K:
        return False
    for la, lb in zip(a.links, b.links):
        if la.name != lb.name or la.parent != lb.parent or la.children != lb.children:
            return False
        if not _close(la.inertia.matrix(), lb.inertia.matrix(), tol):
            return False
    for ja, jb in zip(a.joints[1:], b.joints[1:]):
        if ja.kind != jb.kind or ja.dof != jb.dof or ja.actuated != jb.actuated:
            return False
        if not _close(ja.axis, jb.axis, tol):
            return False
        if not _close(ja.parent_to_joint.motion_matrix(), jb.parent_to_joint.motion_matrix(), tol):
            return False
    return True


def _close(x, y, tol):
    return np.array_equal(x, y) if tol == 0.0 else bool(np.allclose(x, y, atol=tol))


def load_tree(path: str) -> KinematicTree:
    """Load a morphology file: .json native format or .urdf/.xml subset."""
    text = open(path).read()
    if path.endswith((".urdf", ".xml")) or text.lstrip().startswith("<"):
        return parse_urdf_subset(text)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid JSON ({e})") from e
    validate_native_schema(doc)
    return parse_native(doc)


def validate_native_schema(doc: dict) -> None:
    """Validate against the shipped JSON schema (field names are load-bearing)."""
    import jsonschema

    schema = json.loads(
        resources.files("abdnet.presets").joinpath("morphology.schema.json").read_text()
    )
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as e:
        raise ParseError(f"morphology document invalid: {e.message}") from e


# ---------------------------------------------------------------------------
# URDF subset
# ---------------------------------------------------------------------------

_URDF_SUPPORTED = {"revolute", "prismatic", "fixed"}


def parse_urdf_subset(xml_text: str) -> KinematicTree:
    """Parse the supported URDF subset: link inertials plus revolute /
    prismatic / fixed joints.

    Fixed-jointed links below the sensor mass threshold with no actuated
    descendants (cameras, IMUs) are merged into their parent by composing
    spatial inertias, so the tree reflects only structure relevant to control.
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as e:
        raise ParseError(f"invalid XML: {e}") from e
    if root.tag != "robot":
        raise ParseError(f"expected <robot> root element, got <{root.tag}>")

    link_raw: dict[str, dict] = {}
    for el in root.findall("link"):
        name = el.get("name")
        if name is None:
            raise ParseError("<link> without name")
        inertial = el.find("inertial")
        entry: dict = {"name": name, "mass": 0.0, "inertia": None}
        if inertial is not None:
            mass_el = inertial.find("mass")
            mass = float(mass_el.get("value")) if mass_el is not None else 0.0
            org = inertial.find("origin")
            xyz = _floats(org.get("xyz", "0 0 0")) if org is not None else np.zeros(3)
            rpy = _floats(org.get("rpy", "0 0 0")) if org is not None else np.zeros(3)
            in_el = inertial.find("inertia")
            if in_el is not None:
                I_com = np.array([
                    [float(in_el.get("ixx", 0)), float(in_el.get("ixy", 0)), float(in_el.get("ixz", 0))],
                    [float(in_el.get("ixy", 0)), float(in_el.get("iyy", 0)), float(in_el.get("iyz", 0))],
                    [float(in_el.get("ixz", 0)), float(in_el.get("iyz", 0)), float(in_el.get("izz", 0))],
                ])
            else:
                I_com = np.zeros((3, 3))
            entry["mass"] = mass
            if mass > 0.0:
                entry["inertia"] = SpatialInertia.from_com_inertia(
                    mass, xyz, I_com, rotation=rpy_matrix(*rpy)
                )
        link_raw[name] = entry

    joints_raw = []
    for el in root.findall("joint"):
        name, kind = el.get("name"), el.get("type")
        if kind not in _URDF_SUPPORTED:
            raise UnsupportedJointError(f"joint '{name}' has unsupported type '{kind}'")
        parent = el.find("parent").get("link")
        child = el.find("child").get("link")
        if parent not in link_raw or child not in link_raw:
            raise ParseError(f"joint '{name}' references unknown link")
        org = el.find("origin")
        xyz = _floats(org.get("xyz", "0 0 0")) if org is not None else np.zeros(3)
        rpy = _floats(org.get("rpy", "0 0 0")) if org is not None else np.zeros(3)
        axis_el = el.find("axis")
        axis = _floats(axis_el.get("xyz")) if axis_el is not None else np.array([0.0, 0.0, 1.0])
        limit_el = el.find("limit")
        limits = None
        if limit_el is not None and limit_el.get("lower") is not None:
            limits = {"lower": float(limit_el.get("lower")), "upper": float(limit_el.get("upper"))}
        joints_raw.append({
            "name": name, "parent": parent, "child": child, "kind": kind,
            "axis": axis, "xyz": xyz, "rpy": rpy, "limits": limits,
        })

    return _assemble_urdf(link_raw, joints_raw)


def _floats(s: str) -> Array:
    return np.array([float(v) for v in s.split()])


def _assemble_urdf(link_raw: dict[str, dict], joints_raw: list[dict]) -> KinematicTree:
    children_of: dict[str, list[dict]] = {n: [] for n in link_raw}
    joint_to: dict[str, dict] = {}
    for j in joints_raw:
        if j["child"] in joint_to:
            raise ParseError(f"link '{j['child']}' has multiple parent joints")
        joint_to[j["child"]] = j
        children_of[j["parent"]].append(j)

    roots = [n for n in link_raw if n not in joint_to]
    if len(roots) > 1:
        raise MultiRootError(f"multiple root links: {roots}")
    if not roots:
        raise CycleError("no root link")

    # Decide which fixed-jointed featherweight links get merged into parents.
    def has_actuated_below(name: str) -> bool:
        for j in children_of[name]:
            if j["kind"] != "fixed" or has_actuated_below(j["child"]):
                return True
        return False

    merged: set[str] = set()

    def mergeable(name: str) -> bool:
        j = joint_to.get(name)
        return (
            j is not None
            and j["kind"] == "fixed"
            and link_raw[name]["mass"] < SENSOR_MASS_THRESHOLD
            and not has_actuated_below(name)
        )

    doc_links: list[dict] = []
    doc_joints: list[dict] = []
    _kept_inertia: dict[str, SpatialInertia] = {}

    def emit(name: str, accumulated: SpatialTransform | None, attach_parent: str | None):
        """Walk the URDF tree, folding merged links into their kept parent."""
        if mergeable(name) and attach_parent is not None:
            j = joint_to[name]
            X = SpatialTransform.from_pose(rpy_matrix(*j["rpy"]), j["xyz"])
            X_total = X if accumulated is None else X.compose(accumulated)
            inertia = link_raw[name]["inertia"]
            if inertia is not None:
                extra = transform_inertia(X_total, inertia)
                base = _kept_inertia[attach_parent]
                _kept_inertia[attach_parent] = inertia_add(base, extra)
            merged.add(name)
            for cj in children_of[name]:
                # Grandchildren joints are posed relative to the merged link's
                # frame; X_total re-expresses that frame in the kept parent.
                emit(cj["child"], X_total, attach_parent)
            return

        inertia = link_raw[name]["inertia"]
        if inertia is None:
            raise MissingInertiaError(f"link '{name}' has no usable <inertial> block")
        _kept_inertia[name] = inertia
        if attach_parent is not None:
            j = joint_to[name]
            X = SpatialTransform.from_pose(rpy_matrix(*j["rpy"]), j["xyz"])
            X_total = X if accumulated is None else X.compose(accumulated)
            R_frame, origin = X_total.frame_pose()
            doc_joints.append({
                "name": j["name"], "parent": attach_parent, "child": name,
                "kind": j["kind"], "axis": [float(v) for v in j["axis"]],
                "origin": {"xyz": [float(v) for v in origin],
                           "rpy": [float(v) for v in _rpy_from_matrix(R_frame)]},
                "limits": j["limits"],
                "actuated": j["kind"] != "fixed",
            })
        doc_links.append({"name": name})
        for cj in children_of[name]:
            emit(cj["child"], None, name)

    emit(roots[0], None, None)

    for dl in doc_links:
        I = _kept_inertia[dl["name"]]
        R = I.rot_inertia
        dl.update({
            "mass": float(I.mass),
            "com": [float(v) for v in I.com],
            "inertia": [float(R[0, 0]), float(R[1, 1]), float(R[2, 2]),
                        float(R[0, 1]), float(R[0, 2]), float(R[1, 2])],
        })
    return parse_native({"links": doc_links, "joints": doc_joints})


