import json

import numpy as np
import pytest

from abdnet.dynamics import aba_forward_dynamics, JointState
from abdnet.morphology import (
    CycleError,
    MissingInertiaError,
    MultiRootError,
    UnsupportedJointError,
    leaf_to_root,
    load_tree,
    parse_native,
    parse_urdf_subset,
    root_to_leaf,
    serialize_native,
    structurally_equal,
    tree_hash,
    validate_native_schema,
)

from helpers import random_tree

TWO_LINK = {
    "links": [
        {"name": "base", "mass": 2.0, "com": [0, 0, 0], "inertia": [0.1, 0.1, 0.1, 0, 0, 0]},
        {"name": "arm", "mass": 1.0, "com": [0, 0, -0.5], "inertia": [0.34, 0.34, 0.001, 0, 0, 0]},
    ],
    "joints": [
        {"name": "j1", "parent": "base", "child": "arm", "kind": "revolute",
         "axis": [0, 1, 0], "origin": {"xyz": [0, 0, 0], "rpy": [0, 0, 0]}, "actuated": True}
    ],
}


def binary_tree_doc():
    links = [{"name": f"l{i}", "mass": 1.0, "com": [0, 0, 0],
              "inertia": [0.1, 0.1, 0.1, 0, 0, 0]} for i in range(5)]
    joints = [
        {"name": "ja", "parent": "l0", "child": "l1", "kind": "revolute", "axis": [0, 1, 0]},
        {"name": "jb", "parent": "l0", "child": "l2", "kind": "revolute", "axis": [0, 1, 0]},
        {"name": "jc", "parent": "l1", "child": "l3", "kind": "revolute", "axis": [0, 1, 0]},
        {"name": "jd", "parent": "l1", "child": "l4", "kind": "revolute", "axis": [0, 1, 0]},
    ]
    return {"links": links, "joints": joints}


class TestParseNative:
    def test_two_link(self):
        tree = parse_native(TWO_LINK)
        assert tree.K == 2
        assert leaf_to_root(tree) == (1, 0)
        assert tree.links[0].name == "base"
        assert tree.links[1].parent == 0
        assert tree.n_actuated == 1

    def test_self_parent_cycle(self):
        doc = {
            "links": [{"name": "a", "mass": 1.0, "com": [0, 0, 0], "inertia": [1, 1, 1, 0, 0, 0]}],
            "joints": [{"name": "j", "parent": "a", "child": "a", "kind": "revolute", "axis": [0, 0, 1]}],
        }
        with pytest.raises(CycleError):
            parse_native(doc)

    def test_two_link_cycle(self):
        doc = {
            "links": [
                {"name": "a", "mass": 1.0, "com": [0, 0, 0], "inertia": [1, 1, 1, 0, 0, 0]},
                {"name": "b", "mass": 1.0, "com": [0, 0, 0], "inertia": [1, 1, 1, 0, 0, 0]},
            ],
            "joints": [
                {"name": "j1", "parent": "a", "child": "b", "kind": "revolute", "axis": [0, 0, 1]},
                {"name": "j2", "parent": "b", "child": "a", "kind": "revolute", "axis": [0, 0, 1]},
            ],
        }
        with pytest.raises(CycleError):
            parse_native(doc)

    def test_multi_root(self):
        doc = {
            "links": [
                {"name": "a", "mass": 1.0, "com": [0, 0, 0], "inertia": [1, 1, 1, 0, 0, 0]},
                {"name": "b", "mass": 1.0, "com": [0, 0, 0], "inertia": [1, 1, 1, 0, 0, 0]},
            ],
            "joints": [],
        }
        with pytest.raises(MultiRootError):
            parse_native(doc)

    def test_negative_mass(self):
        doc = json.loads(json.dumps(TWO_LINK))
        doc["links"][1]["mass"] = -2.0
        with pytest.raises(MissingInertiaError):
            parse_native(doc)

    def test_binary_tree_order(self):
        tree = parse_native(binary_tree_doc())
        order = leaf_to_root(tree)
        pos = {idx: n for n, idx in enumerate(order)}
        for l in tree.links:
            if l.parent is not None:
                assert pos[l.index] < pos[l.parent]

    def test_root_moved_first(self):
        doc = json.loads(json.dumps(TWO_LINK))
        doc["links"].reverse()  # root listed second
        tree = parse_native(doc)
        assert tree.links[0].name == "base"


class TestTraversalOrders:
    def test_chain(self):
        doc = {
            "links": [{"name": f"l{i}", "mass": 1.0, "com": [0, 0, 0],
                       "inertia": [0.1, 0.1, 0.1, 0, 0, 0]} for i in range(3)],
            "joints": [
                {"name": "j1", "parent": "l0", "child": "l1", "kind": "revolute", "axis": [0, 1, 0]},
                {"name": "j2", "parent": "l1", "child": "l2", "kind": "revolute", "axis": [0, 1, 0]},
            ],
        }
        tree = parse_native(doc)
        assert leaf_to_root(tree) == (2, 1, 0)
        assert root_to_leaf(tree) == (0, 1, 2)

    def test_single_link(self):
        doc = {"links": [{"name": "only", "mass": 1.0, "com": [0, 0, 0],
                          "inertia": [1, 1, 1, 0, 0, 0]}], "joints": []}
        tree = parse_native(doc)
        assert leaf_to_root(tree) == (0,)

    def test_random_trees_child_precedes_parent(self):
        rng = np.random.default_rng(42)
        for _ in range(30):
            tree = random_tree(rng, max_links=10)
            order = leaf_to_root(tree)
            pos = {idx: n for n, idx in enumerate(order)}
            for l in tree.links:
                if l.parent is not None:
                    assert pos[l.index] < pos[l.parent]
            down = root_to_leaf(tree)
            posd = {idx: n for n, idx in enumerate(down)}
            for l in tree.links:
                if l.parent is not None:
                    assert posd[l.parent] < posd[l.index]


def test_round_trip_serialize_parse():
    rng = np.random.default_rng(1)
    for _ in range(10):
        tree = random_tree(rng, max_links=7, with_fixed=True)
        doc = serialize_native(tree)
        tree2 = parse_native(doc)
        assert structurally_equal(tree, tree2, tol=1e-12)
        # Hash is a pure function of the parsed document.
        assert tree_hash(tree2) == tree_hash(parse_native(doc))
        assert tree_hash(tree2) != tree_hash(random_tree(rng, max_links=7))


def test_schema_validates_shipped_presets():
    from importlib import resources
    base = resources.files("abdnet.presets").joinpath("trees")
    count = 0
    for f in base.iterdir():
        if f.name.endswith(".json"):
            validate_native_schema(json.loads(f.read_text()))
            count += 1
    assert count >= 5


def test_relabeling_equivariance_dynamics():
    # Permuting non-root document order relabels indices but leaves physics
    # untouched: accelerations match under the joint permutation.
    doc = binary_tree_doc()
    for i, j in enumerate(doc["joints"]):
        j["origin"] = {"xyz": [0.1 * (i + 1), 0.0, -0.2], "rpy": [0, 0, 0]}
    tree_a = parse_native(doc)

    perm_doc = {"links": [doc["links"][0]] + [doc["links"][i] for i in (3, 1, 4, 2)],
                "joints": [doc["joints"][i] for i in (2, 0, 3, 1)]}
    tree_b = parse_native(perm_doc)

    rng = np.random.default_rng(3)
    q = rng.uniform(-1, 1, 4)
    qd = rng.normal(size=4)
    tau = rng.normal(size=4)

    name_a = [tree_a.joints[i].name for i in tree_a.dof_joint_indices()]
    name_b = [tree_b.joints[i].name for i in tree_b.dof_joint_indices()]
    to_b = [name_b.index(n) for n in name_a]

    qdd_a = aba_forward_dynamics(tree_a, JointState(q, qd), tau)
    qb, qdb, taub = np.empty(4), np.empty(4), np.empty(4)
    for k, kb in enumerate(to_b):
        qb[kb], qdb[kb], taub[kb] = q[k], qd[k], tau[k]
    qdd_b = aba_forward_dynamics(tree_b, JointState(qb, qdb), taub)
    np.testing.assert_allclose(qdd_a, [qdd_b[kb] for kb in to_b], atol=1e-12)


def test_actuated_slot_count_matches_decoder_contract():
    rng = np.random.default_rng(5)
    for _ in range(20):
        tree = random_tree(rng, max_links=8, with_fixed=True)
        n_act = len(tree.actuated_joint_indices())
        assert n_act == sum(
            1 for i in range(1, tree.K)
            if tree.joints[i].dof >= 1 and tree.joints[i].actuated
        )
        assert tree.n_actuated == n_act


URDF_DOUBLE_PENDULUM = """
<robot name="dp">
  <link name="base">
    <inertial>
      <mass value="10.0"/>
      <origin xyz="0 0 0" rpy="0 0 0"/>
      <inertia ixx="0.1" iyy="0.1" izz="0.1" ixy="0" ixz="0" iyz="0"/>
    </inertial>
  </link>
  <link name="rod1">
    <inertial>
      <mass value="1.0"/>
      <origin xyz="0 0 -0.5" rpy="0 0 0"/>
      <inertia ixx="0.0833333333333333" iyy="0.0833333333333333" izz="0.0005" ixy="0" ixz="0" iyz="0"/>
    </inertial>
  </link>
  <link name="rod2">
    <inertial>
      <mass value="1.0"/>
      <origin xyz="0 0 -0.5" rpy="0 0 0"/>
      <inertia ixx="0.0833333333333333" iyy="0.0833333333333333" izz="0.0005" ixy="0" ixz="0" iyz="0"/>
    </inertial>
  </link>
  <joint name="shoulder" type="revolute">
    <parent link="base"/>
    <child link="rod1"/>
    <origin xyz="0 0 0" rpy="0 0 0"/>
    <axis xyz="0 1 0"/>
    <limit lower="-3.2" upper="3.2" effort="100"/>
  </joint>
  <joint name="elbow" type="revolute">
    <parent link="rod1"/>
    <child link="rod2"/>
    <origin xyz="0 0 -1.0" rpy="0 0 0"/>
    <axis xyz="0 1 0"/>
    <limit lower="-3.2" upper="3.2" effort="100"/>
  </joint>
</robot>
"""


class TestUrdf:
    def test_continuous_joint_rejected(self):
        bad = URDF_DOUBLE_PENDULUM.replace('type="revolute"', 'type="continuous"', 1)
        with pytest.raises(UnsupportedJointError) as e:
            parse_urdf_subset(bad)
        assert "shoulder" in str(e.value)

    def test_double_pendulum_matches_native(self):
        urdf_tree = parse_urdf_subset(URDF_DOUBLE_PENDULUM)
        # URDF gives com-frame inertia; convert: about-origin xx/yy pick up
        # m*0.25 from the parallel-axis shift of the com at -0.5.
        native = {
            "links": [
                {"name": "base", "mass": 10.0, "com": [0, 0, 0], "inertia": [0.1, 0.1, 0.1, 0, 0, 0]},
                {"name": "rod1", "mass": 1.0, "com": [0, 0, -0.5],
                 "inertia": [0.3333333333333333, 0.3333333333333333, 0.0005, 0, 0, 0]},
                {"name": "rod2", "mass": 1.0, "com": [0, 0, -0.5],
                 "inertia": [0.3333333333333333, 0.3333333333333333, 0.0005, 0, 0, 0]},
            ],
            "joints": [
                {"name": "shoulder", "parent": "base", "child": "rod1", "kind": "revolute",
                 "axis": [0, 1, 0], "origin": {"xyz": [0, 0, 0], "rpy": [0, 0, 0]},
                 "limits": {"lower": -3.2, "upper": 3.2}, "actuated": True},
                {"name": "elbow", "parent": "rod1", "child": "rod2", "kind": "revolute",
                 "axis": [0, 1, 0], "origin": {"xyz": [0, 0, -1.0], "rpy": [0, 0, 0]},
                 "limits": {"lower": -3.2, "upper": 3.2}, "actuated": True},
            ],
        }
        native_tree = parse_native(native)
        assert structurally_equal(urdf_tree, native_tree, tol=1e-12)

    def test_sensor_link_merged(self):
        with_cam = URDF_DOUBLE_PENDULUM.replace(
            "</robot>",
            """
  <link name="camera">
    <inertial>
      <mass value="1e-6"/>
      <origin xyz="0 0 0" rpy="0 0 0"/>
      <inertia ixx="1e-9" iyy="1e-9" izz="1e-9" ixy="0" ixz="0" iyz="0"/>
    </inertial>
  </link>
  <joint name="cam_mount" type="fixed">
    <parent link="rod2"/>
    <child link="camera"/>
    <origin xyz="0.05 0 -0.3" rpy="0 0 0"/>
  </joint>
</robot>""",
        )
        tree = parse_urdf_subset(with_cam)
        assert tree.K == 3
        assert all(l.name != "camera" for l in tree.links)
        plain = parse_urdf_subset(URDF_DOUBLE_PENDULUM)
        rod2_with = tree.link_by_name("rod2").inertia
        rod2_plain = plain.link_by_name("rod2").inertia
        assert abs(rod2_with.mass - rod2_plain.mass) < 1e-6
        # Oracle: the merged inertia equals the dense spatial-inertia sum.
        from abdnet.spatial import transform_inertia, SpatialTransform, rpy_matrix, SpatialInertia
        cam = SpatialInertia.from_com_inertia(1e-6, [0, 0, 0], 1e-9 * np.eye(3))
        X = SpatialTransform.from_pose(rpy_matrix(0, 0, 0), [0.05, 0, -0.3])
        expected = rod2_plain.matrix() + transform_inertia(X, cam).matrix()
        np.testing.assert_allclose(rod2_with.matrix(), expected, atol=1e-12)

    def test_heavy_fixed_link_kept(self):
        with_tool = URDF_DOUBLE_PENDULUM.replace(
            "</robot>",
            """
  <link name="tool">
    <inertial>
      <mass value="0.5"/>
      <origin xyz="0 0 0" rpy="0 0 0"/>
      <inertia ixx="0.01" iyy="0.01" izz="0.01" ixy="0" ixz="0" iyz="0"/>
    </inertial>
  </link>
  <joint name="tool_mount" type="fixed">
    <parent link="rod2"/>
    <child link="tool"/>
    <origin xyz="0 0 -1.0" rpy="0 0 0"/>
  </joint>
</robot>""",
        )
        tree = parse_urdf_subset(with_tool)
        assert tree.K == 4
        tool_idx = tree.link_by_name("tool").index
        assert tree.joints[tool_idx].dof == 0

    def test_missing_inertial_on_kept_link(self):
        no_inertial = URDF_DOUBLE_PENDULUM.replace(
            """<link name="rod2">
    <inertial>
      <mass value="1.0"/>
      <origin xyz="0 0 -0.5" rpy="0 0 0"/>
      <inertia ixx="0.0833333333333333" iyy="0.0833333333333333" izz="0.0005" ixy="0" ixz="0" iyz="0"/>
    </inertial>
  </link>""",
            '<link name="rod2"></link>',
        )
        with pytest.raises(MissingInertiaError):
            parse_urdf_subset(no_inertial)

    def test_load_tree_dispatches(self, tmp_path):
        p = tmp_path / "robot.urdf"
        p.write_text(URDF_DOUBLE_PENDULUM)
        tree = load_tree(str(p))
        assert tree.K == 3
        q = tmp_path / "robot.json"
        q.write_text(json.dumps(TWO_LINK))
        assert load_tree(str(q)).K == 2
