"""Shared test utilities: random morphology documents and states."""
import numpy as np

from abdnet.dynamics import JointState
from abdnet.morphology import KinematicTree, parse_native


def random_tree_doc(rng, max_links=8, kinds=("revolute", "prismatic"), with_fixed=False):
    """Random morphology document with a valid tree structure."""
    k = int(rng.integers(2, max_links + 1))
    links = [{
        "name": "link0",
        "mass": float(rng.uniform(0.5, 4.0)),
        "com": [float(v) for v in rng.normal(size=3) * 0.1],
        "inertia": _random_inertia_six(rng),
    }]
    joints = []
    for i in range(1, k):
        links.append({
            "name": f"link{i}",
            "mass": float(rng.uniform(0.2, 3.0)),
            "com": [float(v) for v in rng.normal(size=3) * 0.15],
            "inertia": _random_inertia_six(rng),
        })
        parent = int(rng.integers(0, i))
        pool = list(kinds) + (["fixed"] if with_fixed and i > 1 else [])
        kind = pool[int(rng.integers(0, len(pool)))]
        axis = rng.normal(size=3)
        axis = axis / np.linalg.norm(axis)
        joints.append({
            "name": f"j{i}",
            "parent": f"link{parent}",
            "child": f"link{i}",
            "kind": kind,
            "axis": [float(v) for v in axis],
            "origin": {
                "xyz": [float(v) for v in rng.normal(size=3) * 0.4],
                "rpy": [float(v) for v in rng.uniform(-1.0, 1.0, size=3)],
            },
            "actuated": kind != "fixed",
        })
    return {"links": links, "joints": joints}


def _random_inertia_six(rng):
    # Physically valid: random SPD inertia about the com, then shifted to the
    # origin by the parallel-axis term implied by the document's com field.
    a = rng.normal(size=(3, 3)) * 0.3
    i_com = a @ a.T + 0.02 * np.eye(3)
    return i_com  # returned as matrix; caller converts


def random_tree(rng, max_links=8, kinds=("revolute", "prismatic"), with_fixed=False) -> KinematicTree:
    doc = random_tree_doc(rng, max_links, kinds, with_fixed)
    # Convert the com-frame inertia matrices into origin-frame six-vectors.
    for link in doc["links"]:
        i_com = link["inertia"]
        com = np.array(link["com"])
        cx = np.array([
            [0, -com[2], com[1]],
            [com[2], 0, -com[0]],
            [-com[1], com[0], 0],
        ])
        i_o = i_com + link["mass"] * cx @ cx.T
        link["inertia"] = [float(i_o[0, 0]), float(i_o[1, 1]), float(i_o[2, 2]),
                           float(i_o[0, 1]), float(i_o[0, 2]), float(i_o[1, 2])]
    return parse_native(doc)


def random_state(rng, tree: KinematicTree) -> JointState:
    n = tree.n_dof
    return JointState(rng.uniform(-np.pi, np.pi, size=n), rng.normal(size=n))
