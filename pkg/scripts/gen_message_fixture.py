"""Hand-unrolled 3-link chain forward pass, frozen as a test fixture.

Chain: link0 (root) <- link1 <- link2. Single batch row, width 4.
Unrolls the node update and child-contribution rules explicitly, link by
link, with no tree or tape machinery involved:

    v2  = softplus(z2 + B2)                     (leaf, no incoming message)
    va2 = v2 - v2 * ((v2 @ W2) @ W2.T)
    v1  = softplus(z1 + B1) + va2
    va1 = v1 - v1 * ((v1 @ W1) @ W1.T)
    v0  = softplus(z0 + B0) + va1

All arithmetic in float32 with matmuls grouped exactly as above; repr() of
float32 round-trips, so the printed literals are bit-exact.
"""
import numpy as np

F = np.float32
D = 4


def sp(x):
    return np.logaddexp(F(0.0), x)


def row(vals):
    return np.array([vals], dtype=F)


z0 = row([0.5, -1.0, 2.0, 0.25])
z1 = row([1.5, 0.5, -0.75, 1.0])
z2 = row([-0.5, 1.25, 0.0, -2.0])
B0 = np.array([0.1, 0.2, -0.3, 0.0], dtype=F)
B1 = np.array([-0.2, 0.4, 0.6, -0.1], dtype=F)
B2 = np.array([0.3, -0.6, 0.05, 0.2], dtype=F)

W1 = np.array([
    [0.5, -0.25, 0.75, 0.125],
    [1.0, 0.5, -0.5, 0.25],
    [-0.75, 0.25, 1.0, -0.125],
    [0.25, -1.0, 0.5, 0.75],
], dtype=F)
W2 = np.array([
    [0.2, 0.4, -0.6, 0.8],
    [-0.4, 0.2, 0.8, 0.6],
    [0.6, -0.8, 0.2, 0.4],
    [0.8, 0.6, 0.4, -0.2],
], dtype=F)

v2 = sp(z2 + B2)
va2 = v2 - v2 * ((v2 @ W2) @ W2.T)
v1 = sp(z1 + B1) + va2
va1 = v1 - v1 * ((v1 @ W1) @ W1.T)
v0 = sp(z0 + B0) + va1


def lit(name, arr):
    vals = ", ".join(repr(float(v)) for v in np.asarray(arr).reshape(-1))
    print(f'    "{name}": [{vals}],')


print("FIXTURE = {")
for name, arr in [("z0", z0), ("z1", z1), ("z2", z2), ("B0", B0), ("B1", B1),
                  ("B2", B2), ("W1", W1), ("W2", W2), ("v0", v0), ("v1", v1),
                  ("v2", v2), ("va1", va1), ("va2", va2)]:
    lit(name, arr)
print("}")
