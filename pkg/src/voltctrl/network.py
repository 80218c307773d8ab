"""Radial feeder topology and the voltage sensitivity matrices.

The feeder is a tree rooted at the substation (bus 0). Buses 1..n carry
loads and, optionally, reactive power devices. Working in per-unit, with
``v`` denoting squared voltage magnitude throughout, the linearized model
maps injections to voltages through two dense symmetric matrices ``R`` and
``X`` built from path intersections, and the controller consumes the sparse
inverse ``Y = X^-1`` whose off-diagonal support coincides with the physical
adjacency of buses 1..n.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import yaml

NETWORK_SCHEMA_VERSION = 1


class TopologyError(ValueError):
    """The line list does not describe a tree rooted at the substation."""


class ConditioningError(RuntimeError):
    """A sensitivity matrix is too ill-conditioned to invert reliably."""


@dataclass(frozen=True)
class Line:
    """One distribution line with per-unit impedance.

    Orientation is away from the substation; the constructor of
    ``RadialNetwork`` reorients raw input edges as needed.
    """

    from_bus: int
    to_bus: int
    r: float
    x: float


class RadialNetwork:
    """Rooted-tree feeder. Immutable after construction.

    Lines may be supplied in any order and either orientation. Construction
    validates the tree property, reorients edges away from bus 0 and fixes a
    root-first canonical order; every per-line array in this package follows
    that order (``lines[k]`` is the line feeding bus ``topo[k]``).

    Parameters
    ----------
    n : bus count excluding the substation
    lines : iterable of ``Line`` (or ``(from, to, r, x)`` tuples)
    v0 : squared substation voltage, p.u.^2 (fixed boundary condition)
    """

    def __init__(self, n, lines, v0=1.0):
        n = int(n)
        if n < 1:
            raise TopologyError(f"need at least one non-substation bus, got n={n}")
        if not v0 > 0:
            raise TopologyError(f"squared substation voltage must be positive, got {v0}")
        raw = [ln if isinstance(ln, Line) else Line(*ln) for ln in lines]
        if len(raw) != n:
            raise TopologyError(
                f"a radial network with {n} buses needs exactly {n} lines, got {len(raw)}"
            )
        for ln in raw:
            for b in (ln.from_bus, ln.to_bus):
                if not (0 <= b <= n):
                    raise TopologyError(f"line ({ln.from_bus},{ln.to_bus}) references unknown bus {b}")
            if ln.from_bus == ln.to_bus:
                raise TopologyError(f"line ({ln.from_bus},{ln.to_bus}) is a self-loop")
            if not ln.x > 0:
                raise TopologyError(f"line ({ln.from_bus},{ln.to_bus}) needs x > 0, got x={ln.x}")
            if ln.r < 0:
                raise TopologyError(f"line ({ln.from_bus},{ln.to_bus}) needs r >= 0, got r={ln.r}")

        # BFS from the substation over the undirected edge set. Every line
        # must be consumed as a tree edge; a line whose endpoints are both
        # already reached closes a cycle.
        incident: list[list[int]] = [[] for _ in range(n + 1)]
        for k, ln in enumerate(raw):
            incident[ln.from_bus].append(k)
            incident[ln.to_bus].append(k)
        parent = np.full(n + 1, -1, dtype=int)
        r_in = np.zeros(n + 1)
        x_in = np.zeros(n + 1)
        seen = np.zeros(n + 1, dtype=bool)
        seen[0] = True
        used = [False] * n
        order: list[int] = []
        queue = [0]
        while queue:
            u = queue.pop(0)
            for k in incident[u]:
                if used[k]:
                    continue
                ln = raw[k]
                w = ln.to_bus if ln.from_bus == u else ln.from_bus
                if seen[w]:
                    raise TopologyError(
                        f"line ({ln.from_bus},{ln.to_bus}) creates a cycle"
                    )
                used[k] = True
                seen[w] = True
                parent[w] = u
                r_in[w] = ln.r
                x_in[w] = ln.x
                order.append(w)
                queue.append(w)
        if not seen.all():
            missing = int(np.flatnonzero(~seen)[0])
            raise TopologyError(f"bus {missing} is not reachable from the substation")

        self.n = n
        self.v0 = float(v0)
        self.parent = parent
        self.topo = np.array(order, dtype=int)  # root-first
        self.r_in = r_in  # impedance of the line feeding bus i (index 0 unused)
        self.x_in = x_in
        self.children: list[list[int]] = [[] for _ in range(n + 1)]
        for b in self.topo:
            self.children[parent[b]].append(int(b))
        self.lines = tuple(
            Line(int(parent[b]), int(b), float(r_in[b]), float(x_in[b])) for b in self.topo
        )
        self.depth = np.zeros(n + 1, dtype=int)
        for b in self.topo:
            self.depth[b] = self.depth[parent[b]] + 1

    def line_of(self, bus):
        """The line feeding ``bus`` from its root side."""
        b = int(bus)
        if not (1 <= b <= self.n):
            raise ValueError(f"bus {bus} carries no feeding line")
        return Line(int(self.parent[b]), b, float(self.r_in[b]), float(self.x_in[b]))


def build_paths(net):
    """Map each bus to the set of lines on its unique path from the substation.

    ``paths[0]`` is empty; for every other bus the path contains the line
    feeding that bus.
    """
    paths = {0: frozenset()}
    for b in net.topo:
        paths[int(b)] = paths[int(net.parent[b])] | {net.line_of(b)}
    return paths


def _path_incidence(net):
    # B[i-1, k] = 1 when canonical line k lies on the path from bus 0 to bus i
    n = net.n
    col = {int(b): k for k, b in enumerate(net.topo)}
    B = np.zeros((n, n))
    for b in net.topo:
        b = int(b)
        p = int(net.parent[b])
        if p != 0:
            B[b - 1] = B[p - 1]
        B[b - 1, col[b]] += 1.0
    return B


def build_rx(net):
    """Dense sensitivity matrices ``(R, X)``.

    Entry (i, j) is twice the summed resistance (reactance) over the lines
    shared by the substation-to-i and substation-to-j paths. Both matrices
    are symmetric and, with positive reactances, X is positive definite.
    """
    B = _path_incidence(net)
    x = np.array([ln.x for ln in net.lines])
    r = np.array([ln.r for ln in net.lines])
    X = 2.0 * (B * x) @ B.T
    R = 2.0 * (B * r) @ B.T
    return R, X


def adjacency_matrix(net):
    """Boolean physical adjacency among buses 1..n (substation excluded)."""
    A = np.zeros((net.n, net.n), dtype=bool)
    for ln in net.lines:
        if ln.from_bus >= 1:
            A[ln.from_bus - 1, ln.to_bus - 1] = True
            A[ln.to_bus - 1, ln.from_bus - 1] = True
    return A


def build_y(net, X=None):
    """Sparse inverse of the reactance sensitivity matrix.

    Computed by dense inversion and then sparsified against the known
    support (diagonal plus physical adjacency). Off-support entries of the
    exact inverse are zero, so anything found there is inversion noise; it
    must stay far below the on-support scale or the matrix is declared
    ill-conditioned.
    """
    if X is None:
        _, X = build_rx(net)
    try:
        Yd = np.linalg.inv(X)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"reactance sensitivity matrix is singular: {exc}") from exc
    resid = np.linalg.norm(Yd @ X - np.eye(net.n))
    scale = np.abs(Yd).max()
    if resid > 1e-8 * max(1.0, scale):
        raise ConditioningError(
            f"inverse of the reactance sensitivity matrix is unreliable (||YX - I||_F = {resid:.3e})"
        )
    mask = adjacency_matrix(net) | np.eye(net.n, dtype=bool)
    off = Yd[~mask]
    noise = np.abs(off).max() if off.size else 0.0
    if noise > 1e-9 * max(1.0, scale):
        raise ConditioningError(
            f"off-adjacency leakage {noise:.3e} exceeds the conditioning budget"
        )
    return sp.csr_matrix(np.where(mask, Yd, 0.0))


def closed_form_y(net):
    """Adjacency-form inverse: graph Laplacian of the inverse reactances.

    Diagonal entries sum 1/x over all incident lines (including the line
    toward the substation); entries for physically adjacent bus pairs are
    -1/x of the joining line; all else zero. Numerically this equals
    ``2 * inv(X)`` under this package's factor-two path-sum convention for
    X, so it serves as an independent validation oracle for ``build_y``
    (compare against half of it), not as the controller's matrix.
    """
    n = net.n
    C = np.zeros((n, n))
    for ln in net.lines:
        w = 1.0 / ln.x
        if ln.from_bus >= 1:
            C[ln.from_bus - 1, ln.to_bus - 1] -= w
            C[ln.to_bus - 1, ln.from_bus - 1] -= w
            C[ln.from_bus - 1, ln.from_bus - 1] += w
        C[ln.to_bus - 1, ln.to_bus - 1] += w
    return C


@dataclass(frozen=True)
class SensitivityMatrices:
    """Dense R, X and sparse Y = inv(X) for one feeder."""

    R: np.ndarray
    X: np.ndarray
    Y: sp.csr_matrix

    @property
    def n(self):
        return self.X.shape[0]

    def y_dense(self):
        return self.Y.toarray()


def sensitivity_matrices(net):
    R, X = build_rx(net)
    return SensitivityMatrices(R=R, X=X, Y=build_y(net, X))


def tree_path_vertices(net, i, j):
    """Buses strictly between i and j on the unique tree path."""
    ai, aj = int(i), int(j)
    anc_i = []
    b = ai
    while b != 0:
        anc_i.append(b)
        b = int(net.parent[b])
    anc_i.append(0)
    pos = {b: k for k, b in enumerate(anc_i)}
    b = aj
    path_j = []
    while b not in pos:
        path_j.append(b)
        b = int(net.parent[b])
    lca = b
    inner = anc_i[1 : pos[lca]] if pos[lca] >= 1 else []
    return inner + ([lca] if lca not in (ai, aj) else []) + path_j[1:][::-1]


def comm_graph(net, buses):
    """Adjacency of the induced communication graph over controllable buses.

    Two controllable buses are connected exactly when the tree path between
    them passes through no other controllable bus and not through the
    substation. The substation blocks because the reactance sensitivity
    matrix is block diagonal across root subtrees, so its principal
    submatrices never couple buses separated by bus 0; this is also what
    makes the full-set communication graph equal the physical adjacency
    among buses 1..n.
    """
    C = sorted(int(b) for b in buses)
    if not C:
        raise ValueError("controllable set must be nonempty")
    for b in C:
        if not (1 <= b <= net.n):
            raise ValueError(f"controllable bus {b} is not a device bus of this network")
    if len(set(C)) != len(C):
        raise ValueError("controllable set has repeated buses")
    blocking = set(C) | {0}
    m = len(C)
    A = np.zeros((m, m), dtype=bool)
    for a in range(m):
        for b in range(a + 1, m):
            between = tree_path_vertices(net, C[a], C[b])
            if not any(v in blocking for v in between):
                A[a, b] = A[b, a] = True
    return A


@dataclass(frozen=True)
class ControllableSet:
    """Principal-submatrix reduction for a partially controllable feeder."""

    buses: tuple
    X_C: np.ndarray
    Y_C: np.ndarray
    comm: np.ndarray  # boolean adjacency of the induced communication graph

    @property
    def m(self):
        return len(self.buses)

    def restrict(self, vec):
        """Pick the controllable-bus entries out of a length-n bus vector."""
        idx = np.array(self.buses, dtype=int) - 1
        return np.asarray(vec)[idx]


def reduce_controllable(net, mats, buses):
    """Build ``ControllableSet`` for a subset of device buses.

    The principal submatrix X_C of X stays positive definite, and its
    inverse is supported exactly on the induced communication graph; the
    inverse is computed densely and its off-graph entries (pure inversion
    noise) are zeroed after a conditioning check.
    """
    C = sorted(int(b) for b in buses)
    comm = comm_graph(net, C)
    idx = np.array(C, dtype=int) - 1
    X_C = mats.X[np.ix_(idx, idx)]
    try:
        Y_C = np.linalg.inv(X_C)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"controllable-set reduction is singular: {exc}") from exc
    mask = comm | np.eye(len(C), dtype=bool)
    scale = np.abs(Y_C).max()
    off = Y_C[~mask]
    if off.size and np.abs(off).max() > 1e-9 * max(1.0, scale):
        raise ConditioningError(
            f"controllable-set inverse leaks {np.abs(off).max():.3e} outside the communication graph"
        )
    return ControllableSet(buses=tuple(C), X_C=X_C, Y_C=np.where(mask, Y_C, 0.0), comm=comm)


def network_from_dict(data):
    """Build a ``RadialNetwork`` from the network-file mapping.

    Expected keys: ``buses`` (n), ``v0``, ``lines`` (list of mappings with
    ``from``, ``to``, ``r``, ``x``). ``schema_version`` is optional and, when
    present, must match the supported version.
    """
    if not isinstance(data, dict):
        raise TopologyError("network description must be a mapping")
    version = data.get("schema_version", NETWORK_SCHEMA_VERSION)
    if version != NETWORK_SCHEMA_VERSION:
        raise TopologyError(
            f"unsupported network schema_version {version}, expected {NETWORK_SCHEMA_VERSION}"
        )
    missing = [k for k in ("buses", "lines") if k not in data]
    if missing:
        raise TopologyError(f"network description is missing keys: {missing}")
    lines = []
    for k, entry in enumerate(data["lines"]):
        try:
            lines.append(Line(int(entry["from"]), int(entry["to"]), float(entry["r"]), float(entry["x"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise TopologyError(f"lines[{k}] is malformed ({entry!r}): {exc}") from exc
    return RadialNetwork(int(data["buses"]), lines, float(data.get("v0", 1.0)))


def network_to_dict(net):
    return {
        "schema_version": NETWORK_SCHEMA_VERSION,
        "buses": net.n,
        "v0": net.v0,
        "lines": [
            {"from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x} for ln in net.lines
        ],
    }


def load_network(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise TopologyError(f"cannot parse network file {path}: {exc}") from exc
    return network_from_dict(data)


def save_network(net, path):
    with open(path, "w") as fh:
        yaml.safe_dump(network_to_dict(net), fh, sort_keys=False)
