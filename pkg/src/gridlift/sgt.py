"""Semantic grid transformation: mapping skeleton joints onto an H x P grid.

An assignment matrix ``S`` has one row per grid cell (row-major) and one
column per joint; each row is one-hot. ``sgt_forward`` scatters joint
features onto the grid, ``sgt_inverse`` averages the replicas of every joint
back into a pose. ``AutoGridsState`` holds the continuous scores that make
the assignment learnable.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

_RESOURCES = "gridlift.resources"
SKELETON_RESOURCE = "h36m17_skeleton.csv"
LAYOUT_RESOURCE = "h36m17_grid5x5.csv"


class LayoutError(ValueError):
    """Raised for malformed layout or skeleton files and unsupported layouts."""


class CoverageError(ValueError):
    """Raised when an inverse transform meets a joint with no grid cell."""

    def __init__(self, message, counts):
        super().__init__(message)
        self.counts = counts


# ---------------------------------------------------------------------------
# Topology and grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SkeletonTopology:
    joint_names: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    root_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "edges", tuple((int(a), int(b)) for a, b in self.edges))
        j = len(self.joint_names)
        if j == 0:
            raise LayoutError("skeleton needs at least one joint")
        if len(set(self.joint_names)) != j:
            raise LayoutError("joint names must be unique")
        if not 0 <= self.root_index < j:
            raise LayoutError(f"root index {self.root_index} out of range")
        for a, b in self.edges:
            if not (0 <= a < j and 0 <= b < j):
                raise LayoutError(f"edge ({a}, {b}) has an endpoint outside [0, {j})")
            if a == b:
                raise LayoutError(f"self-loop on joint {a}")
        if not self._connected():
            raise LayoutError("skeleton graph is not connected")

    def _connected(self) -> bool:
        adj = {i: set() for i in range(self.num_joints)}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        seen, stack = {0}, [0]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == self.num_joints

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    def index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise LayoutError(f"unknown joint name {name!r}") from None

    def parents(self) -> list[int]:
        """Parent of every joint in the tree rooted at ``root_index`` (root maps to -1)."""
        adj = {i: [] for i in range(self.num_joints)}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        parent = [-2] * self.num_joints
        parent[self.root_index] = -1
        order = [self.root_index]
        for node in order:
            for nb in sorted(adj[node]):
                if parent[nb] == -2:
                    parent[nb] = node
                    order.append(nb)
        return parent


def load_skeleton(path=None) -> SkeletonTopology:
    """Read a skeleton edge list.

    Format: ``# root=<name>`` and optional ``# joints=a;b;...`` comment lines,
    a ``joint_a,joint_b`` header, then one edge per line. Without a joints
    line the joint order is the order of first appearance.
    """
    text = _read_text(path, SKELETON_RESOURCE)
    root = None
    joints: list[str] | None = None
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("root="):
                root = body[5:].strip()
            elif body.startswith("joints="):
                joints = [s.strip() for s in body[7:].split(";") if s.strip()]
            continue
        parts = [s.strip() for s in line.split(",")]
        if parts == ["joint_a", "joint_b"]:
            continue
        if len(parts) != 2:
            raise LayoutError(f"skeleton line {lineno}: expected 'joint_a,joint_b', got {line!r}")
        rows.append((lineno, parts[0], parts[1]))
    if joints is None:
        joints = []
        for _, a, b in rows:
            for name in (a, b):
                if name not in joints:
                    joints.append(name)
    if root is None:
        raise LayoutError("skeleton file lacks a '# root=<name>' header")
    lookup = {n: i for i, n in enumerate(joints)}
    edges = []
    for lineno, a, b in rows:
        if a not in lookup or b not in lookup:
            raise LayoutError(f"skeleton line {lineno}: unknown joint in edge ({a}, {b})")
        edges.append((lookup[a], lookup[b]))
    if root not in lookup:
        raise LayoutError(f"root joint {root!r} is not in the skeleton")
    return SkeletonTopology(tuple(joints), tuple(edges), lookup[root])


def save_skeleton(topology: SkeletonTopology, path):
    names = topology.joint_names
    lines = [
        f"# root={names[topology.root_index]}",
        "# joints=" + ";".join(names),
        "joint_a,joint_b",
    ]
    lines += [f"{names[a]},{names[b]}" for a, b in topology.edges]
    Path(path).write_text("\n".join(lines) + "\n")


def h36m_skeleton() -> SkeletonTopology:
    """The shipped 17-joint skeleton."""
    return load_skeleton(None)


@dataclass(frozen=True)
class GridSpec:
    h: int = 5
    p: int = 5

    def __post_init__(self):
        if self.h < 1 or self.p < 1:
            raise ValueError(f"grid dimensions must be positive, got {self.h}x{self.p}")

    @property
    def cells(self) -> int:
        return self.h * self.p

    def check_fits(self, num_joints: int):
        if self.cells < num_joints:
            raise ValueError(f"a {self.h}x{self.p} grid cannot hold {num_joints} joints")


# ---------------------------------------------------------------------------
# Assignment matrices
# ---------------------------------------------------------------------------


@dataclass
class AssignmentMatrix:
    S: np.ndarray
    grid: GridSpec
    anchor: tuple[int, int] | None = None

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=np.float64)
        if self.S.ndim != 2 or self.S.shape[0] != self.grid.cells:
            raise ValueError(f"S must have {self.grid.cells} rows, got shape {self.S.shape}")

    @property
    def num_joints(self) -> int:
        return self.S.shape[1]

    def counts(self) -> np.ndarray:
        """Number of cells assigned to each joint."""
        return self.S.sum(axis=0).astype(int)

    def coverage(self) -> int:
        return int(np.count_nonzero(self.counts()))

    def is_covering(self) -> bool:
        return self.coverage() == self.num_joints

    def joint_grid(self) -> np.ndarray:
        """H x P array of the joint index held by each cell (-1 for an empty row)."""
        idx = np.where(self.S.sum(axis=1) > 0, self.S.argmax(axis=1), -1)
        return idx.reshape(self.grid.h, self.grid.p)

    @classmethod
    def from_joint_grid(cls, cells, num_joints: int, anchor=None):
        cells = np.asarray(cells, dtype=int)
        grid = GridSpec(*cells.shape)
        S = np.zeros((grid.cells, num_joints))
        S[np.arange(grid.cells), cells.ravel()] = 1.0
        return cls(S, grid, anchor)


def _as_S(S) -> np.ndarray:
    return S.S if isinstance(S, AssignmentMatrix) else np.asarray(S, dtype=np.float64)


@dataclass
class ConstraintReport:
    eq2_ok: bool
    eq3_ok: bool
    coverage: int
    num_joints: int
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.eq2_ok and self.eq3_ok


def grid_neighbors(r: int, c: int, grid: GridSpec):
    """Up/down/left/right cells of (r, c), without wrapping."""
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        rr, cc = r + dr, c + dc
        if 0 <= rr < grid.h and 0 <= cc < grid.p:
            yield rr, cc


def validate_constraints(S: AssignmentMatrix, topology: SkeletonTopology) -> ConstraintReport:
    """Check one-hot rows and that every skeleton edge stays grid-adjacent."""
    mat = S.S
    grid = S.grid
    if mat.shape != (grid.cells, topology.num_joints):
        raise ValueError(f"S shape {mat.shape} does not match {grid.cells} cells x {topology.num_joints} joints")
    violations = []
    binary = np.isin(mat, (0.0, 1.0))
    row_sums = mat.sum(axis=1)
    for p in range(grid.cells):
        if not binary[p].all() or row_sums[p] != 1.0:
            r, c = divmod(p, grid.p)
            violations.append(f"one-hot: cell ({r},{c}) row sums to {row_sums[p]:g}, not one-hot")
    eq3_ok = not violations

    held = mat > 0.5
    names = topology.joint_names
    eq2_ok = True
    for i, j in topology.edges:
        found = False
        for p in np.flatnonzero(held[:, i]):
            r, c = divmod(int(p), grid.p)
            if any(held[rr * grid.p + cc, j] for rr, cc in grid_neighbors(r, c, grid)):
                found = True
                break
        if not found:
            eq2_ok = False
            violations.append(f"adjacency: edge ({names[i]}, {names[j]}) has no adjacent cell pair")
    coverage = int(np.count_nonzero(held.any(axis=0)))
    return ConstraintReport(eq2_ok, eq3_ok, coverage, topology.num_joints, violations)


def load_layout(path, topology: SkeletonTopology, grid: GridSpec | None = None) -> AssignmentMatrix:
    """Read a ``row,col,joint_name`` layout CSV (``#`` comments allowed)."""
    text = _read_text(path, LAYOUT_RESOURCE)
    anchor = None
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("anchor="):
                r, c = body[7:].split(",")
                anchor = (int(r), int(c))
            continue
        parts = [s.strip() for s in line.split(",")]
        if parts == ["row", "col", "joint_name"]:
            continue
        if len(parts) != 3:
            raise LayoutError(f"layout line {lineno}: expected 'row,col,joint_name', got {line!r}")
        try:
            r, c = int(parts[0]), int(parts[1])
        except ValueError:
            raise LayoutError(f"layout line {lineno}: non-integer cell index") from None
        entries.append((lineno, r, c, parts[2]))
    if not entries:
        raise LayoutError("layout file holds no cells")
    h = max(e[1] for e in entries) + 1
    p = max(e[2] for e in entries) + 1
    grid = grid or GridSpec(h, p)
    if grid.cells < topology.num_joints:
        raise LayoutError(f"a {grid.h}x{grid.p} layout has fewer cells than the {topology.num_joints} joints")
    if (h, p) != (grid.h, grid.p) or len(entries) != grid.cells:
        raise LayoutError(f"layout covers {len(entries)} cells of a {h}x{p} grid; expected {grid.h}x{grid.p}")
    cells = -np.ones((grid.h, grid.p), dtype=int)
    for lineno, r, c, name in entries:
        if r < 0 or c < 0:
            raise LayoutError(f"layout line {lineno}: negative cell index")
        if cells[r, c] >= 0:
            raise LayoutError(f"layout line {lineno}: cell ({r},{c}) listed twice")
        if name not in topology.joint_names:
            raise LayoutError(f"layout line {lineno}: unknown joint {name!r}")
        cells[r, c] = topology.index(name)
    return AssignmentMatrix.from_joint_grid(cells, topology.num_joints, anchor)


def layout_to_csv(S: AssignmentMatrix, topology: SkeletonTopology, comments=()) -> str:
    cells = S.joint_grid()
    lines = [f"# {c}" for c in comments]
    if S.anchor is not None:
        lines.append(f"# anchor={S.anchor[0]},{S.anchor[1]}")
    lines.append("row,col,joint_name")
    for r in range(S.grid.h):
        for c in range(S.grid.p):
            j = cells[r, c]
            if j < 0:
                raise LayoutError(f"cell ({r},{c}) holds no joint; layout files need one-hot rows")
            lines.append(f"{r},{c},{topology.joint_names[j]}")
    return "\n".join(lines) + "\n"


def save_layout(S: AssignmentMatrix, topology: SkeletonTopology, path, comments=()):
    Path(path).write_text(layout_to_csv(S, topology, comments))


def build_handcrafted_layout(topology: SkeletonTopology, grid: GridSpec = GridSpec()) -> AssignmentMatrix:
    """The shipped layout for the 17-joint skeleton on a 5x5 grid."""
    canonical = h36m_skeleton()
    if topology.joint_names != canonical.joint_names or (grid.h, grid.p) != (5, 5):
        raise LayoutError(
            "a handcrafted layout ships only for the 17-joint skeleton on a 5x5 grid; "
            "supply a layout file (row,col,joint_name) for other skeletons or grid sizes"
        )
    return load_layout(None, topology, grid)


def random_sgt(topology: SkeletonTopology, grid: GridSpec, rng: np.random.Generator) -> AssignmentMatrix:
    """Uniformly random one-hot layout in which every joint appears at least once."""
    j = topology.num_joints
    grid.check_fits(j)
    cells = rng.permutation(grid.cells)
    joint_of = np.empty(grid.cells, dtype=int)
    joint_of[cells[:j]] = rng.permutation(j)
    joint_of[cells[j:]] = rng.integers(0, j, size=grid.cells - j)
    return AssignmentMatrix.from_joint_grid(joint_of.reshape(grid.h, grid.p), j)


SHUFFLE_MODES = ("row", "column", "global")


def shuffle_layout(S: AssignmentMatrix, mode: str, rng: np.random.Generator, perm=None) -> AssignmentMatrix:
    """Permute grid rows, grid columns, or all cells of a layout.

    ``perm`` overrides the random permutation (its length must match the
    permuted axis).
    """
    if mode not in SHUFFLE_MODES:
        raise ValueError(f"shuffle mode must be one of {SHUFFLE_MODES}, got {mode!r}")
    h, p = S.grid.h, S.grid.p
    cube = S.S.reshape(h, p, -1)
    n = {"row": h, "column": p, "global": h * p}[mode]
    perm = rng.permutation(n) if perm is None else np.asarray(perm)
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError(f"perm must be a permutation of range({n})")
    if mode == "row":
        out = cube[perm]
    elif mode == "column":
        out = cube[:, perm]
    else:
        out = S.S[perm].reshape(h, p, -1)
    return AssignmentMatrix(out.reshape(h * p, -1).copy(), S.grid)


# ---------------------------------------------------------------------------
# Forward and inverse transforms
# ---------------------------------------------------------------------------


def sgt_forward(S, G: np.ndarray, grid: GridSpec | None = None) -> np.ndarray:
    """Scatter a (J, C) or (N, J, C) pose onto the grid: (H, P, C) or (N, H, P, C)."""
    mat = _as_S(S)
    grid = S.grid if isinstance(S, AssignmentMatrix) else grid
    G = np.asarray(G, dtype=np.float64)
    if G.ndim not in (2, 3) or G.shape[-2] != mat.shape[1]:
        raise ValueError(f"pose shape {G.shape} does not match {mat.shape[1]} joints")
    D = np.matmul(mat, G)
    if grid is None:
        return D
    return D.reshape(G.shape[:-2] + (grid.h, grid.p, G.shape[-1]))


def inverse_weights(S) -> np.ndarray:
    """Column-normalized transpose of ``S`` (J x HP)."""
    mat = _as_S(S)
    counts = mat.sum(axis=0)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise CoverageError(
            f"joints {missing} have no grid cell; per-joint cell counts: {counts.astype(int).tolist()}",
            counts.astype(int),
        )
    return (mat / counts).T


def sgt_inverse(S, D: np.ndarray, grid: GridSpec | None = None) -> np.ndarray:
    """Average the grid replicas of every joint.

    ``D`` is (…, H, P, C) when the grid is known, else (…, HP, C).
    """
    W = inverse_weights(S)
    grid = S.grid if isinstance(S, AssignmentMatrix) else grid
    D = np.asarray(D, dtype=np.float64)
    if grid is not None and D.ndim >= 3 and D.shape[-3:-1] == (grid.h, grid.p):
        D = D.reshape(D.shape[:-3] + (grid.cells, D.shape[-1]))
    if D.shape[-2] != W.shape[1]:
        raise ValueError(f"grid pose shape {D.shape} does not match {W.shape[1]} cells")
    # average offsets from each joint's first replica: exact when replicas agree
    mat = _as_S(S)
    ref = D[..., np.argmax(mat, axis=0), :]
    return ref + np.matmul(W, D - np.matmul(mat, ref))


# ---------------------------------------------------------------------------
# Learnable assignment
# ---------------------------------------------------------------------------


@dataclass
class AutoGridsState:
    s_prob: np.ndarray
    grid: GridSpec
    temperature: float = 1.0
    noise_enabled: bool = True
    noise_cutoff_epoch: int = 30

    def __post_init__(self):
        self.s_prob = np.asarray(self.s_prob, dtype=np.float64)
        if self.s_prob.shape[0] != self.grid.cells:
            raise ValueError("S_prob must have one row per grid cell")
        if not np.all(np.isfinite(self.s_prob)) or np.any(self.s_prob <= 0):
            raise ValueError("S_prob entries must be finite and positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def noise_active(self, epoch: int | None) -> bool:
        return self.noise_enabled and epoch is not None and epoch < self.noise_cutoff_epoch


def init_autogrids(seed_layout: AssignmentMatrix | None, grid: GridSpec, rng: np.random.Generator,
                   num_joints: int | None = None, **kwargs) -> AutoGridsState:
    """Seeded: 1.0 on the seed's cells and U(0, 0.01) elsewhere; unseeded: U(0.01, 1)."""
    if seed_layout is not None:
        if seed_layout.grid != grid:
            raise ValueError("seed layout grid does not match the requested grid")
        mask = seed_layout.S > 0.5
        noise = rng.uniform(0.0, 0.01, size=mask.shape)
        # keep entries strictly positive
        noise = np.maximum(noise, np.finfo(float).tiny)
        s_prob = np.where(mask, 1.0, noise)
    else:
        if num_joints is None:
            raise ValueError("num_joints is required without a seed layout")
        s_prob = rng.uniform(0.01, 1.0, size=(grid.cells, num_joints))
    return AutoGridsState(s_prob, grid, **kwargs)


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    # guard the open interval so log(-log u) stays finite
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).eps)
    return -np.log(-np.log(u))


def rowwise_onehot(scores: np.ndarray) -> np.ndarray:
    """One-hot at the row maximum; ties go to the lowest column."""
    out = np.zeros_like(scores, dtype=np.float64)
    out[np.arange(scores.shape[0]), np.argmax(scores, axis=1)] = 1.0
    return out


def autogrids_sample(state: AutoGridsState, rng: np.random.Generator | None, epoch: int | None):
    """Return ``(S_soft, S)``.

    Noise is added only while ``state.noise_enabled`` and ``epoch`` is below
    the cutoff; pass ``epoch=None`` for noise-free (evaluation) sampling.
    """
    if state.noise_active(epoch):
        s_soft = state.s_prob + state.temperature * sample_gumbel(state.s_prob.shape, rng)
    else:
        s_soft = state.s_prob.copy()
    return s_soft, AssignmentMatrix(rowwise_onehot(s_soft), state.grid)


def ste_backward(grad_wrt_S: np.ndarray) -> np.ndarray:
    """Straight-through estimator: the discretization passes gradients unchanged."""
    return np.array(grad_wrt_S, dtype=np.float64, copy=True)


# ---------------------------------------------------------------------------
# CSV dumps
# ---------------------------------------------------------------------------


def dump_assignment(obj, path, joint_names, log: bool = False):
    """Write an assignment (or AutoGrids scores) as a cell x joint CSV."""
    if isinstance(obj, AutoGridsState):
        mat, grid, is_scores = obj.s_prob, obj.grid, True
    elif isinstance(obj, AssignmentMatrix):
        mat, grid, is_scores = obj.S, obj.grid, False
    else:
        raise TypeError("expected an AssignmentMatrix or AutoGridsState")
    if log:
        if not is_scores:
            raise ValueError("log dumps apply to AutoGrids scores only")
        mat = np.log(mat)
    if len(joint_names) != mat.shape[1]:
        raise ValueError("joint_names length does not match the matrix")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["row", "col", *joint_names])
    for idx, row in enumerate(mat):
        r, c = divmod(idx, grid.p)
        vals = [repr(float(v)) for v in row] if is_scores else [str(int(v)) for v in row]
        writer.writerow([r, c, *vals])
    held = rowwise_onehot(mat) if is_scores else mat
    covered = int(np.count_nonzero(held.sum(axis=0)))
    buf.write(f"# coverage: {covered}/{mat.shape[1]}\n")
    Path(path).write_text(buf.getvalue())


def load_assignment_csv(path):
    """Read a dump back; returns ``(matrix, joint_names, grid)``."""
    rows = []
    header = None
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            if not rec or rec[0].startswith("#"):
                continue
            if header is None:
                header = rec
                continue
            if len(rec) != len(header):
                raise LayoutError(f"assignment line {lineno}: expected {len(header)} fields, got {len(rec)}")
            rows.append([float(v) for v in rec])
    if header is None or header[:2] != ["row", "col"]:
        raise LayoutError("assignment CSV must start with a 'row,col,...' header")
    arr = np.array(rows)
    grid = GridSpec(int(arr[:, 0].max()) + 1, int(arr[:, 1].max()) + 1)
    return arr[:, 2:], header[2:], grid


def _read_text(path, default_resource) -> str:
    if path is None:
        return resources.files(_RESOURCES).joinpath(default_resource).read_text()
    return Path(path).read_text()
