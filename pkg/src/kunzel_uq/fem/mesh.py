"""Linear triangle meshes on rectangular domains."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

INTERIOR = "none"
EXTERIOR = "exterior"
INTERIOR_SIDE = "interior"
INSULATED = "insulated"

_OPPOSITE = {"left": "right", "right": "left", "bottom": "top", "top": "bottom"}


class MeshError(ValueError):
    pass


@dataclass
class Mesh:
    nodes: np.ndarray  # (N, 2) coordinates [m]
    triangles: np.ndarray  # (E, 3) node indices, counter-clockwise
    tags: np.ndarray = field(default=None)  # (N,) boundary tag per node
    # boundary edges per loaded side, (k, 2) node pairs; used by Robin conditions
    edges: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.tags is None:
            self.tags = np.full(len(self.nodes), INTERIOR, dtype=object)
        else:
            self.tags = np.asarray(self.tags, dtype=object)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise MeshError("nodes must be an (N, 2) array")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must be an (E, 3) array")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.nodes):
            raise MeshError("triangle references a missing node")
        if len(self.tags) != len(self.nodes):
            raise MeshError("one boundary tag per node is required")
        if np.any(self.signed_areas() <= 0):
            raise MeshError("triangles must be positively oriented")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    def nodes_tagged(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.tags == tag)

    def nearest_node(self, point) -> int:
        return int(np.argmin(np.linalg.norm(self.nodes - np.asarray(point, float), axis=1)))

    def nearest_element(self, point) -> int:
        return int(np.argmin(np.linalg.norm(self.centroids() - np.asarray(point, float), axis=1)))


def build_mesh(nx: int, ny: int, lx: float, ly: float, exterior_side: str = "left") -> Mesh:
    """Structured grid of ``nx * ny`` nodes, each cell split along its rising diagonal.

    Node ``(i, j)`` (column ``i``, row ``j``) gets index ``j * nx + i``.  The
    ``exterior_side`` column/row is tagged exterior, the opposite one interior,
    and the remaining boundary nodes insulated.
    """
    if nx < 2 or ny < 2:
        raise MeshError("need at least 2 nodes per direction")
    if lx <= 0 or ly <= 0:
        raise MeshError("domain lengths must be positive")
    if exterior_side not in _OPPOSITE:
        raise MeshError(f"unknown side {exterior_side!r}")
    xs = np.linspace(0.0, lx, nx)
    ys = np.linspace(0.0, ly, ny)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    idx = np.arange(nx * ny).reshape(ny, nx)
    n00 = idx[:-1, :-1].ravel()
    n10 = idx[:-1, 1:].ravel()
    n01 = idx[1:, :-1].ravel()
    n11 = idx[1:, 1:].ravel()
    lower = np.column_stack([n00, n10, n11])
    upper = np.column_stack([n00, n11, n01])
    triangles = np.stack([lower, upper], axis=1).reshape(-1, 3)

    sides = {
        "left": idx[:, 0],
        "right": idx[:, -1],
        "bottom": idx[0, :],
        "top": idx[-1, :],
    }
    interior_side = _OPPOSITE[exterior_side]
    tags = np.full(nx * ny, INTERIOR, dtype=object)
    for side, ids in sides.items():
        if side not in (exterior_side, interior_side):
            tags[ids] = INSULATED
    # loaded sides win at corners
    tags[sides[exterior_side]] = EXTERIOR
    tags[sides[interior_side]] = INTERIOR_SIDE

    edges = {
        EXTERIOR: np.column_stack([sides[exterior_side][:-1], sides[exterior_side][1:]]),
        INTERIOR_SIDE: np.column_stack([sides[interior_side][:-1], sides[interior_side][1:]]),
    }
    return Mesh(nodes=nodes, triangles=triangles, tags=tags, edges=edges)
