"""CSV and JSON export of meshes and transient solutions."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .mesh import Mesh
from .timestepping import TransientSolution

STATE_HEADER = ("step", "time_s", "node", "theta_C", "phi")


def write_mesh_csv(mesh: Mesh, directory) -> dict:
    """Write ``nodes.csv`` and ``triangles.csv``; returns the paths written."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nodes_path = directory / "nodes.csv"
    tri_path = directory / "triangles.csv"
    with open(nodes_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("node", "x_m", "y_m", "tag"))
        for k, (x, y) in enumerate(mesh.nodes):
            w.writerow((k, repr(float(x)), repr(float(y)), mesh.tags[k]))
    with open(tri_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("element", "n0", "n1", "n2"))
        for k, t in enumerate(mesh.triangles):
            w.writerow((k, *map(int, t)))
    return {"nodes": str(nodes_path), "triangles": str(tri_path)}


def write_states_csv(solution: TransientSolution, path) -> Path:
    """One row per (step, node) with the header ``step,time_s,node,theta_C,phi``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    states = np.asarray(solution.states)
    if states.ndim != 2:
        raise ValueError("expected a single trajectory of shape (T, 2N)")
    n = solution.n_nodes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATE_HEADER)
        for i, (t, row) in enumerate(zip(solution.times, states)):
            for k in range(n):
                w.writerow((i, repr(float(t)), k, repr(float(row[k])), repr(float(row[n + k]))))
    return path


def read_states_csv(path) -> TransientSolution:
    """Inverse of :func:`write_states_csv`."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    steps = int(data[:, 0].max()) + 1
    n = int(data[:, 2].max()) + 1
    data = data.reshape(steps, n, 5)
    states = np.concatenate([data[:, :, 3], data[:, :, 4]], axis=1)
    return TransientSolution(states=states, times=data[:, 0, 1])


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_manifest(path, config: dict, diagnostics: dict, extra: dict | None = None) -> Path:
    """Run manifest echoing the configuration and the solver diagnostics."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"config": config, "diagnostics": diagnostics}
    if extra:
        body.update(extra)
    path.write_text(json.dumps(_jsonable(body), indent=2, sort_keys=True) + "\n")
    return path
