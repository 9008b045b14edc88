#############################################
# CSV / JSON PERSISTENCE                    #
#############################################

"""
Every table goes through pandas with 17 significant digits; every JSON document is
indented, key-sorted and free of NaN (written as null).
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os

import numpy as np
import pandas as pd

from ergodic import constants
from ergodic.techniques.discretize import discrete_gradient

logger = logging.getLogger(__name__)


def to_builtin(value):
    """numpy scalars/arrays to python types, non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_builtin(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(data, path):
    with open(path, "w") as f:
        json.dump(to_builtin(data), f, indent=2, sort_keys=True, allow_nan=False)
    logger.info("wrote %s", path)
    return path


def read_json(path):
    with open(path) as f:
        return json.load(f)


def write_csv(frame, path):
    frame.to_csv(path, index=False, float_format=constants.CSV_FLOAT_FORMAT)
    logger.info("wrote %s (%d rows)", path, len(frame))
    return path


def file_record(path, root):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return {"path": os.path.relpath(path, root), "sha256": digest.hexdigest(), "bytes": os.path.getsize(path)}


def value_frame(report, problem):
    """V* with its discrete gradient: columns x.., V, dV/dx.."""
    frame = report.V.to_frame("V")
    gradient = discrete_gradient(report.grid, report.V.values)
    names = ["dV_dx"] if report.grid.dim == 1 else ["dV_dx%d" % (i + 1) for i in range(report.grid.dim)]
    for i, name in enumerate(names):
        frame[name] = gradient[:, i]
    return frame


def policy_frame(report, problem):
    frame = report.V.to_frame("V").drop(columns="V")
    frame["control_index"] = report.policy
    controls = report.policy_controls(problem)
    names = ["u"] if controls.shape[1] == 1 else ["u%d" % (i + 1) for i in range(controls.shape[1])]
    for i, name in enumerate(names):
        frame[name] = controls[:, i]
    return frame


def write_trajectory(traj, out, prefix="trajectory"):
    """
    One CSV per snapshot (node coordinates, value), the dense anchor series and a JSON
    manifest with times, dt, mode and the diagnostics series.
    :return: list of written paths
    """
    written = []
    for i, step in enumerate(traj.snapshot_steps):
        path = os.path.join(out, "%s_%04d.csv" % (prefix, i))
        written.append(write_csv(traj.field(i).to_frame("value"), path))
    anchors = pd.DataFrame({"t": traj.step_times, "anchor": traj.anchor_series,
                            "reference": traj.reference_series})
    written.append(write_csv(anchors, os.path.join(out, "%s_anchor_series.csv" % prefix)))
    meta = traj.to_manifest()
    meta["snapshots"] = [os.path.basename(p) for p in written[:len(traj.snapshot_steps)]]
    meta["diagnostics"] = [record.__dict__ for record in traj.diagnostics]
    written.append(write_json(meta, os.path.join(out, "%s.json" % prefix)))
    return written


def write_path_dump(estimate, path):
    """Per-path samples behind an estimate (can be large)."""
    frame = pd.DataFrame({"path": np.arange(estimate.n_paths), "value": estimate.samples})
    return write_csv(frame, path)
