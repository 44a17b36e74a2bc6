"""File formats shared across the pipeline.

Three deliberately plain formats:
  * atomic text writes (write to a sibling temp file, then rename), so
    stage outputs are either absent or complete and runs can resume on
    file presence alone;
  * "meta" files: one `key = value` per line;
  * trajectory CSVs: header `t,du,dq,dr,theta,psi,u,q,r,duc,dqc,drc`,
    optionally extended with the truth-only columns `px,py,pz,w`. Time
    is printed with 6 decimal places; every other column uses %.17g so
    values round-trip bit-exactly and identical runs produce identical
    bytes.
"""

import os

import numpy as np

from .plant import N_INPUTS, N_OUTPUTS, N_STATES, OUTPUT_STATE_INDEX, INPUT_NAMES, OUTPUT_NAMES

TRAJ_COLUMNS = ("t",) + INPUT_NAMES + OUTPUT_NAMES
STATE_EXTRA_COLUMNS = ("px", "py", "pz", "w")
# State components not visible in the output vector, in state order.
_EXTRA_STATE_INDEX = (0, 1, 2, 6)


def atomic_write_text(path, text: str):
    """Write text so that `path` never holds a partial file."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_meta(path, mapping: dict):
    lines = [f"{key} = {value}" for key, value in mapping.items()]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_meta(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith((";", "#")):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def format_trajectory_csv(t, u, y, states=None) -> str:
    """Render one trajectory; states, when given, add the px,py,pz,w columns."""
    t = np.asarray(t, dtype=float)
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    n = t.shape[0]
    if u.shape != (n, N_INPUTS):
        raise ValueError(f"inputs must have shape ({n}, {N_INPUTS}), got {u.shape}")
    if y.shape != (n, N_OUTPUTS):
        raise ValueError(f"outputs must have shape ({n}, {N_OUTPUTS}), got {y.shape}")
    header = TRAJ_COLUMNS
    extra = None
    if states is not None:
        states = np.asarray(states, dtype=float)
        if states.shape != (n, N_STATES):
            raise ValueError(f"states must have shape ({n}, {N_STATES}), got {states.shape}")
        header = header + STATE_EXTRA_COLUMNS
        extra = states[:, _EXTRA_STATE_INDEX]

    lines = [",".join(header)]
    for k in range(n):
        cells = [f"{t[k]:.6f}"]
        cells += [f"{v:.17g}" for v in u[k]]
        cells += [f"{v:.17g}" for v in y[k]]
        if extra is not None:
            cells += [f"{v:.17g}" for v in extra[k]]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_trajectory_csv(path, t, u, y, states=None):
    atomic_write_text(path, format_trajectory_csv(t, u, y, states))


def read_trajectory_csv(path):
    """Inverse of write_trajectory_csv.

    Returns (t, u, y, states); states is None unless the file carries the
    truth-only columns, in which case the full state array is rebuilt from
    the output columns plus px,py,pz,w.
    """
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header[: len(TRAJ_COLUMNS)]) != TRAJ_COLUMNS:
            raise ValueError(f"{path}: unexpected trajectory header {header!r}")
        has_states = tuple(header[len(TRAJ_COLUMNS):]) == STATE_EXTRA_COLUMNS
        if not has_states and len(header) != len(TRAJ_COLUMNS):
            raise ValueError(f"{path}: unexpected trailing columns {header[len(TRAJ_COLUMNS):]!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape[1] != len(header):
        raise ValueError(f"{path}: row width {data.shape[1]} != header width {len(header)}")
    t = data[:, 0]
    u = data[:, 1 : 1 + N_INPUTS]
    y = data[:, 1 + N_INPUTS : 1 + N_INPUTS + N_OUTPUTS]
    states = None
    if has_states:
        states = np.zeros((data.shape[0], N_STATES))
        states[:, OUTPUT_STATE_INDEX] = y
        states[:, _EXTRA_STATE_INDEX] = data[:, 1 + N_INPUTS + N_OUTPUTS :]
    return t, u, y, states
