"""File formats: CSV datasets and traces, JSON parameters and fit results."""
import csv
import json
from pathlib import Path

import numpy as np

from .datagen import ParseError
from .model import Dataset, ModelParams


def _sibling(path, suffix):
    path = Path(path)
    stem = path.name[:-4] if path.name.endswith(".csv") else path.name
    return path.with_name(stem + suffix)


def write_matrix_csv(path, M, header=None):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        if header:
            out.writerow(header)
        for row in M:
            out.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path, header=False):
    rows = []
    with open(path, newline="") as fh:
        for r, row in enumerate(csv.reader(fh), start=1):
            if header and r == 1:
                continue
            if not row:
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                bad = next(i for i, c in enumerate(row, 1) if not _is_float(c))
                raise ParseError(f"{path}: non-numeric cell", r, bad) from None
            if rows and len(vals) != len(rows[0]):
                raise ParseError(f"{path}: expected {len(rows[0])} columns", r)
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: empty file")
    return np.array(rows)


def _is_float(c):
    try:
        float(c)
        return True
    except ValueError:
        return False


def write_dataset(path, dataset, header=False):
    """Write ``Y`` to ``path`` and ground-truth latents to ``.s.csv``/``.z.csv``.

    For data without binary latents (sparse coding, mixed sources) the
    effective sources ``X_true`` go to ``.z.csv``.
    """
    path = Path(path)
    cols = [f"y{d}" for d in range(dataset.D)] if header else None
    write_matrix_csv(path, dataset.Y, cols)
    written = [path]
    if dataset.S_true is not None:
        write_matrix_csv(_sibling(path, ".s.csv"), dataset.S_true)
        written.append(_sibling(path, ".s.csv"))
    Z = dataset.Z_true if dataset.Z_true is not None else dataset.X_true
    if Z is not None:
        write_matrix_csv(_sibling(path, ".z.csv"), Z)
        written.append(_sibling(path, ".z.csv"))
    return written


def read_dataset(path, header=False, params_true=None, mixing=None):
    Y = read_matrix_csv(path, header)
    s_path, z_path = _sibling(path, ".s.csv"), _sibling(path, ".z.csv")
    S = read_matrix_csv(s_path) if s_path.exists() else None
    Z = read_matrix_csv(z_path) if z_path.exists() else None
    if S is None:
        return Dataset(Y, X_true=Z, params_true=params_true, mixing=mixing)
    return Dataset(Y, S_true=S, Z_true=Z, params_true=params_true, mixing=mixing)


def write_params(path, params):
    Path(path).write_text(json.dumps(params.to_dict(), indent=2))


def read_params(path):
    return ModelParams.from_dict(json.loads(Path(path).read_text()))


def write_fit_result(path, result):
    Path(path).write_text(json.dumps(result.to_dict(), indent=2))


def read_fit_result(path):
    from .em import FitResult
    return FitResult.from_dict(json.loads(Path(path).read_text()))


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["iteration", "log_lik"])
        for i, v in enumerate(trace):
            out.writerow([i, repr(float(v))])


def write_histogram_csv(path, edges, counts):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["bin_left", "count"])
        for left, c in zip(edges[:-1], counts):
            out.writerow([repr(float(left)), int(c)])
