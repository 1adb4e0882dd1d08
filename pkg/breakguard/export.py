import csv
import json
from pathlib import Path

import numpy as np

from breakguard.exceptions import ShapeError

# legacy vtk cell type of a linear triangle
VTK_TRIANGLE = 5


def _fmt(value):
    return "%.17g" % value


def write_vtk(path, mesh, point_data=None, cell_data=None, title="breakguard"):
    """
    Writes ``mesh`` and its fields as an ASCII legacy VTK unstructured grid.

    Scalars are 1d arrays, vectors are ``(n, 2)`` arrays (padded to three
    components). Values are written with 17 significant digits, so the same
    input always gives the same bytes.

    Parameters
    ----------
    path: str or Path
        Where to write.
    mesh: :class:`~.Mesh`
        The triangulation.
    point_data: dict[str, ndarray]
        Nodal fields by name.
    cell_data: dict[str, ndarray]
        Cellwise fields by name.
    """
    path = Path(path)
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_vertices} double"
    ]
    for x, y in mesh.vertices:
        lines.append(f"{_fmt(x)} {_fmt(y)} 0")
    lines.append(f"CELLS {mesh.n_cells} {4 * mesh.n_cells}")
    for a, b, c in mesh.cells:
        lines.append(f"3 {a} {b} {c}")
    lines.append(f"CELL_TYPES {mesh.n_cells}")
    lines.extend([str(VTK_TRIANGLE)] * mesh.n_cells)

    for section, data, n in [("POINT_DATA", point_data, mesh.n_vertices),
        ("CELL_DATA", cell_data, mesh.n_cells)]:
        if not data:
            continue
        lines.append(f"{section} {n}")
        for name, values in data.items():
            lines.extend(_vtk_array(name, values, n))

    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    return path


def _vtk_array(name, values, n):
    values = np.asarray(values, dtype=float)
    if len(values) != n:
        raise ShapeError(f"field {name} has {len(values)} values, expected "
            f"{n}")
    if values.ndim == 1:
        return [f"SCALARS {name} double 1", "LOOKUP_TABLE default"] + \
            [_fmt(v) for v in values]
    if values.ndim == 2 and values.shape[1] in (2, 3):
        if values.shape[1] == 2:
            values = np.column_stack([values, np.zeros(n)])
        return [f"VECTORS {name} double"] + \
            [" ".join(_fmt(v) for v in row) for row in values]
    raise ShapeError(f"field {name} has unsupported shape {values.shape}")


def read_vtk_fields(path):
    """
    The scalar and vector fields of a file written by :func:`write_vtk`,
    keyed by name.
    """
    with open(path) as f:
        lines = f.read().splitlines()
    fields = {}
    i = 0
    count = 0
    while i < len(lines):
        words = lines[i].split()
        if words and words[0] in ("POINT_DATA", "CELL_DATA"):
            count = int(words[1])
        elif words and words[0] == "SCALARS":
            fields[words[1]] = np.array(lines[i + 2:i + 2 + count], dtype=float)
            i += 1 + count
        elif words and words[0] == "VECTORS":
            rows = [row.split() for row in lines[i + 1:i + 1 + count]]
            fields[words[1]] = np.array(rows, dtype=float)
            i += count
        i += 1
    return fields


def write_csv(path, rows, fieldnames=None):
    """
    Writes a list of dicts as CSV. Columns default to the keys of the first
    row.
    """
    path = Path(path)
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames,
            extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _plain(v) for k, v in row.items()})
    return path


def append_csv(path, row, fieldnames):
    """
    Appends one row to ``path``, writing the header first if the file is new.
    """
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames,
            extrasaction="ignore", lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerow({k: _plain(v) for k, v in row.items()})
    return path


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def write_json(path, data):
    path = Path(path)
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_plain)
    return path


class JsonlWriter:
    """
    Appends one JSON object per line, flushing after each so a crashed run
    keeps everything it logged.
    """
    def __init__(self, path):
        self.path = Path(path)
        self._file = open(self.path, "w")

    def write(self, entry):
        self._file.write(json.dumps(entry, sort_keys=True, default=_plain))
        self._file.write("\n")
        self._file.flush()

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
