"""Readers and writers: legacy VTK meshes, polygon text files and CSV tables."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .geometry import ConvexPolygon

FLOAT_FMT = "%.17g"


def fmt(x):
    """Round-trip text for numbers (17 significant digits for floats)."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return FLOAT_FMT % float(x)
    return str(x)


def write_csv(path, columns, rows):
    """RFC-4180 CSV with a header row; floats are written with 17 digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(columns)
        for r in rows:
            if isinstance(r, dict):
                r = [r[c] for c in columns]
            if len(r) != len(columns):
                raise InvalidArgument("row length does not match the header")
            w.writerow([fmt(v) for v in r])


def _parse(s):
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def read_csv(path):
    """Parse a file written by :func:`write_csv` into (columns, rows of dicts)."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        columns = next(r)
        rows = [dict(zip(columns, map(_parse, line))) for line in r]
    return columns, rows


def write_polygon(path, poly):
    with open(path, "w") as fh:
        for x, y in poly.vertices:
            fh.write(f"{fmt(x)} {fmt(y)}\n")


def read_polygon(path):
    """Polygon from ``x y`` lines (CCW); blank lines and ``#`` comments are skipped."""
    pts = []
    with open(path) as fh:
        for k, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 2:
                raise InvalidArgument(f"{path}:{k}: expected 'x y'")
            try:
                x, y = float(parts[0]), float(parts[1])
            except ValueError:
                raise InvalidArgument(f"{path}:{k}: not a number") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise InvalidArgument(f"{path}:{k}: non-finite coordinate")
            pts.append((x, y))
    return ConvexPolygon(pts)


def write_vtk(path, mesh, point_data=None, title="insulopt mesh"):
    """Legacy ASCII VTK unstructured grid of triangles with nodal scalars."""
    point_data = point_data or {}
    n = mesh.n_nodes
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {n} double"]
    lines += [f"{fmt(x)} {fmt(y)} 0" for x, y in mesh.nodes]
    nt = len(mesh.triangles)
    lines.append(f"CELLS {nt} {4 * nt}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {nt}")
    lines += ["5"] * nt
    if point_data:
        lines.append(f"POINT_DATA {n}")
        for name, values in point_data.items():
            v = np.asarray(values, float)
            if v.shape != (n,):
                raise InvalidArgument(f"field {name!r} needs one value per node")
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [fmt(x) for x in v]
    Path(path).write_text("\n".join(lines) + "\n")


def read_vtk(path):
    """Read back a file written by :func:`write_vtk`: (nodes, triangles, fields)."""
    tok = Path(path).read_text().split("\n")
    i = 0
    nodes = tris = None
    fields = {}
    while i < len(tok):
        line = tok[i].split()
        if not line:
            i += 1
            continue
        if line[0] == "POINTS":
            n = int(line[1])
            nodes = np.array([[float(v) for v in tok[i + 1 + k].split()[:2]] for k in range(n)])
            i += n + 1
        elif line[0] == "CELLS":
            nt = int(line[1])
            tris = np.array([[int(v) for v in tok[i + 1 + k].split()[1:]] for k in range(nt)])
            i += nt + 1
        elif line[0] == "SCALARS":
            name = line[1]
            fields[name] = np.array([float(tok[i + 2 + k]) for k in range(len(nodes))])
            i += len(nodes) + 2
        else:
            i += 1
    if nodes is None or tris is None:
        raise InvalidArgument(f"{path}: not an unstructured triangle grid")
    return nodes, tris, fields

