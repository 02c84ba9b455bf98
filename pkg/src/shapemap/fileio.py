"""Mesh and field file formats plus the external fine-model file protocol.

Formats: a subset of MSH 2.2 ASCII (nodes, 2-node boundary lines, 3-node
triangles, physical tags as markers), legacy ASCII VTK unstructured grids for
visualization, and a flat CSV for run histories.  Floats are written with 17
significant digits so round trips are exact.

The co-simulation protocol is a directory handshake: the driver writes
``request_<k>/mesh.msh`` and ``request_<k>/request.json``, the responder
answers with ``response.txt`` followed by an empty ``done`` flag file, and
the driver polls for the flag.
"""

from __future__ import annotations

import json
import os
import time

import numpy as np

from .errors import BackendTimeout, ParseError, ProtocolError, UnsupportedElement
from .mesh import Mesh

__all__ = [
    "read_msh",
    "write_msh",
    "write_vtk",
    "write_history_csv",
    "read_history_csv",
    "external_protocol_roundtrip",
    "serve_requests",
]

_MSH_LINE = 1
_MSH_TRIANGLE = 2


def _fmt(x):
    return f"{x:.17g}"


def write_msh(path, mesh):
    """Write the mesh in the MSH 2.2 ASCII subset read back by read_msh."""
    lines = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat"]
    lines.append("$Nodes")
    lines.append(str(mesh.n_nodes))
    for i, (x, y) in enumerate(mesh.nodes, start=1):
        lines.append(f"{i} {_fmt(x)} {_fmt(y)} 0")
    lines.append("$EndNodes")
    lines.append("$Elements")
    facets = sorted(mesh.facet_markers.items())
    lines.append(str(len(facets) + mesh.n_triangles))
    eid = 1
    for (u, v), marker in facets:
        lines.append(f"{eid} {_MSH_LINE} 2 {marker} {marker} {u + 1} {v + 1}")
        eid += 1
    for tri, marker in zip(mesh.triangles, mesh.cell_markers):
        lines.append(
            f"{eid} {_MSH_TRIANGLE} 2 {marker} {marker} "
            f"{tri[0] + 1} {tri[1] + 1} {tri[2] + 1}"
        )
        eid += 1
    lines.append("$EndElements")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_msh(path):
    """Parse the MSH 2.2 ASCII subset into a mesh.

    Accepts 2-node lines (facet markers) and 3-node triangles (cell markers);
    any other element type raises UnsupportedElement.  Coordinates must be
    planar: a nonzero z beyond 1e-14 is rejected.
    """
    with open(path) as fh:
        raw = fh.read().splitlines()

    def fail(msg, ln):
        raise ParseError(msg, line=ln + 1)

    idx = {}
    i = 0
    while i < len(raw):
        token = raw[i].strip()
        if token.startswith("$") and not token.startswith("$End"):
            end = f"$End{token[1:]}"
            j = i + 1
            while j < len(raw) and raw[j].strip() != end:
                j += 1
            if j >= len(raw):
                fail(f"unterminated section {token}", i)
            idx[token] = (i + 1, j)
            i = j + 1
        else:
            i += 1

    if "$MeshFormat" not in idx:
        raise ParseError("missing $MeshFormat section")
    fstart, _ = idx["$MeshFormat"]
    version = raw[fstart].split()
    if not version or not version[0].startswith("2.2"):
        fail(f"unsupported MSH version {version[:1]}", fstart)

    if "$Nodes" not in idx or "$Elements" not in idx:
        raise ParseError("missing $Nodes or $Elements section")

    nstart, nend = idx["$Nodes"]
    try:
        n_nodes = int(raw[nstart])
    except ValueError:
        fail("node count is not an integer", nstart)
    id_map = {}
    coords = []
    for ln in range(nstart + 1, nend):
        parts = raw[ln].split()
        if len(parts) != 4:
            fail(f"malformed node line {raw[ln]!r}", ln)
        nid = int(parts[0])
        x, y, z = (float(p) for p in parts[1:])
        if abs(z) > 1e-14:
            fail(f"node {nid} has nonzero z coordinate {z}", ln)
        id_map[nid] = len(coords)
        coords.append((x, y))
    if len(coords) != n_nodes:
        fail(f"expected {n_nodes} nodes, found {len(coords)}", nstart)

    estart, eend = idx["$Elements"]
    triangles = []
    cell_markers = []
    facet_markers = {}
    for ln in range(estart + 1, eend):
        parts = raw[ln].split()
        if len(parts) < 3:
            fail(f"malformed element line {raw[ln]!r}", ln)
        etype = int(parts[1])
        ntags = int(parts[2])
        tags = parts[3 : 3 + ntags]
        conn = [id_map[int(p)] for p in parts[3 + ntags :]]
        physical = int(tags[0]) if tags else 0
        if etype == _MSH_LINE:
            if len(conn) != 2:
                fail("line element needs exactly two nodes", ln)
            a, b = conn
            facet_markers[(min(a, b), max(a, b))] = physical
        elif etype == _MSH_TRIANGLE:
            if len(conn) != 3:
                fail("triangle element needs exactly three nodes", ln)
            triangles.append(conn)
            cell_markers.append(physical)
        else:
            raise UnsupportedElement(
                f"element type {etype} is outside the supported subset",
                line=ln + 1,
            )

    nodes = np.array(coords)
    triangles = np.array(triangles, dtype=np.int64)
    # normalize orientation: flip clockwise triangles
    p = nodes[triangles]
    areas = 0.5 * (
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
        - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
    )
    flip = areas < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    return Mesh(nodes, triangles, facet_markers, np.array(cell_markers))


def write_vtk(path, mesh, point_data=None):
    """Legacy ASCII VTK unstructured grid with optional nodal fields.

    Scalar arrays of length N become SCALARS records, (N, 2) arrays become
    VECTORS records padded with a zero z component.  Cell markers are always
    emitted as CELL_DATA.  Output bytes are deterministic for equal inputs.
    """
    point_data = point_data or {}
    out = []
    out.append("# vtk DataFile Version 3.0")
    out.append("shapemap mesh")
    out.append("ASCII")
    out.append("DATASET UNSTRUCTURED_GRID")
    out.append(f"POINTS {mesh.n_nodes} double")
    for x, y in mesh.nodes:
        out.append(f"{_fmt(x)} {_fmt(y)} 0")
    out.append(f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}")
    for a, b, c in mesh.triangles:
        out.append(f"3 {a} {b} {c}")
    out.append(f"CELL_TYPES {mesh.n_triangles}")
    out.extend(["5"] * mesh.n_triangles)
    out.append(f"CELL_DATA {mesh.n_triangles}")
    out.append("SCALARS cell_markers int 1")
    out.append("LOOKUP_TABLE default")
    out.extend(str(int(m)) for m in mesh.cell_markers)
    if point_data:
        out.append(f"POINT_DATA {mesh.n_nodes}")
        for name, values in point_data.items():
            arr = np.asarray(values, dtype=np.float64)
            if arr.shape == (mesh.n_nodes,):
                out.append(f"SCALARS {name} double 1")
                out.append("LOOKUP_TABLE default")
                out.extend(_fmt(v) for v in arr)
            elif arr.shape == (mesh.n_nodes, 2):
                out.append(f"VECTORS {name} double")
                out.extend(f"{_fmt(vx)} {_fmt(vy)} 0" for vx, vy in arr)
            else:
                raise ProtocolError(
                    f"point data {name!r} has shape {arr.shape}, expected "
                    f"({mesh.n_nodes},) or ({mesh.n_nodes}, 2)"
                )
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


HISTORY_HEADER = "iter,cost,sigma,coarse_iters,wall_s"


def write_history_csv(path, records):
    """One row per iteration record: ``iter,cost,sigma,coarse_iters,wall_s``."""
    lines = [HISTORY_HEADER]
    for rec in records:
        lines.append(
            f"{rec.iteration},{_fmt(rec.cost)},{_fmt(rec.sigma)},"
            f"{rec.coarse_iters},{_fmt(rec.wall_s)}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_history_csv(path):
    """Rows of (iter, cost, sigma, coarse_iters, wall_s) tuples."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != HISTORY_HEADER:
        raise ParseError("missing history header")
    rows = []
    for line in lines[1:]:
        it, cost, sigma, ci, wall = line.split(",")
        rows.append((int(it), float(cost), float(sigma), int(ci), float(wall)))
    return rows


# -- external fine-model protocol ----------------------------------------------


def _next_request_dir(directory):
    k = 0
    while True:
        cand = os.path.join(directory, f"request_{k}")
        if not os.path.exists(cand):
            return cand, k
        k += 1


def external_protocol_roundtrip(directory, mesh, request, timeout_s, poll_s=0.1):
    """Submit one fine-model request and wait for the response.

    ``request`` is a mapping with ``kind`` ("field" or "rates"), ``outlets``
    (marker list, rates only) and ``params``.  Returns the parsed value lines:
    one real per node for fields, one per outlet for rates.
    """
    os.makedirs(directory, exist_ok=True)
    reqdir, _ = _next_request_dir(directory)
    os.makedirs(reqdir)
    write_msh(os.path.join(reqdir, "mesh.msh"), mesh)
    tmp = os.path.join(reqdir, ".request.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(request, fh, sort_keys=True)
    os.replace(tmp, os.path.join(reqdir, "request.json"))

    flag = os.path.join(reqdir, "done")
    deadline = time.monotonic() + timeout_s
    while not os.path.exists(flag):
        if time.monotonic() > deadline:
            raise BackendTimeout(
                f"no response in {reqdir} within {timeout_s:.1f} s"
            )
        time.sleep(poll_s)

    with open(os.path.join(reqdir, "response.txt")) as fh:
        values = [float(line) for line in fh.read().split()]
    kind = request["kind"]
    if kind == "field":
        expected = mesh.n_nodes
    elif kind == "rates":
        expected = len(request["outlets"])
    else:
        raise ProtocolError(f"unknown request kind {kind!r}")
    if len(values) != expected:
        raise ProtocolError(
            f"response has {len(values)} values, expected {expected}"
        )
    return np.array(values)


def serve_requests(
    directory,
    handler,
    stop_file="stop",
    poll_s=0.05,
    max_requests=None,
    timeout_s=None,
):
    """Answer protocol requests until a stop file appears.

    ``handler(mesh, request)`` returns the response values.  Responses are
    written before the ``done`` flag so the driver never reads a partial
    file.  Intended to wrap in-process solvers as a stand-in for arbitrary
    external simulators.
    """
    os.makedirs(directory, exist_ok=True)
    served = 0
    deadline = time.monotonic() + timeout_s if timeout_s else None
    while True:
        if os.path.exists(os.path.join(directory, stop_file)):
            return served
        if max_requests is not None and served >= max_requests:
            return served
        if deadline and time.monotonic() > deadline:
            return served
        handled_one = False
        for name in sorted(os.listdir(directory)):
            reqdir = os.path.join(directory, name)
            if not name.startswith("request_") or not os.path.isdir(reqdir):
                continue
            if os.path.exists(os.path.join(reqdir, "done")):
                continue
            reqfile = os.path.join(reqdir, "request.json")
            if not os.path.exists(reqfile):
                continue
            with open(reqfile) as fh:
                request = json.load(fh)
            mesh = read_msh(os.path.join(reqdir, "mesh.msh"))
            values = np.asarray(handler(mesh, request), dtype=np.float64)
            with open(os.path.join(reqdir, "response.txt"), "w") as fh:
                fh.write("\n".join(_fmt(v) for v in values) + "\n")
            with open(os.path.join(reqdir, "done"), "w") as fh:
                fh.write("")
            served += 1
            handled_one = True
        if not handled_one:
            time.sleep(poll_s)
