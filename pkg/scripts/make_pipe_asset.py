"""Build the shipped pipe-network mesh asset and its manifest.

The geometry is a distribution chamber fed from the left with three straight
outlet pipes of unequal length hanging from its bottom edge.  Everything is
laid out on a uniform grid so the rectangles meet conformingly; squares are
split into triangles with alternating diagonals.

Run from the repository root:  python3 scripts/make_pipe_asset.py
"""

import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from shapemap.fileio import write_msh  # noqa: E402
from shapemap.mesh import Mesh  # noqa: E402

# grid pitch and rectangles in integer grid units (1 unit = PITCH)
PITCH = 1.0 / 20.0
CHAMBER = (0, 120, -40, 0)
PIPES = {
    # name: (x0, x1, y_bottom, y_fixed_below)
    "left": (25, 35, -80, -60),
    "middle": (60, 70, -65, -53),
    "right": (95, 105, -72, -56),
}
INLET_Y = (-20, 0)

INLET, WALL, FIXED_WALL = 1, 2, 6
OUTLETS = {"left": 3, "middle": 4, "right": 5}


def build():
    cells = set()
    x0, x1, y0, y1 = CHAMBER
    for i in range(x0, x1):
        for j in range(y0, y1):
            cells.add((i, j))
    for px0, px1, pyb, _ in PIPES.values():
        for i in range(px0, px1):
            for j in range(pyb, CHAMBER[2]):
                cells.add((i, j))

    node_id = {}
    nodes = []

    def nid(i, j):
        key = (i, j)
        if key not in node_id:
            node_id[key] = len(nodes)
            nodes.append(key)
        return node_id[key]

    triangles = []
    for i, j in sorted(cells):
        p00, p10 = nid(i, j), nid(i + 1, j)
        p01, p11 = nid(i, j + 1), nid(i + 1, j + 1)
        if (i + j) % 2 == 0:
            triangles.append((p00, p10, p11))
            triangles.append((p00, p11, p01))
        else:
            triangles.append((p00, p10, p01))
            triangles.append((p10, p11, p01))

    coords = PITCH * np.array(nodes, dtype=float)
    triangles = np.array(triangles)

    # classify boundary edges on the integer grid
    from collections import Counter

    edge_count = Counter()
    for a, b, c in triangles:
        for u, v in ((a, b), (b, c), (c, a)):
            edge_count[(min(u, v), max(u, v))] += 1
    grid = {v: k for k, v in node_id.items()}

    facet_markers = {}
    for (u, v), count in edge_count.items():
        if count != 1:
            continue
        (iu, ju), (iv, jv) = grid[u], grid[v]
        marker = WALL
        if iu == iv == 0 and min(ju, jv) >= INLET_Y[0] and max(ju, jv) <= INLET_Y[1]:
            marker = INLET
        else:
            for name, (px0, px1, pyb, yfix) in PIPES.items():
                if ju == jv == pyb and px0 <= min(iu, iv) and max(iu, iv) <= px1:
                    marker = OUTLETS[name]
                elif (
                    iu == iv
                    and iu in (px0, px1)
                    and max(ju, jv) <= yfix
                    and min(ju, jv) >= pyb
                ):
                    marker = FIXED_WALL
        facet_markers[(u, v)] = marker

    mesh = Mesh(coords, triangles, facet_markers, np.ones(len(triangles), dtype=int))
    return mesh


def main():
    here = os.path.dirname(os.path.abspath(__file__))
    assets = os.path.join(here, "..", "src", "shapemap", "assets")
    os.makedirs(assets, exist_ok=True)
    mesh = build()
    path = os.path.join(assets, "pipe_network.msh")
    write_msh(path, mesh)
    manifest = {
        "file": "pipe_network.msh",
        "nodes": int(mesh.n_nodes),
        "triangles": int(mesh.n_triangles),
        "pitch": PITCH,
        "markers": {
            "inlet": INLET,
            "wall": WALL,
            "outlet_left": OUTLETS["left"],
            "outlet_middle": OUTLETS["middle"],
            "outlet_right": OUTLETS["right"],
            "fixed_pipe_wall": FIXED_WALL,
        },
        "outlets": [OUTLETS["left"], OUTLETS["middle"], OUTLETS["right"]],
        "fixed_markers": [INLET, OUTLETS["left"], OUTLETS["middle"],
                          OUTLETS["right"], FIXED_WALL],
        "inlet_span": [[0.0, -1.0], [0.0, 0.0]],
        "description": (
            "Distribution chamber [0,6]x[-2,0] fed on the left over "
            "y in [-1,0]; three straight outlet pipes of width 0.5 and "
            "lengths 2.0 / 1.25 / 1.6 hang from the chamber bottom. "
            "The lower halves of the pipes carry the fixed-wall marker."
        ),
    }
    with open(os.path.join(assets, "pipe_network.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {path}: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles")


if __name__ == "__main__":
    main()
