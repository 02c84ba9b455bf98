"""Stand-in external responder: serves protocol requests with the in-process
solvers.  Run as ``python -m shapemap.loopback <directory>``; the loop exits
when a ``stop`` file appears in the directory.
"""

from __future__ import annotations

import sys

import numpy as np

from . import fileio, models


def solve_request(mesh, request):
    """Answer one protocol request with the internal fine solvers."""
    params = request["params"]
    if request["kind"] == "field":
        tp = models.TransmissionParams(
            alpha_in=params["alpha_in"],
            alpha_out=params["alpha_out"],
            f_in=params["f_in"],
            f_out=params["f_out"],
            beta=params["beta"],
        )
        return models.solve_transmission(mesh, tp).field.values
    fp = models.FlowParams(
        reynolds=params["reynolds"],
        inlet_scale=params.get("inlet_scale", 1.0),
        inlet_marker=params.get("inlet_marker", 1),
        wall_markers=tuple(params.get("wall_markers", (2, 6))),
        outlet_markers=tuple(request["outlets"]),
    )
    velocity, _ = models.solve_flow(mesh, fp)
    return models.flow_rates(velocity, fp.outlet_markers)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) < 1:
        print("usage: python -m shapemap.loopback <directory> [timeout_s]",
              file=sys.stderr)
        return 2
    directory = argv[0]
    timeout = float(argv[1]) if len(argv) > 1 else None
    fileio.serve_requests(directory, solve_request, timeout_s=timeout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
