"""Finite-difference validation of assembled shape derivatives.

Central differences of the reduced cost along admissible deformation fields
must converge at second order to the assembled derivative; the log-log error
slope over three step decades is the standing correctness gate for every
derivative the optimizer consumes.
"""

from __future__ import annotations

import numpy as np

from .mesh import Deformation, apply_deformation
from .shape_grad import ElasticityForm, ElasticityParams

__all__ = [
    "fd_report",
    "transmission_test_fields",
    "flow_test_fields",
    "FD_STEPS",
]

FD_STEPS = (1e-2, 1e-3, 1e-4)


def fd_report(mesh, problem, fields, steps=FD_STEPS):
    """Central-difference errors and slopes for one coarse problem.

    Returns a list of dicts with the directional derivative, the error per
    step and the fitted log-log slope.
    """
    state = problem.evaluate(mesh)
    dj = problem.derivative(mesh, state)

    def cost(m):
        return problem.evaluate(m).cost

    out = []
    for v in fields:
        value = dj(v)
        errs = []
        for t in steps:
            jp = cost(apply_deformation(mesh, t * v))
            jm = cost(apply_deformation(mesh, (-t) * v))
            errs.append(abs((jp - jm) / (2.0 * t) - value))
        logt = np.log(np.asarray(steps))
        loge = np.log(np.maximum(errs, 1e-300))
        slope = float(np.polyfit(logt, loge, 1)[0])
        out.append({"derivative": value, "errors": errs, "slope": slope})
    return out


def transmission_test_fields(mesh, count=5, seed=0, scale=0.3):
    """Smooth random fields vanishing on the outer square boundary."""
    rng = np.random.default_rng(seed)
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    sx, sy = np.sin(np.pi * x), np.sin(np.pi * y)
    modes = [
        sx * sy,
        np.sin(2 * np.pi * x) * sy,
        sx * np.sin(2 * np.pi * y),
        np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y),
    ]
    fields = []
    for _ in range(count):
        a = rng.standard_normal((2, len(modes)))
        vx = sum(c * m for c, m in zip(a[0], modes))
        vy = sum(c * m for c, m in zip(a[1], modes))
        vals = np.column_stack([vx, vy])
        vals *= scale / max(np.abs(vals).max(), 1e-300)
        fields.append(Deformation(mesh, vals))
    return fields


def flow_test_fields(mesh, fixed_markers, count=5, seed=0, scale=0.5, ep=None):
    """Smooth random fields vanishing on the fixed markers.

    Random nodal loads are smoothed through the elasticity solve with the
    fixed boundaries clamped, so the fields are admissible and regular.
    """
    form = ElasticityForm(mesh, ep or ElasticityParams(), fixed_markers)
    rng = np.random.default_rng(seed)
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    fields = []
    for _ in range(count):
        a = rng.standard_normal(6)
        load = np.column_stack(
            [
                a[0] * np.sin(0.9 * x) * np.cos(0.7 * y) + a[1] * np.cos(1.3 * y + 0.5 * x),
                a[2] * np.cos(0.8 * x) * np.sin(0.6 * y) + a[3] * np.sin(0.4 * x * y + a[4]),
            ]
        )
        rhs = np.zeros(form.space.ndof)
        rhs[0::2] = load[:, 0]
        rhs[1::2] = load[:, 1]
        g = form.solve(rhs)
        vals = g.reshape(-1, 2)
        vals = vals * (scale / max(np.abs(vals).max(), 1e-300))
        fields.append(Deformation(mesh, vals))
    return fields
