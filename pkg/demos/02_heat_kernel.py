"""Heat kernel on the torus: Gaussian calibration and on-diagonal decay.

On the constant environment the discrete kernel is compared with the
periodised Gaussian of covariance 2I, then the diagonal decay exponent is
fitted for a constant and a heavy-tailed environment.
"""

from __future__ import annotations

import math

import numpy as np

from dhlab import heat
from dhlab.env import EnvironmentSpec, generate_environment
from dhlab.grid import assemble_form


def form(model, N, **kw):
    return assemble_form(generate_environment(EnvironmentSpec(N=N, model=model, seed=1, **kw)))


f = form("constant", 64, h=1 / 16)
o = f.grid.center_site()
col = heat.kernel_column(f, o, 1.0, solver="direct")
disp = f.grid.displacement(o)
gauss = sum(np.exp(-((disp + np.array([a, b]) * f.grid.side) ** 2).sum(1) / 4) / (4 * math.pi)
            for a in range(-2, 3) for b in range(-2, 3))
inside = np.linalg.norm(disp, axis=1) <= 3
print(f"constant environment, t=1: sup relative error vs Gaussian "
      f"{np.max(np.abs(col.values[inside] - gauss[inside]) / gauss[inside]):.2e}")

times = np.geomspace(4, 40, 6)
for model in ("constant", "iid-cell-pareto"):
    _, D = heat.diagonal_values(form(model, 64), times)
    print(f"{model:>16}: diagonal slope {heat.loglog_slope(times, D.max(axis=1)):+.3f} (diffusive value -1)")
