"""Effective covariance and the rescaled local CLT error.

The corrector and the stationary second moment give two independent
estimates of Sigma. A short sweep over epsilon then reports the rescaled
kernel error per origin; at this torus size the decay is still noisy, the
acceptance suite runs the full sweep at N=256.
"""

from __future__ import annotations

import numpy as np

from dhlab import clt
from dhlab.env import EnvironmentSpec, generate_environment
from dhlab.grid import assemble_form

f = assemble_form(generate_environment(EnvironmentSpec(N=128, model="lognormal", seed=1)))
corrector = clt.sigma_from_corrector(clt.solve_corrector(form=f), clt.a_lambda(f))
moment = clt.sigma_stationary_moment(f, (f.grid.side / 12) ** 2 / clt.sigma_prior(f))
print("corrector Sigma\n", np.round(corrector.Sigma, 4))
print("second-moment Sigma\n", np.round(moment.Sigma, 4))
print(f"relative operator distance {clt.relative_op_distance(corrector.Sigma, moment.Sigma):.3f}")

origins = clt.random_origins(f, 2, seed=1)
sweep = clt.clt_sweep(f, origins, [1, 0.5, 0.25], np.linspace(0.5, 2.0, 4), 2.0, corrector, keep_records=False)
for o, entry in clt.sweep_verdict(sweep)["per_origin"].items():
    print(f"origin {o}: errors by epsilon {np.round(entry['errors'], 5)}")
