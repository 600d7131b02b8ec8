"""Generate one environment per model and compare their moment reports.

The moment condition 1/p + 1/q < 2/d holds empirically for the admissible
models and fails for the trap, whose power means blow up with the torus size.
"""

from __future__ import annotations

from dhlab.env import MODELS, EnvironmentSpec, generate_environment, moment_report

P, Q = 4.0, 4.0

for model in MODELS:
    print(f"\n{model}")
    for N in (32, 64, 128):
        sample = generate_environment(EnvironmentSpec(N=N, model=model, seed=1))
        rep = moment_report(sample, P, Q)
        print(f"  N={N:4d}  mean Lambda^p {rep.mean_Lambda_p:10.3g}  mean lambda^-q {rep.mean_lambda_inv_q:10.3g}"
              f"  a_Lambda {rep.mean_Lambda:7.3f}")
