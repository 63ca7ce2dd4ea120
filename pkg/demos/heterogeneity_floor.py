"""Why robust training stalls: heterogeneity sets an error floor.

Honest clients hold quadratics with the same curvature but different
minimizers. Under attack, robust gd stops at a loss gap that grows like
G^2, as does the guarantee nu G^2 / (2 mu). The lower bound from (G, B) is a
worst case over instances: some instance forces every algorithm above it,
but this particular one (with this attack) can sit below it.
"""

import math

from robustopt.harness import ExperimentConfig, run_experiment
from robustopt.problems import byzantine_bounds

for het in (0.25, 0.5, 1.0, 2.0):
    cfg = ExperimentConfig(name=f"het={het}", problem="quadratic", dim=10, cond=10.0,
                           heterogeneity=het, n=10, f=1, aggregator="cwtm",
                           attack="alie:ls", optimizer="gd", K=500)
    tr = run_experiment(cfg)
    G2, B2, nu = tr.info["G2"], tr.info["B2"], tr.info["nu"]
    mu = 1.0  # smallest eigenvalue of the generated Hessian
    floor = byzantine_bounds(math.sqrt(G2), math.sqrt(B2), mu, cfg.f, cfg.n).value_bound
    print(f"{cfg.name:<10} plateau {tr.plateau():.4g}   lower bound {floor:.4g}   "
          f"nu G^2/(2 mu) {nu * G2 / (2 * mu):.4g}   bound violations {tr.info['lemma1_violations']}")
