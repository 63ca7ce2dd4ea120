"""A tour of the robust aggregation rules.

We draw an honest cloud of client vectors, add a few adversarial ones and
look at how far each rule lands from the honest mean, compared with the
worst case its robustness coefficient allows.
"""

import numpy as np

from robustopt import AggregatorSpec, verify_robustness

rng = np.random.default_rng(0)
n, f, d = 10, 1, 5

honest = rng.standard_normal((n - f, d))
# the adversaries agree on one far-away vector
byzantine = np.tile(honest.mean(axis=0) + 25.0, (f, 1))
X = np.vstack([honest, byzantine])

mean = honest.mean(axis=0)
var = np.mean(np.sum((honest - mean) ** 2, axis=1))
print(f"honest variance: {var:.3f}\n")
print(f"{'rule':<14}{'||agg - mean||^2':>18}{'nu * var':>12}")
for rule in ("mean", "cwtm", "cwm", "gm", "krum", "nnm+cwtm", "frg(gts)+gm"):
    f_rule = 0 if rule == "mean" else f
    try:
        spec = AggregatorSpec.parse(rule, f_rule)
        nu = spec.coefficient(n)
    except ValueError as exc:  # nnm past its breakdown point
        print(f"{rule:<14}{'n/a':>18}  ({exc})")
        continue
    err = float(np.sum((spec(X) - mean) ** 2))
    print(f"{rule:<14}{err:>18.4f}{nu * var:>12.3f}")

# The coefficient is a worst case over every honest subset of size n - f.
# verify_robustness enumerates them all.
check = verify_robustness(AggregatorSpec.parse("cwtm", f), X)
print(f"\ncwtm: worst subset ratio {check.worst_ratio:.3f} <= nu {check.nu:.3f}: {check.holds}")
