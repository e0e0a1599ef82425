"""
Fitting methods into a parameter budget
=======================================

Given a trainable-fraction budget, `budget_fit` searches each method's rank
(or token count) for the largest configuration that stays inside it.  This
is how different methods get compared fairly at matched budgets.
"""

import pointpeft as pp
from pointpeft.errors import InfeasibleBudgetError

config = pp.BackboneConfig(d=64, blocks=8, heads=4, num_classes=3)
print(f"backbone of {pp.init_backbone(config, 0).total_count} parameters\n")

for budget in (0.01, 0.05, 0.20):
    print(f"budget {100 * budget:.0f}%:")
    for method in pp.METHODS:
        try:
            fit = pp.budget_fit(method, budget, config)
        except InfeasibleBudgetError as exc:
            print(f"  {method:12s} infeasible ({exc})")
            continue
        frac = pp.trainable_fraction(fit, config)
        if method in ("linear", "bitfit"):
            knob = "-"  # nothing to size; the method either fits or not
        elif method == "prompt":
            knob = f"m={fit.tokens}"
        else:
            knob = f"r={fit.rank}"
        print(f"  {method:12s} {knob:6s} -> {100 * frac:.3f}% of weights train")
    print()

# below the linear-probe floor no method can fit: the head alone is too big
try:
    pp.budget_fit("linear", 1e-7, config)
except InfeasibleBudgetError as exc:
    print("tiny budget fails as expected:", exc)
