"""Transport plans on small cost matrices: entropic, exact and one-to-one."""

import numpy as np

from mpotseg.ot import (
    SinkhornConfig,
    exact_ot_oracle,
    hungarian_assignment,
    marginal_residual,
    plan_entropy,
    sinkhorn_plan,
    transport_cost,
    uniform_marginals,
)

np.set_printoptions(precision=4, suppress=True)
rng = np.random.default_rng(0)

# Five "pixels" and three "prompts". A pixel prefers the prompt with low cost.
cost = rng.uniform(size=(5, 3))
print("Cost matrix (5 pixels x 3 prompts):")
print(cost)

# Every plan below spreads 1/5 of the mass from each pixel and collects 1/3 at
# each prompt. The exact solver enumerates spanning trees, so it only handles
# tiny problems; it is the reference for the other two.
exact = exact_ot_oracle(cost)
print(f"\nExact optimum cost: {transport_cost(exact, cost):.5f}")
print(exact.values)

# Entropic plans are dense; shrinking epsilon pulls them toward the exact
# optimum while the marginal constraints stay satisfied.
print("\nSinkhorn plans as epsilon shrinks:")
for eps in (1.0, 0.1, 0.05, 0.01):
    plan = sinkhorn_plan(cost, cfg=SinkhornConfig(epsilon=eps, max_iter=5000))
    res = marginal_residual(plan, uniform_marginals(5, 3))
    print(f"  eps={eps:<5} cost={transport_cost(plan, cost):.5f} "
          f"entropy={plan_entropy(plan):+.4f} iterations={plan.iterations_used:4d} residual={res:.1e}")

# The assignment baseline matches pixels to prompts one-to-one inside chunks of
# three rows, so each pixel sends all of its mass to a single prompt.
hung = hungarian_assignment(cost)
print(f"\nChunked one-to-one assignment cost: {transport_cost(hung, cost):.5f}")
print(hung.values)

# With the default 100 iterations a solve may stop early; the plan then comes
# back flagged rather than raising.
hard = sinkhorn_plan(rng.uniform(size=(200, 4)) * 5, cfg=SinkhornConfig(epsilon=0.01))
print(f"\nHard problem: converged={hard.converged} after {hard.iterations_used} iterations")
