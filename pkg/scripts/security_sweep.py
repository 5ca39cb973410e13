"""Largest gap and vocab-matching cost per node for a grid of (c, alpha, m) plans."""
import argparse
import itertools

from cascade.attack import estimate_cost
from cascade.sharding import AttackBudget, all_nodes, build_plan, node_indices


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--N", type=int, default=256)
    ap.add_argument("--V", type=int, default=256000)
    ap.add_argument("--rho", type=int, default=3)
    args = ap.parse_args()
    budget = AttackBudget.from_rho(args.rho)
    # a node's exposure is its largest gap; report the weakest node of each kind
    print(f"{'c':>3} {'alpha':>5} {'m':>3} {'C max_gap':>9} {'A max_gap':>9} "
          f"{'min log10 cost':>14} {'feasible nodes':>14}")
    seen = set()
    for c, alpha, m in itertools.product([1, 2, 4, 8], [2, 4, 8], [1, "auto"]):
        try:
            plan = build_plan(args.N, c, alpha, m)
        except ValueError:
            continue
        if (c, alpha, plan.m) in seen:
            continue
        seen.add((c, alpha, plan.m))
        ests = {n: estimate_cost(node_indices(plan, n), args.V, budget) for n in all_nodes(plan)}
        comp = [e.max_gap for n, e in ests.items() if n[0] == "comp"]
        attn = [e.max_gap for n, e in ests.items() if n[0] == "attn"]
        feas = sum(e.feasibility.feasible for e in ests.values())
        print(f"{c:>3} {alpha:>5} {plan.m:>3} {min(comp):>9} {min(attn):>9} "
              f"{min(e.cost.log10 for e in ests.values()):>14.2f} {feas:>14}")


if __name__ == "__main__":
    main()
