"""How often does vocab matching on full hidden rows pick a wrong token at toy scale?"""
import argparse

import numpy as np

from cascade.attack import COLLISION, observe, vocab_match
from cascade.sharding import AttackBudget
from cascade.toy_model import ModelConfig, new_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=200)
    ap.add_argument("--V", type=int, default=32)
    ap.add_argument("--d-emb", type=int, default=16)
    ap.add_argument("--length", type=int, default=6)
    ap.add_argument("--layers", type=int, nargs="+", default=[1, 2])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    cfg = ModelConfig(num_layers=max(args.layers), d_emb=args.d_emb, H=4, H_KV=2,
                      d=args.d_emb // 4, V=args.V, mlp_hidden=2 * args.d_emb,
                      max_seq=args.length)
    budget = AttackBudget.from_rho(2)
    wrong, margins = {L: 0 for L in args.layers}, {L: [] for L in args.layers}
    for _ in range(args.trials):
        model = new_model(cfg, int(rng.integers(2**32)))
        prompt = rng.integers(0, args.V, args.length).tolist()
        for L in args.layers:
            res = vocab_match(model, observe(model, prompt, range(1, args.length + 1), L),
                              budget, prompt)
            wrong[L] += res.status == COLLISION
            margins[L].extend(g.margin for g in res.gaps)
    for L in args.layers:
        print(f"layer {L}: {wrong[L]}/{args.trials} prompts mis-recovered, "
              f"smallest runner-up margin {min(margins[L]):.3e}")


if __name__ == "__main__":
    main()
