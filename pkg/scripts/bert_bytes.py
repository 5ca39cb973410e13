"""Per-forward-pass communication volume for Bert-like attention geometry.

Prints the closed-form byte count next to the count measured from a real
sharded run (reduced residual width; payload size does not depend on it).
"""
import argparse

import numpy as np

from cascade.netsim import NetworkParams, Router, measure_run, predicted_comm_bytes
from cascade.protocol import cascade_forward
from cascade.sharding import build_plan
from cascade.toy_model import ModelConfig, new_model

GEOMETRY = {"bert-base": dict(num_layers=12, H=12, H_KV=12, d=64),
            "bert-large": dict(num_layers=24, H=16, H_KV=16, d=64)}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, default=128)
    ap.add_argument("--F", type=int, default=2)
    ap.add_argument("--betas", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--no-measure", action="store_true", help="formula only")
    args = ap.parse_args()
    params = NetworkParams(F=args.F)
    tokens = np.random.default_rng(0).integers(0, 32, args.N).tolist()
    print(f"{'model':<11} {'beta':>4} {'formula GB':>11} {'measured GB':>12} {'rounds/layer':>12}")
    for name, geo in GEOMETRY.items():
        cfg = ModelConfig(d_emb=64, V=32, mlp_hidden=16, max_seq=args.N, **geo)
        model = None if args.no_measure else new_model(cfg, 0)
        for beta in args.betas:
            plan = build_plan(args.N, 1, beta, 1)
            _, total = predicted_comm_bytes(cfg, plan, params)
            measured, rounds = "-", "-"
            if model is not None:
                r = Router()
                cascade_forward(model, plan, tokens, r)
                rep = measure_run(r.trace, params, cfg, plan)
                measured, rounds = f"{rep.total_gb:.4f}", str(rep.rounds_per_layer[0])
            print(f"{name:<11} {beta:>4} {total / 1e9:>11.4f} {measured:>12} {rounds:>12}")


if __name__ == "__main__":
    main()
