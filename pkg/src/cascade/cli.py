"""Command-line entry point: ``cascade <command> --config run.json``.

Exit status: 0 success, 1 invalid configuration, 2 a check failed its threshold.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .attack import (AttackResult, PassCapExceeded, ShardObservation, estimate_cost,
                     layer0_meu_attack, view_from_cluster, vocab_match)
from .netsim import NetworkParams, Router, measure_run
from .protocol import Cascade, assemble_logits, cascade_forward, cascade_generate
from .sharding import (AttackBudget, ShardPlan, all_nodes, build_plan, collusion_union,
                       gap_profile, node_indices, node_label, validate_plan)
from .toy_model import ModelConfig, forward_full, greedy_decode, new_model

SCHEMA_VERSION = "1.0"
COMMANDS = ("verify", "bench", "attack", "security-report", "generate")
VERIFY_TOL = 1e-9

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "artifact_version", "command", "config", "results",
                 "passed", "elapsed_s"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "artifact_version": {"type": "string"},
        "command": {"enum": list(COMMANDS)},
        "config": {"type": "object", "required": ["model", "plan", "network", "attack", "run"]},
        "results": {"type": "object"},
        "passed": {"type": "boolean"},
        "elapsed_s": {"type": "number", "minimum": 0},
    },
    "additionalProperties": False,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PlanSpec:
    N: int
    c: int = 1
    alpha: int = 2
    m: int | str = 1
    explicit: ShardPlan | None = None

    def build(self, N: int | None = None) -> ShardPlan:
        if self.explicit is not None:
            return self.explicit if N is None else self.explicit.restrict(N)
        return build_plan(self.N if N is None else N, self.c, self.alpha, self.m)

    def with_alpha(self, alpha: int) -> "PlanSpec":
        return replace(self, alpha=alpha, explicit=None)

    def to_dict(self) -> dict:
        if self.explicit is not None:
            return {"explicit": self.explicit.to_dict()}
        return {"N": self.N, "c": self.c, "alpha": self.alpha, "m": self.m}


@dataclass(frozen=True)
class RunOptions:
    prompt: tuple[int, ...] | None = None
    prompt_seed: int = 0
    n_new: int = 8
    trials: int = 1
    attack_layer: int = 1
    betas: tuple[int, ...] | None = None

    def to_dict(self) -> dict:
        return {"prompt": None if self.prompt is None else list(self.prompt),
                "prompt_seed": self.prompt_seed, "n_new": self.n_new, "trials": self.trials,
                "attack_layer": self.attack_layer,
                "betas": None if self.betas is None else list(self.betas)}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    seed: int
    plan: PlanSpec
    network: NetworkParams = field(default_factory=NetworkParams)
    budget: AttackBudget = field(default_factory=lambda: AttackBudget.from_rho(3))
    V0_size: int | None = None
    run: RunOptions = field(default_factory=RunOptions)

    def to_dict(self) -> dict:
        return {
            "model": {**self.model.to_dict(), "seed": self.seed},
            "plan": self.plan.to_dict(),
            "network": self.network.to_dict(),
            "attack": {"rho": self.budget.rho, "pass_cap": self.budget.pass_cap,
                       "V0_size": self.V0_size},
            "run": self.run.to_dict(),
        }


# ---------------------------------------------------------------------------
# loading


def _strip_comments(obj):
    if isinstance(obj, dict):
        return {k: _strip_comments(v) for k, v in obj.items()
                if not (k.startswith("_") or k.startswith("//"))}
    if isinstance(obj, list):
        return [_strip_comments(v) for v in obj]
    return obj


def _section(raw: dict, name: str, required: bool) -> dict:
    sec = raw.get(name)
    if sec is None:
        if required:
            raise ConfigError(f"missing required section {name!r}")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be an object")
    return sec


def _take(sec: dict, allowed: set[str], where: str) -> dict:
    extra = set(sec) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(extra)}")
    return sec


def config_from_dict(raw: dict) -> RunConfig:
    raw = _strip_comments(raw)
    _take(raw, {"model", "plan", "network", "attack", "run"}, "config")
    try:
        msec = dict(_section(raw, "model", True))
        seed = int(msec.pop("seed", 0))
        model = ModelConfig(**msec)

        psec = _section(raw, "plan", True)
        if "explicit" in psec:
            plan = ShardPlan.from_dict(psec["explicit"])
            problems = validate_plan(plan)
            if problems:
                raise ConfigError("invalid explicit plan: " + "; ".join(problems))
            pspec = PlanSpec(N=plan.N, c=plan.c, alpha=plan.alpha, m=plan.m, explicit=plan)
        else:
            _take(psec, {"N", "c", "alpha", "m"}, "plan")
            pspec = PlanSpec(**psec)
            pspec.build()  # surfaces plan errors at load time
        plan_obj = pspec.build()
        if plan_obj.N > model.max_seq:
            raise ConfigError(f"plan N={plan_obj.N} exceeds max_seq={model.max_seq}")

        net = NetworkParams(**_take(_section(raw, "network", False), {"B", "tau", "F"},
                                    "network"))
        asec = _take(_section(raw, "attack", False), {"rho", "pass_cap", "V0_size"}, "attack")
        rho = int(asec.get("rho", 3))
        if rho < 1:
            raise ConfigError("attack.rho must be >= 1")
        pass_cap = int(asec.get("pass_cap", 10**7))
        if pass_cap < 1:
            raise ConfigError("attack.pass_cap must be >= 1")
        budget = AttackBudget.from_rho(rho, pass_cap)
        V0 = asec.get("V0_size")

        rsec = _take(_section(raw, "run", False),
                     {"prompt", "prompt_seed", "n_new", "trials", "attack_layer", "betas"}, "run")
        prompt = rsec.get("prompt")
        if prompt is not None:
            prompt = tuple(int(t) for t in prompt)
            if not prompt or any(not 0 <= t < model.V for t in prompt):
                raise ConfigError(f"run.prompt must be nonempty ids in [0, {model.V})")
            if len(prompt) > plan_obj.N:
                raise ConfigError(f"run.prompt longer than plan N={plan_obj.N}")
        betas = rsec.get("betas")
        run = RunOptions(prompt=prompt, prompt_seed=int(rsec.get("prompt_seed", 0)),
                         n_new=int(rsec.get("n_new", 8)), trials=int(rsec.get("trials", 1)),
                         attack_layer=int(rsec.get("attack_layer", 1)),
                         betas=None if betas is None else tuple(int(b) for b in betas))
        if run.trials < 1 or run.n_new < 0:
            raise ConfigError("run.trials must be >= 1 and run.n_new >= 0")
        if not 0 <= run.attack_layer <= model.num_layers:
            raise ConfigError(f"run.attack_layer outside [0, {model.num_layers}]")
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(model, seed, pspec, net, budget, V0, run)


def load_config(path: str | Path) -> RunConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        line = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# commands


def _prompts(cfg: RunConfig, N: int, count: int) -> list[list[int]]:
    if cfg.run.prompt is not None:
        return [list(cfg.run.prompt)] * count
    rng = np.random.default_rng(cfg.run.prompt_seed)
    return [rng.integers(0, cfg.model.V, N).tolist() for _ in range(count)]


def cmd_verify(cfg: RunConfig, model) -> tuple[dict, bool, list[dict]]:
    plan = cfg.plan.build()
    rows = []
    for t, prompt in enumerate(_prompts(cfg, plan.N, cfg.run.trials)):
        p = plan.restrict(len(prompt))
        got = assemble_logits(cascade_forward(model, p, prompt), len(prompt))
        ref = forward_full(model, prompt)
        err = float(np.abs(got - ref).max() / max(np.abs(ref).max(), 1e-300))
        rows.append({"trial": t, "n_tokens": len(prompt), "max_rel_error": err})
    worst = max(r["max_rel_error"] for r in rows)
    ok = worst < VERIFY_TOL
    return {"trials": rows, "max_rel_error": worst, "tolerance": VERIFY_TOL}, ok, rows


def cmd_bench(cfg: RunConfig, model) -> tuple[dict, bool, list[dict]]:
    specs = ([cfg.plan] if cfg.run.betas is None
             else [cfg.plan.with_alpha(b // (cfg.plan.m if isinstance(cfg.plan.m, int) else 1))
                   for b in cfg.run.betas])
    runs, rows, ok = [], [], True
    for spec in specs:
        plan = spec.build()
        (prompt,) = _prompts(cfg, plan.N, 1)
        plan = plan.restrict(len(prompt))
        router = Router()
        cascade_forward(model, plan, prompt, router)
        rep = measure_run(router.trace, cfg.network, cfg.model, plan)
        exact = rep.total_bytes == rep.predicted_bytes
        bound = 2 * plan.alpha * plan.beta ** 2
        ok &= exact and max(rep.rounds_per_layer) <= bound
        runs.append({"alpha": plan.alpha, "beta": plan.beta, "m": plan.m, "N": plan.N,
                     "bytes_match": exact, "round_bound": bound, "report": rep.to_dict()})
        for layer, b in enumerate(rep.per_layer_bytes):
            rows.append({"beta": plan.beta, "layer": layer, "bytes": b,
                         "predicted_bytes": rep.predicted_per_layer_bytes,
                         "rounds": rep.rounds_per_layer[layer]})
    return {"runs": runs}, ok, rows


def _attack_entry(kind: str, node: str, fn) -> dict:
    try:
        res: AttackResult = fn()
    except PassCapExceeded as exc:
        return {"kind": kind, "node": node, "error": str(exc), "result": exc.partial.to_dict()}
    return {"kind": kind, "node": node, "result": res.to_dict()}


def cmd_attack(cfg: RunConfig, model) -> tuple[dict, bool, list[dict]]:
    plan = cfg.plan.build()
    (prompt,) = _prompts(cfg, plan.N, 1)
    plan = plan.restrict(len(prompt))
    cluster = Cascade(model, plan)
    cluster.forward(prompt)
    layer = cfg.run.attack_layer
    hidden = cluster.hidden_rows(layer)
    entries = []
    for i, R in enumerate(plan.R, start=1):
        obs = ShardObservation(layer, R, hidden[np.asarray(R) - 1])
        entries.append(_attack_entry("vocab_match", f"C{i}",
                                     lambda: vocab_match(model, obs, cfg.budget, prompt)))
        view = view_from_cluster(cluster, i, 0)
        entries.append(_attack_entry("layer0_meu", f"C{i}",
                                     lambda: layer0_meu_attack(model, view, cfg.budget, prompt)))
    rows = []
    for e in entries:
        for g in e["result"]["gaps"]:
            rows.append({"kind": e["kind"], "node": e["node"],
                         "indices": " ".join(map(str, g["indices"])), "executed": g["executed"],
                         "distance": g["distance"], "margin": g["margin"],
                         "matched": g["matched"]})
    return {"prompt": prompt, "attacks": entries}, True, rows


def cmd_security(cfg: RunConfig, model) -> tuple[dict, bool, list[dict]]:
    plan = cfg.plan.build()
    V = cfg.model.V
    nodes, rows = [], []
    for n in all_nodes(plan):
        idx = node_indices(plan, n)
        est = estimate_cost(idx, V, cfg.budget, cfg.V0_size)
        entry = {"node": node_label(n), "size": len(idx),
                 "profile": gap_profile(idx).to_dict(), "cost": est.to_dict()}
        nodes.append(entry)
        rows.append({"node": entry["node"], "size": len(idx), "max_gap": est.max_gap,
                     "feasible": est.feasibility.feasible, "log10_cost": est.cost.log10})
    pairs = [collusion_union(plan, [a, b], cfg.budget).to_dict()
             for a, b in itertools.combinations(all_nodes(plan), 2)]
    summary = {"nodes_feasible": sum(r["feasible"] for r in rows),
               "pairs_feasible": sum(bool(p["feasible"]) for p in pairs),
               "rho": cfg.budget.rho}
    return {"plan": plan.to_dict(), "nodes": nodes, "collusion_pairs": pairs,
            "summary": summary}, True, rows


def cmd_generate(cfg: RunConfig, model) -> tuple[dict, bool, list[dict]]:
    n_new = cfg.run.n_new
    base = cfg.plan.build()
    (prompt,) = _prompts(cfg, base.N, 1)
    if cfg.run.prompt is None:
        prompt = prompt[: max(1, base.N - n_new)]
    total = len(prompt) + n_new
    if total > cfg.model.max_seq:
        raise ConfigError(f"prompt + n_new = {total} exceeds max_seq")
    plan = cfg.plan.build(max(total, base.N)) if cfg.plan.explicit is None else base
    res = cascade_generate(model, plan, prompt, n_new)
    ref = greedy_decode(model, prompt, n_new)
    rows = [{"step": s, "comp_nodes": len(c), "attn_nodes": len(a)}
            for s, (c, a) in enumerate(res.active, start=1)]
    shape_ok = all(r["comp_nodes"] == 1 and r["attn_nodes"] == plan.beta for r in rows)
    ok = res.tokens == ref and shape_ok
    return {"prompt": prompt, "cascade_tokens": res.tokens, "reference_tokens": ref,
            "equal": res.tokens == ref, "active_per_step": rows,
            "active_ok": shape_ok}, ok, rows


HANDLERS = {"verify": cmd_verify, "bench": cmd_bench, "attack": cmd_attack,
            "security-report": cmd_security, "generate": cmd_generate}


@dataclass
class Report:
    command: str
    config: dict
    results: dict
    passed: bool
    elapsed_s: float
    rows: list[dict] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "artifact_version": __version__,
                "command": self.command, "config": self.config, "results": self.results,
                "passed": self.passed, "elapsed_s": self.elapsed_s}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, tuple)):
        return sorted(o) if isinstance(o, set) else list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def validate_report(doc: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if ``doc`` violates the report schema."""
    import jsonschema

    jsonschema.validate(doc, REPORT_SCHEMA)


def run_command(cfg: RunConfig, command: str) -> Report:
    if command not in HANDLERS:
        raise ValueError(f"unknown command {command!r}")
    start = time.perf_counter()
    model = new_model(cfg.model, cfg.seed)
    try:
        results, ok, rows = HANDLERS[command](cfg, model)
    except ConfigError:
        raise
    except Exception as exc:
        raise RuntimeError(f"{command}: {exc}") from exc
    # round-trip through JSON so numpy scalars never leak into the document
    results = json.loads(json.dumps(results, default=_json_default))
    return Report(command, cfg.to_dict(), results, bool(ok), time.perf_counter() - start, rows)


def write_csv(rows: list[dict], path: str | Path) -> None:
    keys: list[str] = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="cascade", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", help="write the JSON report here (default: stdout)")
    ap.add_argument("--trials", type=int, help="override run.trials")
    ap.add_argument("--csv", help="also write a flat CSV table here")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.trials is not None:
            if args.trials < 1:
                raise ConfigError("--trials must be >= 1")
            cfg = replace(cfg, run=replace(cfg.run, trials=args.trials))
        report = run_command(cfg, args.command)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    doc = report.to_dict()
    try:
        validate_report(doc)
    except ImportError:
        pass
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    if args.csv:
        write_csv(report.rows, args.csv)
    if not report.passed:
        print(f"{args.command}: threshold check failed", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
