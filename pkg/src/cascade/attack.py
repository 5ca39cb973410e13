"""Adversaries against sharded hidden states.

* :func:`vocab_match` - prefix-extension search over hidden rows observed at
  a subset of indices; cost is ``sum(V**gap)``.
* :func:`layer0_meu_attack` - a layer-0 CompNode turning the (m, e, u) slices
  it receives into per-gap sums over unknown tokens and matching them by
  enumeration.
* :func:`subset_decomposition_check` - confirms that each received row is a
  sum of per-position vocabulary tables selected by the true tokens.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .protocol import Cascade, cascade_layer, gather_slices
from .sharding import (AttackBudget, BigCost, Feasibility, ShardPlan, as_index_set,
                       feasibility, vocab_matching_cost)
from .toy_model import ModelWeights, forward_batch, project_qkv, repeat_kv

RECOVERED = "recovered"
INFEASIBLE = "infeasible_budget"
COLLISION = "collision_suspected"

MATCH_TOL = 1e-6  # per coordinate of the matched vector
_CHUNK = 4096


class PassCapExceeded(RuntimeError):
    def __init__(self, message: str, partial: "AttackResult"):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class ShardObservation:
    layer: int
    indices: tuple[int, ...]
    rows: np.ndarray  # (k, d_emb)

    def __post_init__(self):
        as_index_set(self.indices)
        if len(self.rows) != len(self.indices):
            raise ValueError(f"{len(self.rows)} rows for {len(self.indices)} indices")


@dataclass
class GapOutcome:
    indices: tuple[int, ...]  # unknown positions searched
    anchor: int  # index whose observation is matched
    executed: bool
    distance: float | None = None
    margin: float | None = None  # runner-up distance minus best
    matched: bool | None = None
    tokens: tuple[int, ...] | None = None
    collision: bool = False
    reason: str = ""

    def to_dict(self) -> dict:
        return {"indices": list(self.indices), "anchor": self.anchor, "executed": self.executed,
                "distance": self.distance, "margin": self.margin, "matched": self.matched,
                "tokens": None if self.tokens is None else list(self.tokens),
                "collision": self.collision, "reason": self.reason}


@dataclass
class AttackResult:
    status: str
    tokens: dict[int, int]  # 1-based index -> recovered token id
    forward_pass_count: int
    gaps: list[GapOutcome] = field(default_factory=list)
    note: str = ""

    def sequence(self) -> list[int]:
        """Recovered tokens in index order (only meaningful for a full prefix)."""
        return [self.tokens[i] for i in sorted(self.tokens)]

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "tokens": {str(k): v for k, v in sorted(self.tokens.items())},
            "forward_pass_count": self.forward_pass_count,
            "gaps": [g.to_dict() for g in self.gaps],
            "note": self.note,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _tuples(V: int, width: int, start: int, stop: int) -> np.ndarray:
    """Rows ``start..stop-1`` of the lexicographic enumeration of [0, V)^width."""
    idx = np.arange(start, stop, dtype=np.int64)
    return np.stack(np.unravel_index(idx, (V,) * width), axis=1) if width else idx[:, None][:, :0]


def _argmin_two(dist: np.ndarray, best, second):
    """Fold a chunk of distances into (best_dist, best_pos, second_dist)."""
    best_d, best_i = best
    pos = int(np.argmin(dist))
    d0 = float(dist[pos])
    rest = np.delete(dist, pos)
    d1 = float(rest.min()) if rest.size else np.inf
    if d0 < best_d:
        return (d0, pos), min(best_d, d1)
    return (best_d, best_i), min(second, d0)


# ---------------------------------------------------------------------------
# vocab matching on hidden rows


def vocab_match(model: ModelWeights, obs: ShardObservation, budget: AttackBudget,
                ground_truth: Sequence[int] | None = None) -> AttackResult:
    """Recover the first ``i_k`` tokens from hidden rows at indices ``i_1 < ... < i_k``.

    Gaps are processed in order; each enumerates every ``V**gap`` tuple that
    extends the recovered prefix and keeps the first strict L1 minimizer
    against the observed row. The search stops at the first gap above
    ``budget.t_max``.
    """
    V = model.config.V
    if not 0 <= obs.layer <= model.config.num_layers:
        raise ValueError(f"layer {obs.layer} outside [0, {model.config.num_layers}]")
    tol = MATCH_TOL * obs.rows.shape[1]
    prefix: list[int] = []
    passes = 0
    outcomes: list[GapOutcome] = []
    prev = 0
    status = RECOVERED
    truth_ok = ground_truth is not None
    for anchor, target in zip(obs.indices, obs.rows):
        gap = anchor - prev
        span = tuple(range(prev + 1, anchor + 1))
        if gap > budget.t_max:
            outcomes.append(GapOutcome(span, anchor, False,
                                       reason=f"gap {gap} > t_max {budget.t_max}"))
            status = INFEASIBLE
            break
        total = V ** gap
        if passes + total > budget.pass_cap:
            partial = AttackResult(status, dict(enumerate(prefix, 1)), passes, outcomes,
                                   note="pass cap reached")
            raise PassCapExceeded(f"gap at {span} needs {total} passes; cap {budget.pass_cap}",
                                  partial)
        best, second = (np.inf, -1), np.inf
        true_dist = None
        true_code = None
        if truth_ok:
            true_code = int(np.ravel_multi_index(tuple(ground_truth[prev:anchor]), (V,) * gap))
        for start in range(0, total, _CHUNK):
            stop = min(total, start + _CHUNK)
            cand = _tuples(V, gap, start, stop)
            batch = np.concatenate([np.broadcast_to(np.asarray(prefix, dtype=np.int64),
                                                    (len(cand), len(prefix))), cand], axis=1)
            g = forward_batch(model, batch, obs.layer)[:, -1, :]
            dist = np.abs(g - target).sum(axis=1)
            (d0, p0), second = _argmin_two(dist, best, second)
            if d0 < best[0]:
                best = (d0, start + p0)
            if true_code is not None and start <= true_code < stop:
                true_dist = float(dist[true_code - start])
        passes += total
        tokens = tuple(int(x) for x in np.unravel_index(best[1], (V,) * gap))
        out = GapOutcome(span, anchor, True, distance=best[0], margin=second - best[0],
                         matched=best[0] < tol, tokens=tokens)
        if not out.matched:
            out.reason = "no candidate within tolerance"
            status = COLLISION
        elif second < tol:
            out.reason = "runner-up also within tolerance"
            status = COLLISION
        if truth_ok and tokens != tuple(ground_truth[prev:anchor]):
            # the true tuple was enumerated too, so best <= true is the certificate
            out.collision = true_dist is not None and best[0] <= true_dist
            status = COLLISION
            truth_ok = False
        outcomes.append(out)
        prefix.extend(tokens)
        prev = anchor
    return AttackResult(status, dict(enumerate(prefix, 1)), passes, outcomes)


def observe(model: ModelWeights, tokens: Sequence[int], indices: Sequence[int],
            layer: int) -> ShardObservation:
    """Hidden rows a holder of ``indices`` sees at ``layer`` for prompt ``tokens``."""
    idx = as_index_set(indices, len(tokens))
    h = forward_batch(model, np.asarray(tokens)[None], layer)[0]
    return ShardObservation(layer, idx, h[np.asarray(idx) - 1])


# ---------------------------------------------------------------------------
# layer-0 CompNode view


@dataclass
class CompNodeView:
    """What CompNode ``i`` holds after the layer-0 attention exchange."""

    i: int
    R: tuple[int, ...]
    tokens: dict[int, int]
    S: tuple[tuple[int, ...], ...]
    m: dict[int, np.ndarray]  # k -> (H, |R_i|)
    e: dict[int, np.ndarray]
    u: dict[int, np.ndarray]  # k -> (H, |R_i|, d)
    masked: dict[int, np.ndarray]  # k -> (|R_i|,)


def view_from_cluster(cluster: Cascade, i: int, layer: int = 0) -> CompNodeView:
    node = cluster.comp[i]
    if layer not in node.received:
        raise ValueError(f"CompNode {i} has no slices for layer {layer}")
    n = cluster.n_tokens
    m, e, u, masked = {}, {}, {}, {}
    for k, s in enumerate(cluster.plan.S, start=1):
        if not s or s[0] > n:
            continue
        m[k], e[k], u[k], masked[k] = gather_slices(node.received[layer], k, node.R, node.label)
    S = tuple(tuple(x for x in s if x <= n) for s in cluster.plan.S)
    return CompNodeView(i, tuple(int(r) for r in node.R), dict(node.tokens), S, m, e, u, masked)


def layer0_view(model: ModelWeights, plan: ShardPlan, prompt: Sequence[int], i: int) -> CompNodeView:
    cluster = Cascade(model, plan)
    cluster.load(prompt)
    cascade_layer(cluster, 0)
    return view_from_cluster(cluster, i, 0)


def layer0_expsum_values(view: CompNodeView) -> dict[int, np.ndarray]:
    """k -> (|R_i|, H) row expsums ``e * exp(m)``; zero on sentinel rows."""
    out = {}
    for k in view.m:
        ok = ~view.masked[k][None, :]
        out[k] = np.where(ok, view.e[k] * np.exp(np.where(ok, view.m[k], 0.0)), 0.0).T
    return out


def layer0_f_values(view: CompNodeView) -> dict[int, np.ndarray]:
    """k -> (|R_i|, H, d): ``u * e * exp(m)``, i.e. sum over the causal prefix of S_k of
    ``exp(q_r . k_s) v_s``. Sentinel rows (empty prefix) are zero vectors."""
    out = {}
    for k in view.m:
        ok = ~view.masked[k][None, :]
        scale = np.where(ok, view.e[k] * np.exp(np.where(ok, view.m[k], 0.0)), 0.0)
        out[k] = np.transpose(view.u[k] * scale[..., None], (1, 0, 2))
    return out


def layer0_b_values(view: CompNodeView) -> dict[int, np.ndarray]:
    """k -> (|R_i|, H, d+1): expsum concatenated with the f vector."""
    es = layer0_expsum_values(view)
    fs = layer0_f_values(view)
    return {k: np.concatenate([es[k][..., None], fs[k]], axis=-1) for k in fs}


def _layer0_q(model: ModelWeights, token: int, index: int) -> np.ndarray:
    q, _, _ = project_qkv(model, 0, model.embedding[[token]], np.array([index - 1]))
    return q[:, 0, :]  # (H, d)


def term_table(model: ModelWeights, q_row: np.ndarray, index: int) -> np.ndarray:
    """(V, H, d+1): for every vocabulary token placed at ``index``, the vector
    ``[exp(q.k), exp(q.k) v]`` it contributes to a layer-0 row with query ``q_row``."""
    cfg = model.config
    pos = np.full(cfg.V, index - 1)
    _, k, v = project_qkv(model, 0, model.embedding, pos)  # (H_KV, V, d)
    k = repeat_kv(k, cfg.group)
    v = repeat_kv(v, cfg.group)
    w = np.exp(np.einsum("hd,hvd->vh", q_row, k))  # (V, H)
    return np.concatenate([w[..., None], w[..., None] * np.transpose(v, (1, 0, 2))], axis=-1)


def f_direct(model: ModelWeights, tokens: Sequence[int], r: int, S: Sequence[int]) -> np.ndarray:
    """Direct evaluation of ``sum_{s in S} exp(q_r . k_s) v_s`` at layer 0, (H, d)."""
    cfg = model.config
    q = _layer0_q(model, tokens[r - 1], r)
    out = np.zeros((cfg.H, cfg.d))
    for s in S:
        _, k, v = project_qkv(model, 0, model.embedding[[tokens[s - 1]]], np.array([s - 1]))
        k = repeat_kv(k, cfg.group)[:, 0]
        v = repeat_kv(v, cfg.group)[:, 0]
        out += np.exp(np.sum(q * k, axis=-1))[:, None] * v
    return out


def meu_gaps(R: Sequence[int], S_k: Sequence[int]) -> list[tuple[int, tuple[int, ...]]]:
    """(anchor r_{l+1}, unknown indices of S_k strictly between r_l and r_{l+1})."""
    out = []
    prev = 0
    Rset = set(R)
    for r in sorted(R):
        gap = tuple(s for s in S_k if prev < s < r and s not in Rset)
        out.append((r, gap))
        prev = r
    return out


def layer0_meu_attack(model: ModelWeights, view: CompNodeView, budget: AttackBudget,
                      ground_truth: Sequence[int] | None = None) -> AttackResult:
    """Recover unknown tokens sitting in small gaps of each S_k between consecutive R_i indices.

    For gap (k, l) the received slice for row r_{l+1} gives the exact value of
    ``sum_{s in S_k, s <= r_{l+1}} [exp(q.k_s), exp(q.k_s) v_s]``. Subtracting
    the contributions of known (and previously recovered) tokens leaves a sum
    over the gap's unknown tokens only, which is matched by enumerating all
    ``V**|gap|`` fillings. A gap of size >= rho is skipped and blocks later
    gaps of the same shard, whose residual would still contain its tokens.
    """
    V = model.config.V
    b_vals = layer0_b_values(view)
    row_of = {r: n for n, r in enumerate(view.R)}
    known = dict(view.tokens)
    passes = 0
    outcomes: list[GapOutcome] = []
    recovered: dict[int, int] = {}
    collision = False
    for k in sorted(b_vals):
        S_k = view.S[k - 1]
        blocked = False
        for anchor, gap in meu_gaps(view.R, S_k):
            if not gap:
                continue
            if blocked:
                outcomes.append(GapOutcome(gap, anchor, False, reason="blocked by earlier gap"))
                continue
            if len(gap) > budget.t_max:
                outcomes.append(GapOutcome(gap, anchor, False,
                                           reason=f"gap size {len(gap)} >= rho {budget.rho}"))
                blocked = True
                continue
            total = V ** len(gap)
            if passes + total > budget.pass_cap:
                partial = AttackResult(RECOVERED if recovered else INFEASIBLE, recovered, passes,
                                       outcomes, note="pass cap reached")
                raise PassCapExceeded(f"gap {gap} needs {total} candidates", partial)
            q_row = _layer0_q(model, known[anchor], anchor)
            target = b_vals[k][row_of[anchor]].copy()
            for s in S_k:
                if s > anchor or s in gap:
                    continue
                target -= term_table(model, q_row, s)[known[s]]
            tables = [term_table(model, q_row, s) for s in gap]
            tol = MATCH_TOL * target.size
            best, second = (np.inf, -1), np.inf
            hits = 0
            for start in range(0, total, _CHUNK):
                stop = min(total, start + _CHUNK)
                cand = _tuples(V, len(gap), start, stop)
                acc = sum(t[cand[:, n]] for n, t in enumerate(tables))
                dist = np.abs(acc - target).reshape(len(cand), -1).sum(axis=1)
                hits += int(np.count_nonzero(dist < tol))
                (d0, p0), second = _argmin_two(dist, best, second)
                if d0 < best[0]:
                    best = (d0, start + p0)
            passes += total
            tokens = tuple(int(x) for x in np.unravel_index(best[1], (V,) * len(gap)))
            out = GapOutcome(gap, anchor, True, distance=best[0], margin=second - best[0],
                             matched=best[0] < tol, tokens=tokens)
            if hits > 1:
                out.collision = True
                out.reason = f"{hits} fillings within tolerance"
                collision = True
            if ground_truth is not None and tokens != tuple(ground_truth[s - 1] for s in gap):
                out.collision = True
                collision = True
            outcomes.append(out)
            if not out.matched:
                out.reason = "no filling within tolerance"
                blocked = True
                continue
            for s, t in zip(gap, tokens):
                known[s] = t
                recovered[s] = t
    if collision:
        status = COLLISION
    elif recovered:
        status = RECOVERED
    else:
        status = INFEASIBLE
    note = "" if outcomes else "no unknown tokens reachable through received slices"
    return AttackResult(status, recovered, passes, outcomes, note=note)


# ---------------------------------------------------------------------------
# subset-sum structure


@dataclass
class DecompositionCheck:
    passed: bool
    witness: dict[int, int]  # index in S_k -> vocabulary id selected
    max_error: float
    rows_checked: int


def subset_decomposition_check(model: ModelWeights, plan: ShardPlan, prompt: Sequence[int],
                               i: int, k: int, selection: dict[int, int] | None = None,
                               tol: float = 1e-9) -> DecompositionCheck:
    """Check every row of ``[expsum(a), exp(a) v]`` for (R_i, S_k) equals the sum of
    per-position vocabulary tables picked out by ``selection`` (default: the true tokens).
    """
    V = model.config.V
    if V > 64:
        raise ValueError(f"V={V} too large to materialize vocabulary tables (limit 64)")
    view = layer0_view(model, plan, prompt, i)
    n = len(prompt)
    S_k = tuple(s for s in plan.S[k - 1] if s <= n)
    witness = {s: int(prompt[s - 1]) for s in S_k}
    if selection is not None:
        witness.update({int(s): int(t) for s, t in selection.items()})
    b = layer0_b_values(view).get(k)
    worst = 0.0
    for row, r in enumerate(view.R):
        prefix = [s for s in S_k if s <= r]
        got = b[row] if b is not None else np.zeros((model.config.H, model.config.d + 1))
        q_row = _layer0_q(model, int(prompt[r - 1]), r)
        total = np.zeros_like(got)
        for s in prefix:
            total += term_table(model, q_row, s)[witness[s]]
        scale = max(1.0, float(np.abs(got).max()))
        worst = max(worst, float(np.abs(total - got).max()) / scale)
    return DecompositionCheck(worst <= tol, witness, worst, len(view.R))


# ---------------------------------------------------------------------------
# cost


@dataclass
class CostEstimate:
    cost: BigCost
    dominant: BigCost
    max_gap: int
    feasibility: Feasibility
    restricted: BigCost | None = None
    V0: int | None = None

    def to_dict(self) -> dict:
        return {"cost": self.cost.to_dict(), "dominant": self.dominant.to_dict(),
                "max_gap": self.max_gap, "feasible": self.feasibility.feasible,
                "limiting_gap": self.feasibility.limiting_gap,
                "V0": self.V0,
                "restricted": self.restricted.to_dict() if self.restricted else None}


def estimate_cost(indices: Sequence[int], V: int, budget: AttackBudget,
                  V0: int | None = None) -> CostEstimate:
    cost = vocab_matching_cost(indices, V)
    from .sharding import gap_profile

    prof = gap_profile(indices)
    restricted = vocab_matching_cost(indices, V0) if V0 else None
    return CostEstimate(cost=cost, dominant=BigCost.of(V ** prof.max_gap), max_gap=prof.max_gap,
                        feasibility=feasibility(indices, budget), restricted=restricted, V0=V0)
