"""Token-sharded multi-party forward pass.

CompNodes hold hidden rows for their index set R_i and do every row-local
operation (norms, projections, RoPE, MLP, LM head). AttnNodes hold query and
key/value rows for a pair of shards {S_j, S_k} and return per-shard softmax
statistics ``(m, e, u)`` that CompNodes recombine exactly. Pairs are kept once
(j <= k); a node with j != k evaluates both the (S_j, S_k) and (S_k, S_j)
blocks.

All node-to-node traffic goes through a :class:`~cascade.netsim.Router`, one
envelope per (src, dst) per stage, so byte and round accounting falls out of
the trace.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .netsim import Envelope, MessageRecord, Router
from .sharding import ShardPlan, validate_plan
from .toy_model import (ModelWeights, causal_mask, final_logits, mlp_residual,
                        output_projection, project_qkv, repeat_kv)


class ProtocolError(RuntimeError):
    pass


@dataclass
class AttnPartial:
    """Softmax statistics of query rows ``rows`` against key shard ``kv_shard``.

    Fully masked rows are sentinels: ``masked`` is set, ``m`` is -inf and
    ``e``/``u`` are zero, so they carry zero weight in recombination.
    """

    q_shard: int
    kv_shard: int
    rows: np.ndarray  # (n,) 1-based token indices, increasing
    m: np.ndarray  # (H, n)
    e: np.ndarray  # (H, n)
    u: np.ndarray  # (H, n, d)
    masked: np.ndarray  # (n,) bool

    def take(self, keep: np.ndarray) -> "AttnPartial":
        sel = np.isin(self.rows, keep)
        return AttnPartial(self.q_shard, self.kv_shard, self.rows[sel], self.m[:, sel],
                           self.e[:, sel], self.u[:, sel], self.masked[sel])

    @property
    def elements(self) -> int:
        return self.m.size + self.e.size + self.u.size


def partial_attention(q, k, v, q_rows, k_rows):
    """(m, e, u, masked) for q (H, n, d) against k, v (H_KV, M, d) under a causal mask."""
    H, n = q.shape[0], q.shape[1]
    d = v.shape[-1]
    q_rows = np.asarray(q_rows)
    k_rows = np.asarray(k_rows)
    if len(k_rows) == 0:
        return (np.full((H, n), -np.inf), np.zeros((H, n)), np.zeros((H, n, d)),
                np.ones(n, dtype=bool))
    if H % k.shape[0]:
        raise ProtocolError(f"H={H} not divisible by H_KV={k.shape[0]}")
    group = H // k.shape[0]
    k = repeat_kv(k, group)
    v = repeat_kv(v, group)
    a = q @ np.swapaxes(k, -1, -2) + causal_mask(q_rows, k_rows)
    m, e, u, masked = softmax_stats(a, v)
    return m, e, u, masked.all(axis=0)


def softmax_stats(a, v):
    """Row max, subtract-max expsum and normalized value product of logits ``a``.

    a: (..., n, M) possibly holding -inf; v: (..., M, d). Rows that are
    entirely -inf come back as sentinels (m=-inf, e=0, u=0, masked=True).
    """
    m = a.max(axis=-1, initial=-np.inf)
    masked = np.isneginf(m)
    p = np.exp(a - np.where(masked, 0.0, m)[..., None])
    e = p.sum(axis=-1)
    u = (p / np.where(e > 0, e, 1.0)[..., None]) @ v
    return m, e, u, masked


def combine_partials(ms, es, us, maskeds, check: bool = True):
    """Recombine per-shard statistics into the normalized attention output.

    ms, es: sequences of (..., n); us: (..., n, d); maskeds: bool flags shaped
    like ``m`` or just (n,). Returns ``(o, w, n_max)`` with ``o`` (..., n, d).
    Sentinel slices get zero weight.
    """
    M = np.stack(ms)
    E = np.stack(es)
    U = np.stack(us)
    valid = ~np.stack([np.broadcast_to(x, m.shape) for x, m in zip(maskeds, ms)])
    n_max = np.where(valid, M, -np.inf).max(axis=0)
    if np.any(np.isneginf(n_max)):
        raise ProtocolError("all-masked token row: zero recombination weight")
    diff = np.where(valid, M - n_max, -np.inf)
    if check and np.any(diff[valid] > 0):
        raise ProtocolError("stability violated: m - n > 0")
    scale = np.exp(diff) * E  # zero on sentinels
    w = scale.sum(axis=0)
    if check and not np.all(w > 0):
        raise ProtocolError("non-positive recombination weight")
    o = (scale[..., None] * U).sum(axis=0) / w[..., None]
    return o, w, n_max


# ---------------------------------------------------------------------------
# node state


class CompNode:
    def __init__(self, i: int, model: ModelWeights):
        self.id = i
        self.label = f"C{i}"
        self.model = model
        self.R = np.zeros(0, dtype=np.int64)
        self.tokens: dict[int, int] = {}
        n_layers = model.config.num_layers
        # layer_inputs[l] are the hidden rows entering layer l; [-1] is the output
        self.layer_inputs: list[np.ndarray] = [np.zeros((0, model.config.d_emb))
                                               for _ in range(n_layers + 1)]
        self.received: dict[int, list[AttnPartial]] = {}
        self.logits = np.zeros((0, model.config.V))

    @property
    def hidden(self) -> np.ndarray:
        return self.layer_inputs[-1]

    @property
    def positions(self) -> np.ndarray:
        return self.R - 1

    def load(self, indices, tokens) -> None:
        self.R = np.asarray(indices, dtype=np.int64)
        self.tokens = {int(r): int(t) for r, t in zip(indices, tokens)}
        emb = self.model.embedding[np.asarray(tokens, dtype=np.int64)]
        self.layer_inputs = [emb.copy()] + [None] * self.model.config.num_layers
        self.received = {}


class AttnNode:
    def __init__(self, j: int, k: int):
        self.pair = (j, k)
        self.label = f"A{j},{k}"
        self.shards = (j,) if j == k else (j, k)
        self.blocks = [(j, k)] if j == k else [(j, k), (k, j)]
        self.q: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        # kv_cache[layer][shard] = (rows, k, v)
        self.kv_cache: dict[int, dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]] = {}

    def kv(self, layer: int, shard: int):
        return self.kv_cache[layer][shard]


def pre_pass(node: CompNode, layer: int, rows: slice | None = None):
    """Norm, Q/K/V projection and RoPE at the node's own absolute positions."""
    h = node.layer_inputs[layer]
    pos = node.positions
    if rows is not None:
        h, pos = h[rows], pos[rows]
    if h.shape[-1] != node.model.config.d_emb:
        raise ProtocolError(f"hidden width {h.shape[-1]} != d_emb {node.model.config.d_emb}")
    return project_qkv(node.model, layer, h, pos)


def attn_pass(node: AttnNode, layer: int, query_rows: dict | None = None) -> list[AttnPartial]:
    """One partial per block (query shard, key shard) held by the node."""
    q_src = query_rows if query_rows is not None else node.q
    out = []
    for qs, ks in node.blocks:
        if qs not in q_src or ks not in node.kv_cache.get(layer, {}):
            raise ProtocolError(f"{node.label}: missing rows for block ({qs},{ks}) at layer {layer}")
        q_rows, q = q_src[qs]
        if len(q_rows) == 0:
            continue
        k_rows, k, v = node.kv(layer, ks)
        if len(k_rows) == 0:
            continue
        m, e, u, masked = partial_attention(q, k, v, q_rows, k_rows)
        out.append(AttnPartial(qs, ks, q_rows, m, e, u, masked))
    return out


def gather_slices(partials: list[AttnPartial], k: int, rows: np.ndarray, label: str = ""):
    """Concatenate the slices against key shard ``k`` and align them to ``rows``.

    Returns ``(m, e, u, masked)`` with row axis in the order of ``rows``.
    """
    parts = [p for p in partials if p.kv_shard == k]
    if not parts:
        raise ProtocolError(f"{label}: no slice for key shard {k}")
    lab = np.concatenate([p.rows for p in parts])
    order = np.argsort(lab, kind="stable")
    lab = lab[order]
    if not np.array_equal(lab, np.sort(rows)):
        raise ProtocolError(f"{label}: slices for key shard {k} cover rows "
                            f"{lab.tolist()} instead of {np.sort(rows).tolist()}")
    pos = np.searchsorted(lab, rows)

    def cat(name, axis):
        a = np.concatenate([getattr(p, name) for p in parts], axis=axis)
        return np.take(np.take(a, order, axis=axis), pos, axis=axis)

    return cat("m", 1), cat("e", 1), cat("u", 1), cat("masked", 0)


def post_pass(node: CompNode, layer: int, partials: list[AttnPartial],
              expected_shards, rows: np.ndarray | None = None) -> np.ndarray:
    """Recombine all key-shard slices for ``rows`` (default: all of R_i), then O-project."""
    rows = node.R if rows is None else np.asarray(rows)
    ms, es, us, masks = [], [], [], []
    for k in expected_shards:
        m, e, u, masked = gather_slices(partials, k, rows, f"{node.label} layer {layer}")
        ms.append(m)
        es.append(e)
        us.append(u)
        masks.append(masked)
    o, _, _ = combine_partials(ms, es, us, masks)
    return output_projection(node.model, layer, o)


# ---------------------------------------------------------------------------
# orchestration


class Cascade:
    """A full set of CompNodes and AttnNodes for one plan, wired through a router."""

    def __init__(self, model: ModelWeights, plan: ShardPlan, router: Router | None = None):
        problems = validate_plan(plan)
        if problems:
            raise ValueError("invalid plan: " + "; ".join(problems))
        self.model = model
        self.plan = plan
        self.router = router if router is not None else Router()
        self.comp = {i: CompNode(i, model) for i in range(1, plan.alpha + 1)}
        self.attn = {p: AttnNode(*p) for p in plan.attn_pairs}
        self.shard_of = np.zeros(plan.N + 1, dtype=np.int64)
        self.owner_of = np.zeros(plan.N + 1, dtype=np.int64)
        for j, s in enumerate(plan.S, start=1):
            self.shard_of[list(s)] = j
        for i, r in enumerate(plan.R, start=1):
            self.owner_of[list(r)] = i
        self.n_tokens = 0
        self.step_id = 0
        self.active: list[tuple[set, set]] = []

    # -- helpers -----------------------------------------------------------
    def _live_shards(self) -> list[int]:
        n = self.n_tokens
        return [j for j, s in enumerate(self.plan.S, start=1) if s and s[0] <= n]

    def load(self, tokens) -> None:
        tokens = [int(t) for t in tokens]
        n = len(tokens)
        if n == 0:
            raise ValueError("empty token sequence")
        if n > self.plan.N:
            raise ValueError(f"{n} tokens exceed plan N={self.plan.N}")
        if n > self.model.config.max_seq:
            raise ValueError(f"{n} tokens exceed max_seq={self.model.config.max_seq}")
        self.n_tokens = n
        for i, node in self.comp.items():
            idx = [r for r in self.plan.R[i - 1] if r <= n]
            node.load(idx, [tokens[r - 1] for r in idx])
        for a in self.attn.values():
            a.q.clear()
            a.kv_cache.clear()

    # -- one layer ---------------------------------------------------------
    def layer(self, layer: int) -> None:
        cfg = self.model.config
        step = self.step_id
        # stage A: pre-pass and q/k/v routing
        for i, node in self.comp.items():
            if len(node.R) == 0:
                continue
            q, k, v = pre_pass(node, layer)
            shard = self.shard_of[node.R]
            for pair, a in self.attn.items():
                sel = np.isin(shard, a.shards)
                if not sel.any():
                    continue
                self.router.send(Envelope(
                    step, layer, "A", node.label, a.label,
                    payload={"q": q[:, sel], "k": k[:, sel], "v": v[:, sel]},
                    labels={"rows": node.R[sel]}))
        # barrier: AttnNodes assemble and compute
        out_msgs: list[Envelope] = []
        for pair, a in self.attn.items():
            msgs = self.router.collect(a.label)
            if msgs:
                rows = np.concatenate([m.labels["rows"] for m in msgs])
                order = np.argsort(rows, kind="stable")
                rows = rows[order]
                if np.any(np.diff(rows) <= 0):
                    raise ProtocolError(f"{a.label}: duplicate rows during assembly")
                Q = np.concatenate([m.payload["q"] for m in msgs], axis=1)[:, order]
                K = np.concatenate([m.payload["k"] for m in msgs], axis=1)[:, order]
                Vv = np.concatenate([m.payload["v"] for m in msgs], axis=1)[:, order]
            else:
                rows = np.zeros(0, dtype=np.int64)
                Q = np.zeros((cfg.H, 0, cfg.d))
                K = Vv = np.zeros((cfg.H_KV, 0, cfg.d))
            a.q = {}
            a.kv_cache[layer] = {}
            for s in a.shards:
                sel = self.shard_of[rows] == s
                expect = [r for r in self.plan.S[s - 1] if r <= self.n_tokens]
                if rows[sel].tolist() != expect:
                    raise ProtocolError(f"{a.label}: shard {s} assembled {rows[sel].tolist()}, "
                                        f"expected {expect}")
                a.q[s] = (rows[sel], Q[:, sel])
                a.kv_cache[layer][s] = (rows[sel], K[:, sel], Vv[:, sel])
            partials = attn_pass(a, layer)
            out_msgs.extend(self._route_partials(a, layer, partials))
        for env in out_msgs:
            self.router.send(env)
        # barrier: CompNodes recombine
        live = self._live_shards()
        for i, node in self.comp.items():
            if len(node.R) == 0:
                node.layer_inputs[layer + 1] = node.layer_inputs[layer]
                continue
            partials = self._unpack_partials(self.router.collect(node.label))
            node.received[layer] = partials
            o = post_pass(node, layer, partials, live)
            h = node.layer_inputs[layer] + o
            node.layer_inputs[layer + 1] = mlp_residual(self.model, layer, h)

    def _route_partials(self, a: AttnNode, layer: int, partials: list[AttnPartial]):
        owners: dict[int, list[AttnPartial]] = {}
        for p in partials:
            own = self.owner_of[p.rows]
            for i in np.unique(own):
                owners.setdefault(int(i), []).append(p.take(p.rows[own == i]))
        envs = []
        for i in sorted(owners):
            payload, labels = {}, {}
            for p in owners[i]:
                tag = f"{p.q_shard},{p.kv_shard}"
                payload[f"m:{tag}"] = p.m
                payload[f"e:{tag}"] = p.e
                payload[f"u:{tag}"] = p.u
                labels[f"rows:{tag}"] = p.rows
                labels[f"masked:{tag}"] = p.masked
            envs.append(Envelope(self.step_id, layer, "B", a.label, f"C{i}", payload, labels))
        return envs

    @staticmethod
    def _unpack_partials(msgs: list[Envelope]) -> list[AttnPartial]:
        out = []
        for env in msgs:
            for key in env.payload:
                if not key.startswith("m:"):
                    continue
                tag = key[2:]
                qs, ks = (int(x) for x in tag.split(","))
                out.append(AttnPartial(qs, ks, env.labels[f"rows:{tag}"], env.payload[f"m:{tag}"],
                                       env.payload[f"e:{tag}"], env.payload[f"u:{tag}"],
                                       env.labels[f"masked:{tag}"]))
        return out

    # -- full pass -----------------------------------------------------------
    def forward(self, tokens) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        self.load(tokens)
        for layer in range(self.model.config.num_layers):
            cascade_layer(self, layer)
        out = {}
        for i, node in self.comp.items():
            node.logits = final_logits(self.model, node.hidden)
            out[i] = (node.R.copy(), node.logits)
        self.active.append((set(self.comp), set(self.attn)))
        return out

    def hidden_rows(self, layer: int) -> np.ndarray:
        """Reassembled N x d_emb hidden matrix entering ``layer`` (num_layers: output)."""
        out = np.zeros((self.n_tokens, self.model.config.d_emb))
        for node in self.comp.values():
            if len(node.R):
                out[node.R - 1] = node.layer_inputs[layer]
        return out

    # -- incremental decoding --------------------------------------------------
    def step(self, token: int) -> np.ndarray:
        """Process the next token at index n_tokens + 1 using cached state.

        Only the owning CompNode and the beta AttnNodes whose pair contains the
        new index's shard take part. Returns that row's logits.
        """
        n = self.n_tokens + 1
        if n > self.plan.N:
            raise ValueError(f"index {n} beyond plan N={self.plan.N}")
        if n > self.model.config.max_seq:
            raise ValueError(f"index {n} beyond max_seq={self.model.config.max_seq}")
        self.step_id += 1
        step = self.step_id
        i = int(self.owner_of[n])
        j = int(self.shard_of[n])
        node = self.comp[i]
        if len(node.R) and node.R[-1] >= n:
            raise ProtocolError(f"{node.label}: index {n} not newer than cached rows")
        self.n_tokens = n
        node.R = np.append(node.R, n)
        node.tokens[n] = int(token)
        row = self.model.embedding[[int(token)]]
        pairs = self.plan.pairs_with(j)
        live = self._live_shards()
        for layer in range(self.model.config.num_layers):
            node.layer_inputs[layer] = np.vstack([node.layer_inputs[layer], row])
            q, k, v = project_qkv(self.model, layer, row, np.array([n - 1]))
            rows = np.array([n])
            for pair in pairs:
                a = self.attn[pair]
                self.router.send(Envelope(step, layer, "A", node.label, a.label,
                                          payload={"q": q, "k": k, "v": v},
                                          labels={"rows": rows}))
            partials_out = []
            for pair in pairs:
                a = self.attn[pair]
                (env,) = self.router.collect(a.label)
                cache = a.kv_cache.setdefault(layer, {})
                old_rows, old_k, old_v = cache.get(j, (np.zeros(0, dtype=np.int64),
                                                       np.zeros((k.shape[0], 0, k.shape[2])),
                                                       np.zeros((v.shape[0], 0, v.shape[2]))))
                if len(old_rows) and old_rows[-1] >= n:
                    raise ProtocolError(f"{a.label}: KV cache labels not increasing")
                cache[j] = (np.append(old_rows, n),
                            np.concatenate([old_k, env.payload["k"]], axis=1),
                            np.concatenate([old_v, env.payload["v"]], axis=1))
                qrows = {j: (env.labels["rows"], env.payload["q"])}
                blocks = [(qs, ks) for qs, ks in a.blocks if qs == j]
                saved = a.blocks
                a.blocks = blocks
                try:
                    parts = attn_pass(a, layer, query_rows=qrows)
                finally:
                    a.blocks = saved
                partials_out.extend(self._route_partials(a, layer, parts))
            for env in partials_out:
                self.router.send(env)
            partials = self._unpack_partials(self.router.collect(node.label))
            o = post_pass(node, layer, partials, live, rows=np.array([n]))
            row = mlp_residual(self.model, layer, row + o)
        node.layer_inputs[-1] = np.vstack([node.layer_inputs[-1], row])
        logits = final_logits(self.model, row)[0]
        node.logits = np.vstack([node.logits, logits[None]])
        self.active.append(({i}, set(pairs)))
        return logits


def cascade_layer(cluster: Cascade, layer: int) -> None:
    cluster.layer(layer)


def cascade_forward(model: ModelWeights, plan: ShardPlan, tokens,
                    router: Router | None = None) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per-CompNode ``(row indices, logits rows)`` for a full sharded pass."""
    return Cascade(model, plan, router).forward(tokens)


def assemble_logits(parts: dict[int, tuple[np.ndarray, np.ndarray]], N: int) -> np.ndarray:
    V = next(iter(parts.values()))[1].shape[-1]
    out = np.full((N, V), np.nan)
    for rows, logits in parts.values():
        out[np.asarray(rows) - 1] = logits
    if np.isnan(out).any():
        raise ProtocolError("logit rows missing after reassembly")
    return out


@dataclass
class GenerationResult:
    tokens: list[int]
    active: list[tuple[set, set]]  # per incremental step: (CompNode ids, AttnNode pairs)
    cluster: Cascade = field(repr=False)

    @property
    def trace(self) -> list[MessageRecord]:
        return self.cluster.router.trace


def cascade_generate(model: ModelWeights, plan: ShardPlan, prompt, n_new: int,
                     router: Router | None = None) -> GenerationResult:
    """Greedy generation: one sharded prompt pass, then KV-cached single-token steps.

    ``plan`` must cover at least ``len(prompt) + n_new - 1`` indices; build it
    for the final length so new indices follow the periodic (c, delta) pattern.
    """
    prompt = [int(t) for t in prompt]
    if n_new < 0:
        raise ValueError("n_new must be >= 0")
    if len(prompt) + n_new > model.config.max_seq:
        raise ValueError(f"prompt {len(prompt)} + n_new {n_new} exceeds max_seq")
    if len(prompt) + max(n_new - 1, 0) > plan.N:
        raise ValueError(f"plan N={plan.N} too short for {len(prompt)} + {n_new} tokens")
    cluster = Cascade(model, plan, router)
    parts = cluster.forward(prompt)
    tokens = list(prompt)
    if n_new == 0:
        return GenerationResult(tokens, [], cluster)
    last = len(prompt)
    owner = int(cluster.owner_of[last])
    rows, logits = parts[owner]
    tokens.append(int(np.argmax(logits[list(rows).index(last)])))
    for _ in range(n_new - 1):
        logits = cluster.step(tokens[-1])
        tokens.append(int(np.argmax(logits)))
    return GenerationResult(tokens, cluster.active[1:], cluster)
