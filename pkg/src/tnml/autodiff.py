"""Reverse-mode gradients through recorded contraction schedules.

:func:`forward_record` evaluates a network (with rank regularizers
interposed) and returns a :class:`Tape` listing every primitive it ran.
:func:`backward` walks the tape in reverse and returns exact gradients of
``<upstream, logits>`` for every node tensor and every soft bond dimension.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from tnml.errors import StructuralError
from tnml.netgraph import ContractionOrder, TensorNetwork, default_order, merge_plan
from tnml.rankreg import RankRegularizer, mask_derivative, mask_diagonal
from tnml.tensor import Tensor, contract, diag_tensor


@dataclass
class Record:
    op: str  # "mask" | "diag" | "vector" | "contract"
    out: int
    args: tuple
    meta: dict = field(default_factory=dict)


@dataclass
class Tape:
    records: list
    values: dict  # slot -> Tensor (or float / ndarray for soft dims and masks)
    param_slots: dict  # node id -> slot
    softdim_slots: dict  # edge id -> slot
    frozen: frozenset
    output: int
    output_labels: tuple


@dataclass
class Gradients:
    tensors: dict  # node id -> array shaped like the node tensor
    soft_dims: dict  # edge id -> float

    def __add__(self, other):
        return Gradients(
            {n: self.tensors[n] + other.tensors[n] for n in self.tensors},
            {e: self.soft_dims[e] + other.soft_dims[e] for e in self.soft_dims})

    def scaled(self, alpha):
        return Gradients({n: alpha * g for n, g in self.tensors.items()},
                         {e: alpha * g for e, g in self.soft_dims.items()})


def _run(rec: Record, values: dict):
    if rec.op == "mask":
        d, = (values[a] for a in rec.args)
        return mask_diagonal(d, rec.meta["max_dim"], rec.meta["gamma"])
    if rec.op == "diag":
        return diag_tensor(values[rec.args[0]], rec.meta["labels"])
    if rec.op == "vector":
        return Tensor(values[rec.args[0]], rec.meta["labels"])
    if rec.op == "contract":
        a, b = (values[x] for x in rec.args)
        return contract(a, b, rec.meta["pairs"], rec.meta["keep"])
    raise ValueError(f"unknown tape op {rec.op!r}")


def forward_record(net: TensorNetwork, regs: Sequence[RankRegularizer] = (),
                   inputs: Mapping = None, order: ContractionOrder | None = None):
    """Contract ``net`` and record the schedule.

    Regularizer nodes of ``net`` are rebuilt on the tape from the soft dims in
    ``regs`` (mask, then diagonal), so gradients reach the soft dims.
    Returns ``(logits, tape)``; ``logits`` is a 1-d array over the output leg.
    """
    inputs = inputs or {}
    reg_by_node = {r.node: r for r in regs}
    for n in reg_by_node:
        if n not in net.nodes:
            raise StructuralError(f"regularizer node {n!r} missing from network")

    values: dict = {}
    records: list = []
    slot_of: dict = {}
    param_slots, softdim_slots = {}, {}

    def new_slot(value):
        s = len(values)
        values[s] = value
        return s

    def emit(op, args, **meta):
        rec = Record(op, -1, tuple(args), meta)
        rec.out = new_slot(_run(rec, values))
        records.append(rec)
        return rec.out

    for n, t in net.nodes.items():
        if n in reg_by_node:
            r = reg_by_node[n]
            d = new_slot(float(r.soft_dim))
            softdim_slots[r.edge] = d
            m = emit("mask", [d], max_dim=r.max_dim, gamma=r.gamma)
            op = "diag" if r.kind == "diag" else "vector"
            slot_of[n] = emit(op, [m], labels=t.labels)
        else:
            slot_of[n] = param_slots[n] = new_slot(t)

    wanted = set(net.input_edges)
    if set(inputs) != wanted:
        raise StructuralError(
            f"inputs must cover exactly the input legs {sorted(map(repr, wanted))}")
    for e in net.input_edges:
        (n, _), = net.edges[e].slots
        vec = new_slot(Tensor(np.asarray(inputs[e], dtype=np.float64), (e,)))
        slot_of[n] = emit("contract", [slot_of[n], vec], pairs=[(e, e)], keep=[])
    for e, h in net.edges.items():
        if h.external == "dangling":
            (n, _), = h.slots
            ones = new_slot(Tensor(np.ones(h.dim), (e,)))
            slot_of[n] = emit("contract", [slot_of[n], ones], pairs=[(e, e)], keep=[])

    if order is None:
        order = default_order(net)
    open_legs = {net.output_edge} if net.output_edge is not None else set()
    count: dict = {}
    for n in slot_of:
        for l in values[slot_of[n]].labels:
            count[l] = count.get(l, 0) + 1
    live = dict(slot_of)
    for a, b in order:
        ta, tb = values[live[a]], values[live[b]]
        pairs, keep = merge_plan(ta, tb, lambda l: count[l] > 2 or l in open_legs)
        for l, _ in pairs:
            count[l] -= 2
        for l, _ in keep:
            count[l] -= 1
        live[a] = emit("contract", [live.pop(a), live.pop(b)], pairs=pairs, keep=keep)
    if len(live) != 1:
        raise StructuralError(f"contraction order leaves {len(live)} tensors")
    (out,) = live.values()
    result = values[out]
    if set(result.labels) != open_legs:
        raise StructuralError(f"result carries legs {result.labels}, expected {open_legs}")
    tape = Tape(records, values, param_slots, softdim_slots, net.frozen, out, result.labels)
    return np.atleast_1d(result.data).copy(), tape


def replay(tape: Tape, params: Mapping = None, soft_dims: Mapping = None) -> np.ndarray:
    """Re-run the recorded schedule, optionally with new leaf values."""
    values = dict(tape.values)
    for n, arr in (params or {}).items():
        s = tape.param_slots[n]
        old = values[s]
        values[s] = arr if isinstance(arr, Tensor) else Tensor(arr, old.labels)
    for e, d in (soft_dims or {}).items():
        values[tape.softdim_slots[e]] = float(d)
    for rec in tape.records:
        values[rec.out] = _run(rec, values)
    return np.atleast_1d(values[tape.output].data).copy()


def _letters(*label_lists):
    table: dict = {}
    subs = []
    for labels in label_lists:
        s = ""
        for l in labels:
            if l not in table:
                table[l] = chr(ord("a") + len(table)) if len(table) < 26 else chr(
                    ord("A") + len(table) - 26)
            s += table[l]
        subs.append(s)
    return subs


def _contract_vjp(a: Tensor, b: Tensor, out: Tensor, g: np.ndarray, meta):
    # rename b's paired labels to a's partner so letters line up
    ren = {lb: la for la, lb in list(meta["pairs"]) + list(meta["keep"])}
    b_labels = [ren.get(l, l) for l in b.labels]
    sa, sb, so = _letters(a.labels, b_labels, out.labels)
    ga = np.einsum(f"{so},{sb}->{sa}", g, b.data)
    gb = np.einsum(f"{so},{sa}->{sb}", g, a.data)
    return ga, gb


def backward(tape: Tape, upstream) -> Gradients:
    """Gradients of ``<upstream, logits>`` for every leaf on the tape.

    Frozen nodes get exact zeros.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    out_val = tape.values[tape.output]
    if upstream.size != out_val.size:
        raise StructuralError(
            f"upstream gradient has {upstream.size} entries, logits have {out_val.size}")
    adj: dict = {tape.output: upstream.reshape(out_val.shape)}
    v = tape.values
    for rec in reversed(tape.records):
        g = adj.pop(rec.out, None)
        if g is None:
            continue
        if rec.op == "contract":
            a, b = rec.args
            ga, gb = _contract_vjp(v[a], v[b], v[rec.out], g, rec.meta)
            adj[a] = adj[a] + ga if a in adj else ga
            adj[b] = adj[b] + gb if b in adj else gb
        elif rec.op == "diag":
            (m,) = rec.args
            gm = np.diagonal(g).copy()
            adj[m] = adj[m] + gm if m in adj else gm
        elif rec.op == "vector":
            (m,) = rec.args
            adj[m] = adj[m] + g if m in adj else g
        elif rec.op == "mask":
            (d,) = rec.args
            dm = mask_derivative(v[d], rec.meta["max_dim"], rec.meta["gamma"])
            gd = float(np.dot(g, dm))
            adj[d] = adj.get(d, 0.0) + gd
    tensors = {}
    for n, s in tape.param_slots.items():
        t = v[s]
        if n in tape.frozen or s not in adj:
            tensors[n] = np.zeros(t.shape)
        else:
            tensors[n] = np.asarray(adj[s], dtype=np.float64).reshape(t.shape)
    soft = {e: float(adj.get(s, 0.0)) for e, s in tape.softdim_slots.items()}
    return Gradients(tensors, soft)


def batch_gradients(net, regs, batch_inputs: Sequence[Mapping], upstreams, order=None,
                    workers: int = 1) -> Gradients:
    """Sum of per-sample gradients, reduced in sample order whatever ``workers`` is."""
    if order is None:
        order = default_order(net)

    def one(i):
        _, tape = forward_record(net, regs, batch_inputs[i], order)
        return backward(tape, upstreams[i])

    idx = range(len(batch_inputs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(one, idx))
    else:
        parts = [one(i) for i in idx]
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


def _objective(net, regs, inputs, upstream, order):
    logits, _ = forward_record(net, regs, inputs, order)
    return float(np.dot(upstream, logits))


def finite_diff_check(net: TensorNetwork, regs: Sequence[RankRegularizer] = (),
                      inputs: Mapping = None, step: float = 1e-6, upstream=None,
                      seed: int = 0, return_details: bool = False):
    """Compare tape gradients with central differences on every parameter.

    The error of each block (one node tensor, or the vector of soft dims) is
    ``max|analytic - numeric| / max|numeric|``; the worst block is returned.
    A block whose gradients are all zero on both sides scores 0.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    order = default_order(net)
    logits, tape = forward_record(net, regs, inputs, order)
    if upstream is None:
        upstream = np.random.default_rng(seed).standard_normal(logits.shape)
    upstream = np.asarray(upstream, dtype=np.float64)
    grads = backward(tape, upstream)

    def f_params(n, arr):
        return float(np.dot(upstream, replay(tape, params={n: arr})))

    errors = {}
    for n, s in tape.param_slots.items():
        base = tape.values[s].data
        num = np.zeros(base.shape)
        if n not in net.frozen:
            for idx in np.ndindex(base.shape):
                plus, minus = base.copy(), base.copy()
                plus[idx] += step
                minus[idx] -= step
                num[idx] = (f_params(n, plus) - f_params(n, minus)) / (2 * step)
        errors[("node", n)] = _block_error(grads.tensors[n], num)

    if regs:
        num_d, ana_d = [], []
        for r in regs:
            d = r.soft_dim
            fp = float(np.dot(upstream, replay(tape, soft_dims={r.edge: d + step})))
            fm = float(np.dot(upstream, replay(tape, soft_dims={r.edge: d - step})))
            num_d.append((fp - fm) / (2 * step))
            ana_d.append(grads.soft_dims[r.edge])
        errors["soft_dims"] = _block_error(np.array(ana_d), np.array(num_d))

    worst = max(errors.values()) if errors else 0.0
    if return_details:
        return worst, errors, grads
    return worst


def _block_error(analytic, numeric):
    diff = float(np.max(np.abs(analytic - numeric))) if np.size(numeric) else 0.0
    scale = float(np.max(np.abs(numeric))) if np.size(numeric) else 0.0
    if diff == 0.0:
        return 0.0
    if scale == 0.0:
        return float("inf")
    return diff / scale
