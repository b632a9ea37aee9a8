"""Trainable soft bond dimensions.

Each internal edge gets a diagonal matrix whose entries follow a shifted
sigmoid ``m_k = sigmoid(gamma * (d - k - 1/2))``.  The shift ``d`` is the
edge's soft bond dimension: at integer ``d`` exactly ``d`` entries sit above
one half.
"""

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from tnml.errors import StructuralError
from tnml.netgraph import TensorNetwork, param_count
from tnml.tensor import Tensor, contract, diag_tensor


@dataclass
class RankRegularizer:
    """Soft bond dimension of one edge.

    ``node`` is the id of the diagonal node interposed on the edge (or of the
    mask vector attached to a hyperedge when ``kind == "vector"``).
    """

    edge: object
    soft_dim: float
    max_dim: int
    gamma: float = 10.0
    node: object = None
    kind: str = "diag"

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("sharpness gamma must be positive")
        self.soft_dim = clamp_soft_dim(self.soft_dim, self.max_dim)

    def mask(self) -> np.ndarray:
        return mask_diagonal(self.soft_dim, self.max_dim, self.gamma)

    def mask_grad(self) -> np.ndarray:
        return mask_derivative(self.soft_dim, self.max_dim, self.gamma)


def clamp_soft_dim(d, max_dim):
    return float(min(max(float(d), 0.0), float(max_dim)))


def mask_diagonal(d: float, max_dim: int, gamma: float) -> np.ndarray:
    k = np.arange(max_dim, dtype=np.float64)
    return expit(gamma * (d - k - 0.5))


def mask_derivative(d: float, max_dim: int, gamma: float) -> np.ndarray:
    """d m_k / d d."""
    m = mask_diagonal(d, max_dim, gamma)
    return gamma * m * (1.0 - m)


def reg_node_id(edge):
    return ("reg", edge)


def split_label(edge):
    return (edge, "'")


def insert_regularizers(net: TensorNetwork, gamma: float = 10.0, soft_dim=None):
    """Interpose a rank regularizer on every internal edge.

    For an ordinary bond between nodes ``u`` and ``v`` the higher-id side is
    relabelled to ``(edge, "'")`` and a diagonal node joins the two labels.
    A hyperedge (three or more members) instead gets the mask as a vector node
    on the shared index, which applies the diagonal once to the merged bond.
    Soft dimensions start at the edge extent unless ``soft_dim`` is given.

    Returns ``(net_with_regs, regs)``.
    """
    internal = net.internal_edges
    if not internal:
        raise StructuralError("network has no internal edge to regularize")
    nodes = net.nodes
    external = net.external_tags()
    regs = []
    for e in internal:
        h = net.edges[e]
        d0 = h.dim if soft_dim is None else soft_dim
        if len(h.slots) == 2:
            (u, _), (v, _) = sorted(h.slots, key=repr)
            label = split_label(e)
            t = nodes[v]
            nodes[v] = Tensor._wrap(t.data, [label if l == e else l for l in t.labels])
            reg = RankRegularizer(e, d0, h.dim, gamma, reg_node_id(e), "diag")
            nodes[reg.node] = diag_tensor(reg.mask(), (e, label))
        else:
            reg = RankRegularizer(e, d0, h.dim, gamma, reg_node_id(e), "vector")
            nodes[reg.node] = Tensor(reg.mask(), (e,))
        regs.append(reg)
    meta = dict(net.meta)
    meta["regularized"] = True
    if "sites" in meta:
        # chain order walks the regularizers too
        by_edge = {r.edge: r.node for r in regs}
        seq = [meta["sites"][0]]
        for a, b in zip(meta["sites"], meta["sites"][1:]):
            shared = set(net[a].labels) & set(net[b].labels)
            seq.extend(by_edge[e] for e in sorted(shared, key=repr) if e in by_edge)
            seq.append(b)
        meta["sites"] = seq
    return TensorNetwork(nodes, external, net.frozen, meta), regs


def reg_tensor(reg: RankRegularizer, labels, mask=None) -> Tensor:
    mask = reg.mask() if mask is None else mask
    if reg.kind == "diag":
        return diag_tensor(mask, labels)
    return Tensor(mask, labels)


def refresh(net: TensorNetwork, regs: Sequence[RankRegularizer]) -> TensorNetwork:
    """Rewrite the regularizer nodes of ``net`` from the current soft dims."""
    return net.replace({r.node: reg_tensor(r, net[r.node].labels) for r in regs})


def _is_reg(n):
    return isinstance(n, tuple) and len(n) == 2 and n[0] == "reg"


def _soft_extents(net: TensorNetwork, regs) -> dict:
    ext = {}
    for r in regs:
        s = float(np.sum(r.mask()))
        ext[r.edge] = s
        if r.kind == "diag":
            ext[split_label(r.edge)] = s
    return ext


def soft_param_count(net: TensorNetwork, regs: Sequence[RankRegularizer]) -> float:
    """Parameter count with every regularized bond at its soft extent ``sum_k m_k``.

    Regularizer nodes themselves are not counted.
    """
    ext = _soft_extents(net, regs)
    total = 0.0
    for n, t in net.nodes.items():
        if _is_reg(n):
            continue
        total += float(np.prod([ext.get(l, float(d)) for l, d in zip(t.labels, t.shape)]))
    return total


def soft_param_count_grad(net: TensorNetwork, regs: Sequence[RankRegularizer]) -> dict:
    """Gradient of :func:`soft_param_count` with respect to each soft dim."""
    ext = _soft_extents(net, regs)
    grads = {r.edge: 0.0 for r in regs}
    by_label = {}
    for r in regs:
        by_label[r.edge] = r
        if r.kind == "diag":
            by_label[split_label(r.edge)] = r
    dsum = {r.edge: float(np.sum(r.mask_grad())) for r in regs}
    for n, t in net.nodes.items():
        if _is_reg(n):
            continue
        sizes = [ext.get(l, float(d)) for l, d in zip(t.labels, t.shape)]
        for i, l in enumerate(t.labels):
            if l in by_label:
                rest = float(np.prod(sizes[:i] + sizes[i + 1:]))
                grads[by_label[l].edge] += rest * dsum[by_label[l].edge]
    return grads


def full_param_count(net: TensorNetwork) -> int:
    """Parameters of the model at maximal bond dimension, regularizers excluded."""
    return int(sum(t.size for n, t in net.nodes.items() if not _is_reg(n)))


def penalty(net, regs, lam: float, kind: str = "params") -> float:
    """Bond-dimension penalty term (without the task loss).

    ``kind="params"`` is the softened parameter count normalised by the count
    at maximal bond dimension; ``"l1"`` / ``"l2"`` act on the soft-dim vector
    divided by the maximal extents.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if lam == 0:
        return 0.0
    if kind == "params":
        return lam * soft_param_count(net, regs) / full_param_count(net)
    x = np.array([r.soft_dim / r.max_dim for r in regs])
    if kind == "l1":
        return lam * float(np.sum(np.abs(x))) / len(regs)
    if kind == "l2":
        return lam * float(np.sum(x * x)) / len(regs)
    raise ValueError(f"unknown penalty {kind!r}")


def penalty_grad(net, regs, lam: float, kind: str = "params") -> dict:
    if lam == 0:
        return {r.edge: 0.0 for r in regs}
    if kind == "params":
        scale = lam / full_param_count(net)
        return {e: scale * g for e, g in soft_param_count_grad(net, regs).items()}
    if kind == "l1":
        return {r.edge: lam * np.sign(r.soft_dim) / r.max_dim / len(regs) for r in regs}
    if kind == "l2":
        return {r.edge: 2 * lam * r.soft_dim / r.max_dim ** 2 / len(regs) for r in regs}
    raise ValueError(f"unknown penalty {kind!r}")


def penalized_loss(task_loss: float, net, regs, lam: float, kind: str = "params") -> float:
    return task_loss + penalty(net, regs, lam, kind)


def truncated_dims(regs: Sequence[RankRegularizer], threshold: float = 0.5) -> dict:
    """Kept extent per edge: entries with mask >= threshold, at least one."""
    return {r.edge: max(1, int(np.count_nonzero(r.mask() >= threshold))) for r in regs}


def _kept_indices(reg, threshold):
    m = reg.mask()
    keep = np.flatnonzero(m >= threshold)
    if keep.size == 0:
        keep = np.array([int(np.argmax(m))])
    return keep


def hard_masked(net: TensorNetwork, regs, threshold: float = 0.5) -> TensorNetwork:
    """Regularized network with each mask rounded to 0/1 (keeping at least one index)."""
    updates = {}
    for r in regs:
        m = np.zeros(r.max_dim)
        m[_kept_indices(r, threshold)] = 1.0
        updates[r.node] = reg_tensor(r, net[r.node].labels, m)
    return net.replace(updates)


def _graph_distance(net: TensorNetwork, target) -> dict:
    adj: dict = {n: set() for n in net.nodes}
    for h in net.edges.values():
        members = h.nodes
        for a in members:
            adj[a] |= members - {a}
    dist = {target: 0}
    frontier = [target]
    while frontier:
        nxt = []
        for a in frontier:
            for b in adj[a]:
                if b not in dist:
                    dist[b] = dist[a] + 1
                    nxt.append(b)
        frontier = nxt
    return dist


def truncate_and_absorb(net: TensorNetwork, regs: Sequence[RankRegularizer],
                        threshold: float = 0.5, rounded: bool = True) -> TensorNetwork:
    """Compile a regularized network for inference.

    Per edge the indices with ``m_k >= threshold`` are kept (at least one),
    the kept diagonal entries are multiplied into the neighbour nearer the
    output node (ties: the one with the smaller id), every other holder of the
    edge is sliced, and the regularizer node disappears.

    With ``rounded=True`` the inference-time diagonal is the 0/1 rounding of
    the mask, so the result reproduces :func:`hard_masked` exactly.
    ``rounded=False`` absorbs the raw sigmoid values instead.
    """
    target = net.output_node
    dist = _graph_distance(net, target) if target is not None else {}
    nodes = net.nodes
    external = net.external_tags()
    for r in regs:
        keep = _kept_indices(r, threshold)
        weights = np.ones(len(keep)) if rounded else r.mask()[keep]
        del nodes[r.node]
        if r.kind == "diag":
            labels = [r.edge, split_label(r.edge)]
        else:
            labels = [r.edge]
        holders = [(n, l) for n, t in nodes.items() for l in t.labels if l in labels]
        ranked = sorted(holders, key=lambda nl: (dist.get(nl[0], np.inf), repr(nl[0])))
        absorber = ranked[0][0]
        for n, l in holders:
            t = nodes[n]
            ax = t.axis(l)
            data = np.take(t.data, keep, axis=ax)
            if n == absorber and l == ranked[0][1]:
                shape = [1] * data.ndim
                shape[ax] = len(keep)
                data = data * weights.reshape(shape)
            new_labels = [r.edge if x == l else x for x in t.labels]
            nodes[n] = Tensor._wrap(data, new_labels)
    meta = {k: v for k, v in net.meta.items() if k != "regularized"}
    if "sites" in meta:
        dropped = {r.node for r in regs}
        meta["sites"] = [n for n in meta["sites"] if n not in dropped]
    return TensorNetwork(nodes, external, net.frozen - {r.node for r in regs}, meta)


def forward_flops(net: TensorNetwork, order=None) -> int:
    """Multiply-add count of one full contraction (inputs absorbed first)."""
    from tnml.netgraph import default_order

    shapes = {n: dict(zip(t.labels, t.shape)) for n, t in net.nodes.items()}
    flops = 0
    for e in net.input_edges:
        (n, _), = net.edges[e].slots
        flops += int(np.prod(list(shapes[n].values())))
        shapes[n].pop(e)
    for e, h in net.edges.items():
        if h.external == "dangling":
            (n, _), = h.slots
            flops += int(np.prod(list(shapes[n].values())))
            shapes[n].pop(e)
    count: dict = {}
    for s in shapes.values():
        for l in s:
            count[l] = count.get(l, 0) + 1
    open_legs = {net.output_edge}
    for a, b in (order or default_order(net)):
        sa, sb = shapes.pop(a), shapes.pop(b)
        union = {**sa, **sb}
        flops += int(np.prod(list(union.values()), dtype=np.int64))
        out = dict(union)
        for l in set(sa) & set(sb):
            if count[l] == 2 and l not in open_legs:
                out.pop(l)
                count[l] -= 2
            else:
                count[l] -= 1
        shapes[a] = out
    return flops


def write_spectrum(path, regs: Sequence[RankRegularizer], threshold: float = 0.5):
    """CSV with one row per regularized edge: edge_index, soft_dim, truncated_dim."""
    dims = truncated_dims(regs, threshold)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["edge_index", "soft_dim", "truncated_dim"])
        for i, r in enumerate(regs):
            w.writerow([i, f"{r.soft_dim:.6f}", dims[r.edge]])
