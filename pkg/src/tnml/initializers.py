"""Initialization of tensor networks.

Two schemes are provided.

Variance matching (:func:`init_dense`): every element is drawn i.i.d. with
mean zero and variance ``(target / D**E) ** (1 / V)``, which gives each
element of the contracted operator variance ``target``.  ``target`` comes from
the usual glorot / he / lecun formulas of the represented linear map.

Copy-node initialization (:func:`copy_node_init`): all but ``n_dense`` nodes
are replaced by copy tensors (tensored with a fixed vector on their input
legs), and the small dense remainder is variance-matched.
"""

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from tnml.errors import InvalidSelectionError, RangeError, StructuralError
from tnml.netgraph import TensorNetwork, effective_hypergraph, full_contract, summed_edges
from tnml.tensor import Tensor, permute

SCHEMES = ("glorot", "he", "lecun", "variance")
DISTRIBUTIONS = ("normal", "uniform")

_LOG_MAX = math.log(np.finfo(np.float64).max)
_LOG_TINY = math.log(np.finfo(np.float64).tiny)


@dataclass
class InitSpec:
    scheme: str = "glorot"
    distribution: str = "normal"
    seed: int = 0
    target_variance: float | None = None  # used when scheme == "variance"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.scheme == "variance" and not (self.target_variance and self.target_variance > 0):
            raise ValueError("scheme 'variance' needs a positive target_variance")

    def target(self, fan_in: float, fan_out: float) -> float:
        if self.scheme == "variance":
            return float(self.target_variance)
        if self.scheme == "glorot":
            return 2.0 / (fan_in + fan_out)
        if self.scheme == "he":
            return 2.0 / fan_in
        return 1.0 / fan_in


@dataclass
class CopyInitPlan:
    """Which nodes stay dense, and the vector pinned onto copied input legs.

    ``dense_selection`` may be given explicitly; otherwise ``selection`` picks
    a ``"contiguous"`` block around the output node or a seeded ``"random"``
    subset that always contains the output node.
    """

    n_dense: int
    pin_vector: Sequence[float] = (1.0, 0.0)
    dense_selection: frozenset | None = None
    selection: str = "contiguous"
    seed: int = 0

    def resolve(self, net: TensorNetwork) -> frozenset:
        out = net.output_node
        if not 1 <= self.n_dense <= len(net):
            raise InvalidSelectionError(f"n_dense={self.n_dense} outside 1..{len(net)}")
        if self.dense_selection is not None:
            chosen = frozenset(self.dense_selection)
            if len(chosen) != self.n_dense:
                raise InvalidSelectionError(
                    f"dense_selection has {len(chosen)} nodes, n_dense is {self.n_dense}")
            if not chosen <= set(net.nodes):
                raise InvalidSelectionError("dense_selection names unknown nodes")
        elif self.selection == "contiguous":
            chosen = frozenset(_grow_block(net, out, self.n_dense))
        elif self.selection == "random":
            rng = np.random.default_rng(self.seed)
            others = [n for n in net.nodes if n != out]
            pick = rng.choice(len(others), size=self.n_dense - (out is not None), replace=False)
            chosen = frozenset([others[i] for i in sorted(pick)] + ([out] if out is not None else []))
        else:
            raise ValueError(f"unknown selection {self.selection!r}")
        if out is not None and out not in chosen:
            raise InvalidSelectionError("the output node must be densely initialized")
        return chosen


def _grow_block(net: TensorNetwork, start, size):
    """Breadth-first block of ``size`` nodes from ``start`` (a contiguous run on a chain)."""
    if "sites" in net.meta:
        seq = [n for n in net.meta["sites"] if n in net.nodes and not _is_reg(n)]
        p = seq.index(start) if start is not None else 0
        lo = hi = p
        while hi - lo + 1 < size:
            if hi + 1 < len(seq):
                hi += 1
            else:
                lo -= 1
        return seq[lo:hi + 1]
    adj = {n: set() for n in net.nodes}
    for h in net.edges.values():
        for a in h.nodes:
            adj[a] |= h.nodes - {a}
    start = start if start is not None else next(iter(net.nodes))
    seen, frontier = [start], [start]
    while frontier and len(seen) < size:
        nxt = []
        for a in frontier:
            for b in sorted(adj[a], key=repr):
                if b not in seen and len(seen) < size:
                    seen.append(b)
                    nxt.append(b)
        frontier = nxt
    return seen


def _is_reg(n):
    return isinstance(n, tuple) and len(n) == 2 and n[0] == "reg"


def element_variance(target_variance: float, bond_dim: float = None, n_edges: int = None,
                     n_nodes: int = None, log_bond_volume: float | None = None) -> float:
    """Per-element variance ``(target / D**E) ** (1 / V)``, evaluated in log space.

    For unequal bond extents pass ``log_bond_volume = sum(log D_e)`` instead of
    ``bond_dim`` and ``n_edges``.
    """
    if target_variance <= 0 or not n_nodes or n_nodes <= 0:
        raise ValueError("target variance and node count must be positive")
    if log_bond_volume is None:
        if bond_dim is None or bond_dim <= 0 or n_edges is None or n_edges < 0:
            raise ValueError("need a positive bond_dim and non-negative n_edges")
        log_bond_volume = n_edges * math.log(bond_dim)
    log_var = (math.log(target_variance) - log_bond_volume) / n_nodes
    if log_var > _LOG_MAX or log_var < _LOG_TINY:
        raise RangeError(f"element variance exp({log_var:.1f}) is outside double range")
    return math.exp(log_var)


def _draw(rng: np.random.Generator, shape, variance, distribution):
    if distribution == "normal":
        return rng.standard_normal(shape) * math.sqrt(variance)
    half = math.sqrt(3.0 * variance)
    return rng.uniform(-half, half, size=shape)


def fans(net: TensorNetwork) -> tuple:
    """(fan_in, fan_out): products of the input-leg and output-leg extents."""
    fan_in = math.prod(net.edges[e].dim for e in net.input_edges) if net.input_edges else 1
    fan_out = net.edges[net.output_edge].dim if net.output_edge is not None else 1
    return float(fan_in), float(fan_out)


def dense_variance(subnet: TensorNetwork, spec: InitSpec, n_nodes=None, n_edges=None,
                   bond_dim=None) -> float:
    fan_in, fan_out = fans(subnet)
    target = spec.target(fan_in, fan_out)
    if n_nodes is None:
        n_nodes = len(subnet)
    if n_edges is None:
        log_vol = sum(math.log(subnet.edges[e].dim) for e in summed_edges(subnet))
        return element_variance(target, n_nodes=n_nodes, log_bond_volume=log_vol)
    if bond_dim is None:
        dims = {subnet.edges[e].dim for e in summed_edges(subnet)}
        if len(dims) > 1:
            raise ValueError("bond extents differ; pass bond_dim or omit n_edges")
        bond_dim = dims.pop() if dims else 1
    return element_variance(target, bond_dim, n_edges, n_nodes)


def init_dense(net: TensorNetwork, spec: InitSpec, n_nodes: int | None = None,
               n_edges: int | None = None, *, bond_dim=None, nodes=None,
               rng: np.random.Generator | None = None, variance: float | None = None):
    """Fill ``nodes`` (default: every node) i.i.d. with the variance-matched law.

    Counts default to those of ``net`` itself.  ``variance`` overrides the
    computed per-element variance.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    targets = list(net.nodes) if nodes is None else [n for n in net.nodes if n in set(nodes)]
    if variance is None:
        variance = dense_variance(net, spec, n_nodes, n_edges, bond_dim)
    updates = {n: Tensor(_draw(rng, net[n].shape, variance, spec.distribution), net[n].labels)
               for n in targets}
    return net.replace(updates)


def keras_fans(shape) -> tuple:
    """Fan-in/out the way deep-learning frameworks compute them for one array."""
    if len(shape) == 1:
        return float(shape[0]), float(shape[0])
    if len(shape) == 2:
        return float(shape[0]), float(shape[1])
    rf = math.prod(shape[:-2])
    return float(shape[-2] * rf), float(shape[-1] * rf)


def init_per_tensor(net: TensorNetwork, spec: InitSpec, rng=None) -> TensorNetwork:
    """Naive baseline: each tensor initialized on its own as if it were a dense layer."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    updates = {}
    for n, t in net.nodes.items():
        if _is_reg(n):
            continue
        var = spec.target(*keras_fans(t.shape))
        updates[n] = Tensor(_draw(rng, t.shape, var, spec.distribution), t.labels)
    return net.replace(updates)


def _copy_like(shape, internal_axes) -> np.ndarray:
    # ones where all internal indices agree (extents may differ: run to the smallest)
    data = np.zeros([shape[a] for a in internal_axes])
    k = np.arange(min(data.shape)) if data.ndim else None
    if data.ndim:
        data[(k,) * data.ndim] = 1.0
    else:
        data = np.ones(())
    return data


def copy_tensor_for(net: TensorNetwork, node, pin_vector) -> Tensor:
    """Copy tensor on the node's internal legs tensored with ``pin_vector`` on each input leg."""
    t = net[node]
    kinds = [net.edges[l].external for l in t.labels]
    if "output" in kinds:
        raise InvalidSelectionError(f"node {node!r} carries the output leg")
    internal = [i for i, k in enumerate(kinds) if k in (None, "dangling")]
    inputs = [i for i, k in enumerate(kinds) if k == "input"]
    data = _copy_like(t.shape, internal)
    labels = [t.labels[i] for i in internal]
    v = np.asarray(pin_vector, dtype=np.float64)
    for i in inputs:
        if v.shape != (t.shape[i],):
            raise StructuralError(
                f"pin vector of length {v.size} does not fit input leg {t.labels[i]!r} "
                f"of extent {t.shape[i]}")
        data = np.multiply.outer(data, v)
        labels.append(t.labels[i])
    return permute(Tensor(data, labels), t.labels)


def copy_node_init(net: TensorNetwork, plan: CopyInitPlan, spec: InitSpec,
                   rng: np.random.Generator | None = None) -> TensorNetwork:
    """Copy-node initialization.

    Nodes outside the dense selection become copy tensors (with the pin vector
    on input legs); the dense nodes are variance-matched using the node and
    edge counts of the folded hypergraph.  Copy nodes stay trainable.
    """
    dense = plan.resolve(net)
    copy_set = [n for n in net.nodes if n not in dense and not _is_reg(n)]
    updates = {n: copy_tensor_for(net, n, plan.pin_vector) for n in copy_set}
    base = [n for n in net.nodes if _is_reg(n)]
    if base:
        raise StructuralError("initialize before inserting rank regularizers")
    n_nodes, n_edges, subnet = effective_hypergraph(net, copy_set)
    variance = dense_variance(subnet, spec)
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    out = init_dense(net, spec, nodes=[n for n in net.nodes if n in dense], rng=rng,
                     variance=variance)
    out = out.replace(updates, frozen=out.frozen - set(copy_set))
    return out


def sample_w_element(net: TensorNetwork, spec: InitSpec, n_samples: int, index=None,
                     plan: CopyInitPlan | None = None, naive: bool = False) -> np.ndarray:
    """Monte-Carlo draws of one element of the contracted operator.

    ``index`` maps each input leg to a basis position (default 0) and, if the
    network has an output leg, ``"out"`` to a class index.  Every draw is a
    fresh initialization from a single seeded generator.
    """
    index = dict(index or {})
    inputs = {}
    for e in net.input_edges:
        vec = np.zeros(net.edges[e].dim)
        vec[index.get(e, 0)] = 1.0
        inputs[e] = vec
    cls = index.get(net.output_edge, 0)
    rng = np.random.default_rng(spec.seed)
    if plan is None and not naive:
        return _sample_dense_batched(net, spec, n_samples, index, cls, rng)
    draws = np.empty(n_samples)
    for s in range(n_samples):
        if plan is not None:
            init = copy_node_init(net, plan, spec, rng=rng)
        elif naive:
            init = init_per_tensor(net, spec, rng=rng)
        else:
            init = init_dense(net, spec, rng=rng)
        w = full_contract(init, inputs).data
        draws[s] = w[cls] if w.ndim else float(w)
    return draws


def _sample_dense_batched(net, spec, n_samples, index, cls, rng, chunk=10_000):
    # all nodes share one variance, so whole batches of draws contract in one einsum
    variance = dense_variance(net, spec)
    letters = {}
    for e in net.edges:
        letters[e] = chr(ord("a") + len(letters)) if len(letters) < 25 else chr(
            ord("A") + len(letters) - 25)
    out = np.empty(n_samples)
    done = 0
    while done < n_samples:
        b = min(chunk, n_samples - done)
        operands, subs = [], []
        for n, t in net.nodes.items():
            x = _draw(rng, (b,) + t.shape, variance, spec.distribution)
            # slice input and output legs at the requested basis positions
            sl, kept = [slice(None)], []
            for l in t.labels:
                if l in net.input_edges:
                    sl.append(index.get(l, 0))
                elif l == net.output_edge:
                    sl.append(cls)
                else:
                    sl.append(slice(None))
                    kept.append(l)
            operands.append(x[tuple(sl)])
            subs.append("z" + "".join(letters[l] for l in kept))
        out[done:done + b] = np.einsum(",".join(subs) + "->z", *operands, optimize=True)
        done += b
    return out
