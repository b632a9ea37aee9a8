"""Hypergraph tensor networks.

A :class:`TensorNetwork` stores each node's tensor with axis labels equal to
the ids of the (hyper)edges those axes sit on.  An edge shared by two nodes is
an ordinary bond; an edge shared by more is a hyperedge (what a copy node
produces once it is folded away).  Edges held by a single node must be tagged
as external: ``"input"`` (a feature leg fed a vector at evaluation time),
``"output"`` (the class leg) or ``"dangling"`` (a bond summed with unit
weight, left behind when copy nodes are removed).
"""

import json
import random
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from tnml.errors import DimensionError, InvalidSelectionError, StructuralError
from tnml.tensor import Tensor, contract, relabel

NodeId = Hashable
EdgeId = Hashable

EXTERNAL_KINDS = ("input", "output", "dangling")


@dataclass(frozen=True)
class Hyperedge:
    dim: int
    slots: frozenset  # {(node_id, axis_index)}
    external: str | None = None

    @property
    def nodes(self):
        return {n for n, _ in self.slots}


class TensorNetwork:
    """Immutable hypergraph of labelled tensors.

    Parameters
    ----------
    nodes:
        node id -> :class:`Tensor` whose labels are edge ids.
    external:
        edge id -> one of ``"input"``, ``"output"``, ``"dangling"`` for every
        edge held by exactly one node.
    frozen:
        node ids excluded from training and from ``param_count(trainable=True)``.
    meta:
        free-form annotations, e.g. the site order of a chain.
    """

    def __init__(self, nodes: Mapping[NodeId, Tensor], external: Mapping[EdgeId, str] = None,
                 frozen=(), meta=None):
        self._nodes = dict(nodes)
        external = dict(external or {})
        self.frozen = frozenset(frozen)
        self.meta = dict(meta or {})
        for n in self.frozen:
            if n not in self._nodes:
                raise StructuralError(f"frozen node {n!r} not in network")

        slots: dict = {}
        dims: dict = {}
        for n, t in self._nodes.items():
            for ax, (label, extent) in enumerate(zip(t.labels, t.shape)):
                if label in dims and dims[label] != extent:
                    raise DimensionError(
                        f"edge {label!r} has extents {dims[label]} and {extent}")
                dims[label] = extent
                slots.setdefault(label, set()).add((n, ax))

        edges = {}
        for e, s in slots.items():
            kind = external.get(e)
            if kind is not None and kind not in EXTERNAL_KINDS:
                raise StructuralError(f"unknown external kind {kind!r} for edge {e!r}")
            if kind is None and len(s) < 2:
                raise StructuralError(f"edge {e!r} has a single slot but is not tagged external")
            if kind is not None and len(s) != 1:
                raise StructuralError(f"external edge {e!r} must have exactly one slot")
            edges[e] = Hyperedge(dims[e], frozenset(s), kind)
        for e in external:
            if e not in edges:
                raise StructuralError(f"external tag on unknown edge {e!r}")
        self._edges = edges

        outputs = [e for e, h in edges.items() if h.external == "output"]
        if len(outputs) > 1:
            raise StructuralError(f"more than one output edge: {outputs}")
        self.output_edge = outputs[0] if outputs else None

    @property
    def nodes(self) -> dict:
        return dict(self._nodes)

    @property
    def edges(self) -> dict:
        return dict(self._edges)

    def __getitem__(self, node_id) -> Tensor:
        return self._nodes[node_id]

    def __len__(self):
        return len(self._nodes)

    @property
    def input_edges(self) -> list:
        return [e for e, h in self._edges.items() if h.external == "input"]

    @property
    def internal_edges(self) -> list:
        return [e for e, h in self._edges.items() if h.external is None]

    @property
    def output_node(self):
        if self.output_edge is None:
            return None
        (node, _), = self._edges[self.output_edge].slots
        return node

    def external_tags(self) -> dict:
        return {e: h.external for e, h in self._edges.items() if h.external is not None}

    def replace(self, updates: Mapping[NodeId, Tensor] = None, frozen=None,
                meta=None) -> "TensorNetwork":
        """Copy of the network with some node tensors swapped out."""
        nodes = dict(self._nodes)
        for n, t in (updates or {}).items():
            if n not in nodes:
                raise StructuralError(f"unknown node {n!r}")
            old = nodes[n]
            if isinstance(t, Tensor):
                if set(t.labels) != set(old.labels):
                    raise StructuralError(f"node {n!r}: labels {t.labels} != {old.labels}")
            else:
                t = Tensor(np.asarray(t, dtype=np.float64).reshape(old.shape), old.labels)
            nodes[n] = t
        return TensorNetwork(nodes, self.external_tags(),
                             self.frozen if frozen is None else frozen,
                             self.meta if meta is None else meta)


# ----------------------------------------------------------------------------
# contraction


@dataclass
class ContractionOrder:
    """Pairwise merges ``(a, b)``; the merged tensor keeps the id ``a``."""

    steps: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.steps)

    def __len__(self):
        return len(self.steps)


def merge_plan(t_a: Tensor, t_b: Tensor, live_elsewhere) -> tuple:
    """Split the labels shared by two tensors into summed and kept pairs.

    A shared label is summed unless some other tensor still holds it or it is
    an open leg of the whole network (``live_elsewhere(label)`` is true).
    """
    pairs, keep = [], []
    for label in t_a.labels:
        if label in t_b.labels:
            (keep if live_elsewhere(label) else pairs).append((label, label))
    return pairs, keep


def _absorb_inputs(net: TensorNetwork, inputs: Mapping[EdgeId, object]) -> dict:
    wanted = set(net.input_edges)
    given = set(inputs)
    if given - wanted:
        raise StructuralError(f"inputs given for unknown legs {sorted(map(repr, given - wanted))}")
    if wanted - given:
        raise StructuralError(f"no input supplied for legs {sorted(map(repr, wanted - given))}")
    work = net.nodes
    for e in net.input_edges:
        vec = np.asarray(inputs[e], dtype=np.float64)
        if vec.shape != (net.edges[e].dim,):
            raise DimensionError(
                f"input for leg {e!r} has shape {vec.shape}, expected ({net.edges[e].dim},)")
        (node, _), = net.edges[e].slots
        work[node] = contract(work[node], Tensor._wrap(vec, (e,)), [(e, e)])
    return work


def _sum_dangling(work: dict, net: TensorNetwork) -> dict:
    for e, h in net.edges.items():
        if h.external == "dangling":
            (node, _), = h.slots
            work[node] = contract(work[node], Tensor._wrap(np.ones(h.dim), (e,)), [(e, e)])
    return work


def _holders(work: dict) -> dict:
    count: dict = {}
    for t in work.values():
        for label in t.labels:
            count[label] = count.get(label, 0) + 1
    return count


def full_contract(net: TensorNetwork, inputs: Mapping[EdgeId, object] = None,
                  order: ContractionOrder | None = None, monitor: list | None = None) -> Tensor:
    """Contract the whole network after feeding every input leg a vector.

    Each feature vector is first absorbed into its node, then nodes are merged
    pairwise following ``order`` (default: :func:`default_order`).  The result
    carries the output leg only (a scalar if there is none).  If ``monitor``
    is a list, the max absolute element after every merge is appended to it.
    """
    work = _absorb_inputs(net, inputs or {})
    work = _sum_dangling(work, net)
    if order is None:
        order = default_order(net)
    open_legs = {net.output_edge} if net.output_edge is not None else set()
    count = _holders(work)

    for a, b in order:
        if a not in work or b not in work or a == b:
            raise StructuralError(f"invalid merge step ({a!r}, {b!r})")
        ta, tb = work.pop(a), work.pop(b)
        pairs, keep = merge_plan(
            ta, tb, lambda l: count[l] > 2 or l in open_legs)
        merged = contract(ta, tb, pairs, keep)
        for l, _ in pairs:
            count[l] -= 2
        for l, _ in keep:
            count[l] -= 1
        work[a] = merged
        if monitor is not None:
            monitor.append(float(np.max(np.abs(merged.data))) if merged.size else 0.0)

    if len(work) != 1:
        raise StructuralError(f"contraction order leaves {len(work)} tensors")
    (result,) = work.values()
    if set(result.labels) != open_legs:
        raise StructuralError(f"result carries legs {result.labels}, expected {open_legs}")
    return result


def chain_order(net: TensorNetwork) -> ContractionOrder:
    """Sweep both ends of a chain toward the output site."""
    sites = net.meta["sites"]
    p = sites.index(net.output_node) if net.output_node is not None else 0
    steps = []
    for i in range(len(sites) - 1, p, -1):
        steps.append((sites[i - 1], sites[i]))
    for i in range(p):
        steps.append((sites[i + 1], sites[i]))
    return ContractionOrder(steps)


def greedy_order(net: TensorNetwork) -> ContractionOrder:
    """Repeatedly merge the connected pair with the smallest result."""
    shapes = {n: dict(zip(t.labels, t.shape)) for n, t in net.nodes.items()}
    for e in net.input_edges:
        (node, _), = net.edges[e].slots
        shapes[node].pop(e)
    for e, h in net.edges.items():
        if h.external == "dangling":
            (node, _), = h.slots
            shapes[node].pop(e)
    open_legs = {net.output_edge} if net.output_edge is not None else set()
    ids = sorted(shapes, key=repr)
    steps = []
    while len(ids) > 1:
        count: dict = {}
        for n in ids:
            for l in shapes[n]:
                count[l] = count.get(l, 0) + 1
        best = None
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                shared = set(shapes[a]) & set(shapes[b])
                out = {**shapes[a], **shapes[b]}
                for l in shared:
                    if count[l] == 2 and l not in open_legs:
                        out.pop(l)
                size = int(np.prod(list(out.values()), dtype=np.int64))
                key = (0 if shared else 1, size)
                if best is None or key < best[0]:
                    best = (key, a, b, out)
        _, a, b, out = best
        steps.append((a, b))
        shapes[a] = out
        ids.remove(b)
    return ContractionOrder(steps)


def default_order(net: TensorNetwork) -> ContractionOrder:
    if net.meta.get("kind") == "mps":
        return chain_order(net)
    return greedy_order(net)


def random_order(net: TensorNetwork, rng: random.Random) -> ContractionOrder:
    """Uniformly random merge sequence (any pair at every step is valid)."""
    ids = list(net.nodes)
    steps = []
    while len(ids) > 1:
        a, b = rng.sample(ids, 2)
        steps.append((a, b))
        ids.remove(b)
    return ContractionOrder(steps)


# ----------------------------------------------------------------------------
# copy-node folding


class _UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, x, y):
        rx, ry = self.find(x), self.find(y)
        if rx != ry:
            # deterministic representative
            if repr(ry) < repr(rx):
                rx, ry = ry, rx
            self.parent[ry] = rx


def effective_hypergraph(net: TensorNetwork, copy_set) -> tuple:
    """Fold the nodes in ``copy_set`` into hyperedges.

    Internal edges incident to a common copy node are merged (transitively,
    through chains of copy nodes).  Returns ``(n_nodes, n_edges, subnet)``
    where ``subnet`` holds the remaining dense nodes with merged edges
    relabelled to one representative id.  ``n_edges`` counts every merged
    edge that is summed over and touches a dense node: bonds between dense
    nodes, plus bonds that lead from a dense node into copy-only territory
    (tagged ``"dangling"`` in ``subnet``; they still carry a sum over their
    extent).
    """
    copy_set = set(copy_set)
    unknown = copy_set - set(net.nodes)
    if unknown:
        raise StructuralError(f"copy_set names unknown nodes {sorted(map(repr, unknown))}")
    if net.output_node is not None and net.output_node in copy_set:
        raise InvalidSelectionError("the node carrying the output leg cannot be a copy node")

    internal = net.internal_edges
    uf = _UnionFind(internal)
    for n in copy_set:
        legs = [l for l in net[n].labels if net.edges[l].external is None]
        for l in legs[1:]:
            uf.union(legs[0], l)

    dense = [n for n in net.nodes if n not in copy_set]
    nodes = {}
    for n in dense:
        t = net[n]
        mapping = {l: uf.find(l) for l in t.labels if net.edges[l].external is None}
        nodes[n] = relabel(t, mapping)

    holders: dict = {}
    for n, t in nodes.items():
        for l in t.labels:
            holders.setdefault(l, []).append(n)
    external = {}
    for e, kind in net.external_tags().items():
        if e in holders:
            external[e] = kind
    n_edges = 0
    for l, hs in holders.items():
        if l in external:
            continue
        n_edges += 1
        if len(hs) == 1:
            external[l] = "dangling"
    subnet = TensorNetwork(nodes, external, frozen=net.frozen - copy_set,
                           meta={k: v for k, v in net.meta.items() if k != "kind"})
    return len(dense), n_edges, subnet


def summed_edges(net: TensorNetwork) -> list:
    """Edges whose index is summed in a full contraction (internal + dangling)."""
    return [e for e, h in net.edges.items() if h.external in (None, "dangling")]


# ----------------------------------------------------------------------------
# MPS construction and bookkeeping


def bond_label(i: int) -> str:
    return f"b{i}"


def feature_label(i: int) -> str:
    return f"x{i}"


OUTPUT_LABEL = "out"


def mps_site_labels(i: int, n_sites: int, output_site: int | None) -> tuple:
    """Axis labels of site ``i``: left bond, class leg, feature leg, right bond."""
    labels = []
    if i > 0:
        labels.append(bond_label(i - 1))
    if i == output_site:
        labels.append(OUTPUT_LABEL)
    labels.append(feature_label(i))
    if i < n_sites - 1:
        labels.append(bond_label(i))
    return tuple(labels)


def mps_from_tensors(arrays: Sequence[np.ndarray], output_site: int = 0) -> TensorNetwork:
    """Wrap per-site arrays (axes ordered left, [class], feature, right) as a network."""
    n = len(arrays)
    nodes = {i: Tensor(a, mps_site_labels(i, n, output_site)) for i, a in enumerate(arrays)}
    external = {feature_label(i): "input" for i in range(n)}
    if output_site is not None:
        external[OUTPUT_LABEL] = "output"
    return TensorNetwork(nodes, external,
                         meta={"kind": "mps", "sites": list(range(n)), "output_site": output_site})


def build_mps(n_sites: int, feature_dim: int, bond_dim, n_classes: int,
              output_site: int = 0) -> TensorNetwork:
    """Open-boundary MPS with zero tensors.

    ``bond_dim`` is either one extent for every bond or a list of ``n_sites - 1``.
    """
    if n_sites < 2:
        raise ValueError("an MPS needs at least two sites")
    if not 0 <= output_site < n_sites:
        raise ValueError(f"output_site {output_site} outside 0..{n_sites - 1}")
    if feature_dim < 1 or n_classes < 1:
        raise ValueError("feature_dim and n_classes must be positive")
    bonds = list(bond_dim) if np.ndim(bond_dim) else [int(bond_dim)] * (n_sites - 1)
    if len(bonds) != n_sites - 1 or min(bonds) < 1:
        raise ValueError(f"need {n_sites - 1} positive bond extents, got {bonds}")
    arrays = []
    for i in range(n_sites):
        shape = []
        if i > 0:
            shape.append(bonds[i - 1])
        if i == output_site:
            shape.append(n_classes)
        shape.append(feature_dim)
        if i < n_sites - 1:
            shape.append(bonds[i])
        arrays.append(np.zeros(shape))
    return mps_from_tensors(arrays, output_site)


def param_count(net: TensorNetwork, trainable: bool = False) -> int:
    """Total number of tensor elements; ``trainable=True`` skips frozen nodes."""
    return int(sum(t.size for n, t in net.nodes.items()
                   if not (trainable and n in net.frozen)))


# ----------------------------------------------------------------------------
# topology text format


def dumps_topology(net: TensorNetwork) -> str:
    """One JSON object per line: a header, then nodes, then edges."""
    lines = [json.dumps({"format": "tnml-topology", "version": 1, "meta": net.meta})]
    for n, t in net.nodes.items():
        lines.append(json.dumps({"node": n, "labels": list(t.labels), "shape": list(t.shape),
                                 "frozen": n in net.frozen}))
    for e, h in net.edges.items():
        lines.append(json.dumps({"edge": e, "dim": h.dim, "external": h.external,
                                 "slots": sorted([[n, ax] for n, ax in h.slots], key=repr)}))
    return "\n".join(lines) + "\n"


def loads_topology(text: str, tensors: Mapping = None) -> TensorNetwork:
    """Rebuild a network from :func:`dumps_topology` output.

    Node tensors come from ``tensors`` (node id -> array) or default to zeros.
    JSON turns tuple ids into lists and dict keys into strings, so ids should
    be ints or strings.
    """
    rows = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not rows or rows[0].get("format") != "tnml-topology":
        raise StructuralError("not a tnml topology document")
    meta = rows[0].get("meta", {})
    nodes, frozen, external = {}, [], {}
    for row in rows[1:]:
        if "node" in row:
            n = row["node"]
            data = np.zeros(row["shape"]) if tensors is None else np.asarray(tensors[n])
            if list(data.shape) != row["shape"]:
                raise DimensionError(f"node {n!r}: tensor shape {data.shape} != {row['shape']}")
            nodes[n] = Tensor(data, row["labels"])
            if row.get("frozen"):
                frozen.append(n)
        elif "edge" in row and row["external"] is not None:
            external[row["edge"]] = row["external"]
    net = TensorNetwork(nodes, external, frozen, meta)
    for row in rows[1:]:
        if "edge" in row:
            h = net.edges[row["edge"]]
            if h.dim != row["dim"] or sorted(map(list, h.slots), key=repr) != row["slots"]:
                raise StructuralError(f"edge {row['edge']!r} does not match its node axes")
    return net
