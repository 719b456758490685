"""Sparse propagation of high-order derivative tensors through message
passing.

Tensors store, per node v, the nonzero partial derivatives of the current
node features with respect to the initial features: a canonical key lists up
to k distinct source coordinates (u, j) with their derivative orders, and the
stored value is the dense vector over output feature dimensions.

Three updates mirror the forward pass: a linear aggregation over neighbors, a
left-multiplication by the MLP weight (the bias drops out), and the
higher-order chain rule over set partitions for the activation. Interleaving
them with the forward evaluation yields all derivative tensors in one
message-passing-like sweep.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tape as tp
from .activations import ActivationKind, DEFAULT_MAX_ORDER
from .graphcore import Graph
from .mpnn import ForwardRecord, MpnnModel, aggregate, mlp_forward, mpnn_forward

__all__ = ["Key", "canonical_key", "key_total", "key_sources", "merge_keys",
           "PartitionTable", "SparseDerivTensor", "DerivConfigError",
           "deriv_init", "deriv_aggregate", "deriv_affine", "deriv_activation",
           "compute_all", "ComputeResult", "sparsity_stats", "PRUNE_TOL"]

PRUNE_TOL = 1e-14

# A key is a tuple of (source node, source feature dim, derivative order)
# triples, sorted by (node, dim), duplicates merged by summing orders.
Key = tuple


class DerivConfigError(ValueError):
    """Unsupported (k, m) configuration or malformed query."""


def canonical_key(sources, alpha) -> Key:
    """Canonical form of a derivative key: sorted, merged, orders >= 1."""
    if len(sources) != len(alpha):
        raise DerivConfigError("sources and alpha must align")
    merged: dict = {}
    for (u, j), a in zip(sources, alpha):
        a = int(a)
        if a < 1:
            raise DerivConfigError("derivative orders must be >= 1")
        merged[(int(u), int(j))] = merged.get((int(u), int(j)), 0) + a
    return tuple((u, j, a) for (u, j), a in sorted(merged.items()))


def key_total(key: Key) -> int:
    return sum(t[2] for t in key)


def key_sources(key: Key) -> int:
    return len(key)


def merge_keys(a: Key, b: Key) -> Key:
    merged: dict = {}
    for u, j, al in a + b:
        merged[(u, j)] = merged.get((u, j), 0) + al
    return tuple((u, j, al) for (u, j), al in sorted(merged.items()))


# ---------------------------------------------------------------------------
# Set partitions for the higher-order chain rule
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _set_partitions(q: int) -> tuple:
    """All partitions of {0..q-1}, each a tuple of sorted blocks."""
    if q == 0:
        return ((),)
    out = []
    for part in _set_partitions(q - 1):
        elem = q - 1
        out.append(part + ((elem,),))
        for i in range(len(part)):
            out.append(part[:i] + (part[i] + (elem,),) + part[i + 1:])
    return tuple(out)


class PartitionTable:
    """Set partitions up to a maximum order, with block-size groupings and
    partition-into-j-blocks counts."""

    def __init__(self, max_order: int = DEFAULT_MAX_ORDER):
        self.max_order = max_order
        self._parts = {q: _set_partitions(q) for q in range(1, max_order + 1)}

    def partitions(self, q: int) -> tuple:
        if q < 1 or q > self.max_order:
            raise DerivConfigError(f"order {q} outside table (max {self.max_order})")
        return self._parts[q]

    def bell(self, q: int) -> int:
        return len(self.partitions(q))

    def stirling(self, q: int, j: int) -> int:
        """Number of partitions of q elements into exactly j blocks."""
        return sum(1 for p in self.partitions(q) if len(p) == j)

    def by_block_sizes(self, q: int) -> dict:
        """Multiplicity of each block-size multiset among the partitions."""
        out: dict = {}
        for p in self.partitions(q):
            sizes = tuple(sorted(len(b) for b in p))
            out[sizes] = out.get(sizes, 0) + 1
        return out


# ---------------------------------------------------------------------------
# Sparse tensor container
# ---------------------------------------------------------------------------

@dataclass
class SparseDerivTensor:
    """Nonzero derivative entries in canonical order.

    ``vs[i]`` is the node owning row i (``vs is None`` for tensors attached to
    the pooled output), ``keys[i]`` the canonical source key, and row i of
    ``values`` the dense vector over the current feature width. Rows are
    sorted by (node, key), and all-zero rows are pruned on construction.
    """

    k: int
    m: int
    n: int
    width: int
    vs: np.ndarray | None
    keys: list
    values: object
    layer_tag: str = ""
    d_in: int = 1  # input feature count the source dims j range over
    _index: dict | None = field(default=None, repr=False, compare=False)

    @property
    def node_indexed(self) -> bool:
        return self.vs is not None

    @property
    def nnz(self) -> int:
        return len(self.keys)

    def values_array(self) -> np.ndarray:
        return np.asarray(tp.value_of(self.values))

    def per_node_counts(self) -> np.ndarray:
        if not self.node_indexed:
            raise DerivConfigError("output tensor has no per-node counts")
        return np.bincount(self.vs, minlength=self.n)

    def entries(self):
        """Yield (v, key, value row) in canonical order; v is None for output tensors."""
        vals = self.values_array()
        for i, key in enumerate(self.keys):
            yield (None if self.vs is None else int(self.vs[i]), key, vals[i])

    def _build_index(self):
        if self._index is None:
            if self.vs is None:
                self._index = {key: i for i, key in enumerate(self.keys)}
            else:
                self._index = {(int(v), key): i
                               for i, (v, key) in enumerate(zip(self.vs, self.keys))}
        return self._index

    def lookup(self, v, sources, alpha) -> np.ndarray:
        """Dense value vector for one derivative; zeros when absent.

        The query is canonicalized first, so source listing order never
        matters (mixed partials commute by construction).
        """
        key = canonical_key(sources, alpha)
        idx = self._build_index()
        i = idx.get(key if self.vs is None else (int(v), key))
        if i is None:
            return np.zeros(self.width)
        return self.values_array()[i]

    def node_slices(self) -> np.ndarray:
        """Row-range boundaries per node (valid because rows sort by node first)."""
        return np.searchsorted(self.vs, np.arange(self.n + 1))


def _assemble(k, m, n, width, vs, keys, values, layer_tag="", presorted=False, d_in=1):
    """Sort rows canonically, prune near-zero rows, and wrap in a tensor."""
    E = len(keys)
    if E == 0:
        return SparseDerivTensor(k, m, n, width,
                                 np.zeros(0, dtype=np.int64) if vs is not None else None,
                                 [], np.zeros((0, width)), layer_tag, d_in)
    if not presorted:
        if vs is None:
            order = sorted(range(E), key=lambda i: keys[i])
        else:
            order = sorted(range(E), key=lambda i: (vs[i], keys[i]))
        if order != list(range(E)):
            keys = [keys[i] for i in order]
            if vs is not None:
                vs = vs[np.asarray(order)]
            values = tp.gather_rows(values, np.asarray(order))
    keep = np.flatnonzero(np.max(np.abs(np.asarray(tp.value_of(values))), axis=1) > PRUNE_TOL)
    if len(keep) != E:
        keys = [keys[i] for i in keep]
        if vs is not None:
            vs = vs[keep]
        values = tp.gather_rows(values, keep)
    if vs is not None:
        vs = np.ascontiguousarray(vs, dtype=np.int64)
    return SparseDerivTensor(k, m, n, width, vs, keys, values, layer_tag, d_in)


# ---------------------------------------------------------------------------
# The three propagation updates
# ---------------------------------------------------------------------------

def deriv_init(g: Graph, k: int, m: int, d: int | None = None) -> SparseDerivTensor:
    """Layer-0 tensor: the only nonzeros are the unit first-order derivatives
    of each input coordinate with respect to itself."""
    if k not in (1, 2):
        raise DerivConfigError("supported derivative arities are k in {1, 2}")
    if not 1 <= m <= DEFAULT_MAX_ORDER:
        raise DerivConfigError(f"max total order must be in [1, {DEFAULT_MAX_ORDER}]")
    n, d = g.num_nodes, g.feature_dim if d is None else d
    vs = np.repeat(np.arange(n, dtype=np.int64), d)
    keys = [((v, j, 1),) for v in range(n) for j in range(d)]
    values = np.tile(np.eye(d), (n, 1))
    return _assemble(k, m, n, d, vs, keys, values, "init", presorted=True, d_in=d)


def deriv_aggregate(D: SparseDerivTensor, g: Graph, agg, concat: bool = False) -> SparseDerivTensor:
    """Linear-aggregation update: derivatives combine with the same
    coefficients as the features; optionally concatenated with the node's own
    pass-through copy when the layer feeds h_v (+) aggregate into its MLP."""
    if not D.node_indexed:
        raise DerivConfigError("aggregation applies to node-indexed tensors")
    c_self, b = agg.coefficients(g)
    slices = D.node_slices()
    counts = (slices[1:] - slices[:-1])

    # one contribution per (directed edge, source-node entry)
    per_edge = counts[g.indices]
    src_rows = np.repeat(slices[:-1][g.indices], per_edge)
    if len(src_rows):
        step = np.arange(len(src_rows)) - np.repeat(
            np.concatenate(([0], np.cumsum(per_edge)[:-1])), per_edge)
        src_rows = src_rows + step
    tgt_nodes = np.repeat(g.row_index, per_edge)
    coefs = b[tgt_nodes]

    include_self = concat or c_self is not None
    slot_of: dict = {}
    slot_list: list = []

    def slot(v, key):
        s = slot_of.get((v, key))
        if s is None:
            s = len(slot_list)
            slot_of[(v, key)] = s
            slot_list.append((v, key))
        return s

    if include_self:
        for v, key in zip(D.vs, D.keys):
            slot(int(v), key)
    neigh_slots = np.fromiter(
        (slot(int(v), D.keys[r]) for v, r in zip(tgt_nodes, src_rows)),
        dtype=np.int64, count=len(src_rows))

    order = sorted(range(len(slot_list)), key=lambda s: slot_list[s])
    rank = np.empty(len(slot_list), dtype=np.int64)
    rank[np.asarray(order, dtype=np.int64)] = np.arange(len(order))
    slot_list = [slot_list[s] for s in order]
    neigh_slots = rank[neigh_slots] if len(neigh_slots) else neigh_slots
    self_slots = rank[np.arange(D.nnz)] if include_self else None
    n_slots = len(slot_list)

    neigh_vals = tp.mul(tp.gather_rows(D.values, src_rows), coefs[:, None])
    if c_self is not None:
        agg_vals = tp.segment_sum(
            tp.concat_rows([tp.mul(c_self, D.values), neigh_vals]),
            np.concatenate([self_slots, neigh_slots]), n_slots)
    else:
        agg_vals = tp.segment_sum(neigh_vals, neigh_slots, n_slots)

    if concat:
        passthrough = tp.scatter_rows(D.values, self_slots, n_slots)
        out_vals = tp.concat_cols([passthrough, agg_vals])
        width = 2 * D.width
    else:
        out_vals = agg_vals
        width = D.width

    out_vs = np.asarray([v for v, _ in slot_list], dtype=np.int64)
    out_keys = [key for _, key in slot_list]
    return _assemble(D.k, D.m, D.n, width, out_vs, out_keys, out_vals,
                     D.layer_tag, presorted=True, d_in=D.d_in)


def deriv_affine(D: SparseDerivTensor, W) -> SparseDerivTensor:
    """Left-multiply every value vector by the weight; the bias term drops."""
    wv = tp.value_of(W)
    if wv.shape[1] != D.width:
        raise DerivConfigError(f"weight width {wv.shape[1]} != tensor width {D.width}")
    values = tp.linear(D.values, W)
    return _assemble(D.k, D.m, D.n, wv.shape[0], D.vs, list(D.keys), values,
                     D.layer_tag, presorted=True, d_in=D.d_in)


def _expand_slots(key: Key) -> list:
    slots = []
    for u, j, a in key:
        slots.extend([(u, j)] * a)
    return slots


def _candidate_targets(keys_sorted, totals, k: int, m: int) -> set:
    """All canonical keys reachable as multiset-sums of present keys, capped
    at total order m and k distinct sources."""
    targets: set = set()

    def extend(start, current, total):
        for i in range(start, len(keys_sorted)):
            t = total + totals[i]
            if t > m:
                continue
            merged = merge_keys(current, keys_sorted[i]) if current else keys_sorted[i]
            if len(merged) > k:
                continue
            targets.add(merged)
            extend(i, merged, t)

    extend(0, (), 0)
    return targets


def deriv_activation(D_lin: SparseDerivTensor, preact, kind: ActivationKind,
                     table: PartitionTable) -> SparseDerivTensor:
    """Higher-order chain rule through the elementwise activation.

    For a target key of total order q, each set partition of its q expanded
    differentiation slots contributes the matching activation derivative at
    the pre-activation value times the product of the block sub-derivatives;
    enumerating labeled partitions makes repeated slots come out with the
    right multiplicities. Targets whose partitions all miss a factor vanish.
    """
    pm = np.atleast_2d(tp.value_of(preact))
    if isinstance(preact, tp.Var) and tp.value_of(preact).ndim == 1:
        preact = tp.reshape(preact, (1, -1))
    elif not isinstance(preact, tp.Var):
        preact = pm
    if pm.shape[1] != D_lin.width:
        raise DerivConfigError("pre-activation width mismatch")
    n_groups = pm.shape[0]
    vs = D_lin.vs if D_lin.node_indexed else np.zeros(D_lin.nnz, dtype=np.int64)

    sig_cache: dict = {}

    def sig(j):
        if j not in sig_cache:
            sig_cache[j] = tp.act(kind, j, preact)
        return sig_cache[j]

    if D_lin.m == 1:
        # plain chain rule; no cross-entry products can appear
        out_vals = tp.mul(tp.gather_rows(sig(1), vs), D_lin.values)
        return _assemble(D_lin.k, D_lin.m, D_lin.n, D_lin.width,
                         D_lin.vs, list(D_lin.keys), out_vals,
                         D_lin.layer_tag, presorted=True, d_in=D_lin.d_in)

    bounds = np.searchsorted(vs, np.arange(n_groups + 1))
    out_vs: list = []
    out_keys: list = []
    out_rows: list = []
    for v in range(n_groups):
        lo, hi = bounds[v], bounds[v + 1]
        if lo == hi:
            continue
        local_keys = D_lin.keys[lo:hi]
        row_of = {key: lo + i for i, key in enumerate(local_keys)}
        totals = [key_total(key) for key in local_keys]
        sig_rows: dict = {}

        def sig_row(j, v=v):
            if j not in sig_rows:
                sig_rows[j] = tp.gather_rows(sig(j), np.asarray([v]))
            return sig_rows[j]

        for target in sorted(_candidate_targets(local_keys, totals, D_lin.k, D_lin.m)):
            q = key_total(target)
            slots = _expand_slots(target)
            acc = None
            for part in table.partitions(q):
                factor = sig_row(len(part))
                ok = True
                for block in part:
                    sub = canonical_key([slots[s] for s in block], [1] * len(block))
                    r = row_of.get(sub)
                    if r is None:
                        ok = False
                        break
                    factor = tp.mul(factor, tp.gather_rows(D_lin.values, np.asarray([r])))
                if ok:
                    acc = factor if acc is None else tp.add(acc, factor)
            if acc is not None:
                out_vs.append(v)
                out_keys.append(target)
                out_rows.append(acc)

    if not out_rows:
        return _assemble(D_lin.k, D_lin.m, D_lin.n, D_lin.width,
                         np.zeros(0, dtype=np.int64) if D_lin.node_indexed else None,
                         [], np.zeros((0, D_lin.width)), D_lin.layer_tag,
                         d_in=D_lin.d_in)
    values = tp.concat_rows(out_rows)
    res = _assemble(D_lin.k, D_lin.m, D_lin.n, D_lin.width,
                    np.asarray(out_vs, dtype=np.int64), out_keys, values,
                    D_lin.layer_tag, presorted=True, d_in=D_lin.d_in)
    if not D_lin.node_indexed:
        res.vs = None
        res._index = None
    return res


def _pool_over_nodes(D: SparseDerivTensor) -> SparseDerivTensor:
    """Sum entries sharing a key across nodes (the readout's aggregation)."""
    ordered = sorted(set(D.keys))
    slot_of = {key: i for i, key in enumerate(ordered)}
    seg = np.asarray([slot_of[key] for key in D.keys], dtype=np.int64)
    values = tp.segment_sum(D.values, seg, len(ordered)) if D.nnz else np.zeros((0, D.width))
    out = _assemble(D.k, D.m, D.n, D.width, np.zeros(len(ordered), dtype=np.int64),
                    ordered, values, "out", presorted=True, d_in=D.d_in)
    out.vs = None
    out._index = None
    return out


def _mlp_deriv_steps(D, mlp, preacts, kind, table):
    """Run the affine/activation derivative updates for each MLP sublayer."""
    last = len(mlp.weights) - 1
    for i, w in enumerate(mlp.weights):
        D = deriv_affine(D, w)
        if i < last or mlp.final_activation:
            D = deriv_activation(D, preacts[i], kind, table)
    return D


def _scale_tensor(D, factor, tag):
    values = tp.mul(D.values, factor) if D.nnz else D.values
    return _assemble(D.k, D.m, D.n, D.width, D.vs, list(D.keys), values, tag,
                     presorted=True, d_in=D.d_in)


def _concat_tensors(tensors, tag):
    """Key-union horizontal concatenation (the residual stream)."""
    slots = sorted({(int(v), key) for D in tensors for v, key in zip(D.vs, D.keys)})
    slot_of = {vk: i for i, vk in enumerate(slots)}
    blocks = []
    for D in tensors:
        idx = np.asarray([slot_of[(int(v), key)] for v, key in zip(D.vs, D.keys)],
                         dtype=np.int64)
        blocks.append(tp.scatter_rows(D.values, idx, len(slots)))
    values = tp.concat_cols(blocks) if len(blocks) > 1 else blocks[0]
    vs = np.asarray([v for v, _ in slots], dtype=np.int64)
    keys = [key for _, key in slots]
    width = sum(D.width for D in tensors)
    k, m, n = tensors[0].k, tensors[0].m, tensors[0].n
    return _assemble(k, m, n, width, vs, keys, values, tag, presorted=True,
                     d_in=tensors[0].d_in)


@dataclass
class ComputeResult:
    record: ForwardRecord
    D_T: SparseDerivTensor | None
    D_out: SparseDerivTensor | None
    per_layer: list


def compute_all(model: MpnnModel, g: Graph, k: int = 1, m: int = 1,
                features=None, residual: bool = False,
                table: PartitionTable | None = None) -> ComputeResult:
    """Interleaved forward pass and derivative propagation.

    Returns the forward record, the final node-indexed tensor (the 1/t!-scaled
    concatenation over layers when ``residual``), and the pooled output tensor
    when the model has a readout. ``m = 0`` skips derivatives entirely.
    """
    model.validate()
    x = g.node_features if features is None else features
    if tp.value_of(x).shape[1] != model.in_width:
        raise DerivConfigError(
            f"feature width {tp.value_of(x).shape[1]} != model input width {model.in_width}")
    if m == 0:
        return ComputeResult(mpnn_forward(model, g, features), None, None, [])
    if table is None:
        table = PartitionTable(max(m, 1))
    D = deriv_init(g, k, m, d=tp.value_of(x).shape[1])
    rec = ForwardRecord(h=[x])
    h = x
    per_layer = []
    for t, layer in enumerate(model.layers, start=1):
        agg = aggregate(g, h, layer.agg)
        h_tilde = tp.concat_cols([h, agg]) if layer.concat else agg
        rec.h_tilde.append(h_tilde)
        D = deriv_aggregate(D, g, layer.agg, concat=layer.concat)
        layer_preacts: list = []
        h = mlp_forward(layer.mlp, h_tilde, layer_preacts)
        rec.preacts.append(layer_preacts)
        rec.h.append(h)
        D = _mlp_deriv_steps(D, layer.mlp, layer_preacts, layer.mlp.activation, table)
        D.layer_tag = f"layer{t}"
        per_layer.append(D)

    D_out = None
    if model.readout is not None:
        rec.pooled = tp.sum_rows(h)
        rec.out = mlp_forward(model.readout.mlp, rec.pooled, rec.readout_preacts)
        D_out = _pool_over_nodes(per_layer[-1])
        D_out = _mlp_deriv_steps(D_out, model.readout.mlp, rec.readout_preacts,
                                 model.readout.mlp.activation, table)
        D_out.layer_tag = "out"

    if residual and len(per_layer) > 1:
        D_T = _concat_tensors(
            [_scale_tensor(per_layer[t - 1], 1.0 / math.factorial(t), f"res{t}")
             for t in range(1, len(per_layer) + 1)], "residual")
    else:
        D_T = per_layer[-1]
    return ComputeResult(rec, D_T, D_out, per_layer)


def sparsity_stats(D: SparseDerivTensor) -> dict:
    """Exact stored-entry counts: per-node, maximum, and total."""
    if D is None or D.nnz == 0:
        n = 0 if D is None else D.n
        return {"per_node": np.zeros(n, dtype=np.int64), "s_max": 0, "nnz": 0}
    if not D.node_indexed:
        return {"per_node": np.zeros(0, dtype=np.int64), "s_max": D.nnz, "nnz": D.nnz}
    per = D.per_node_counts()
    return {"per_node": per, "s_max": int(per.max()), "nnz": int(D.nnz)}
