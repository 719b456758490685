"""Encoders turning sparse derivative tensors into dense node features.

Three kinds: a pointwise MLP over the diagonal entries, a permutation-
invariant sum-pool encoder keyed by each entry's relabeling orbit, and the
per-node gather of pooled-output derivatives. Dense gathers use one fixed
canonical slot order (source dim major, order middle, output dim minor) so
absent entries read as zeros and round-trips are exact.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import tape as tp
from .derivengine import SparseDerivTensor, canonical_key
from .mpnn import MlpSpec, ModelSpecError, build_mlp, mlp_forward

__all__ = ["EncoderSpec", "pattern_id", "PatternCodebook", "enumerate_orbits",
           "encode_node_diag", "encode_node_deepsets", "encode_out",
           "diag_slot", "build_diag_encoder", "build_deepsets_encoder",
           "selection_diag_encoder"]


# ---------------------------------------------------------------------------
# Relabeling orbits of derivative index tuples
# ---------------------------------------------------------------------------

def _orbit(v, key) -> tuple:
    """Canonical invariant of (v, key) under simultaneous node relabeling.

    Sources at the anchor node keep a 'self' tag; remaining sources group by
    node, and groups are ordered by their (dim, order) content, which is the
    only permutation-invariant information they carry.
    """
    self_part = []
    others: dict = {}
    for u, j, a in key:
        if v is not None and u == v:
            self_part.append((j, a))
        else:
            others.setdefault(u, []).append((j, a))
    groups = tuple(sorted(tuple(sorted(g)) for g in others.values()))
    return (tuple(sorted(self_part)), groups)


def pattern_id(v, sources, alpha) -> int:
    """Opaque integer identifying the orbit of the derivative index tuple.

    Equal exactly when the order multi-indices agree and some node relabeling
    maps one (v, sources) onto the other. Stable across runs: the orbit is
    packed digit-by-digit, with no process state involved.
    """
    key = canonical_key(sources, alpha)
    self_part, groups = _orbit(v, key)
    digits = [len(self_part)]
    for j, a in self_part:
        digits += [j, a]
    digits.append(len(groups))
    for grp in groups:
        digits.append(len(grp))
        for j, a in grp:
            digits += [j, a]
    packed = 0
    for d in digits:
        if d >= 64:
            raise ValueError("pattern field exceeds packing radix")
        packed = packed * 64 + d + 1
    return packed


def enumerate_orbits(k: int, m: int, d_in: int, node_indexed: bool = True) -> list:
    """All orbit ids realizable with the given arity, order cap, and input
    width, in sorted order. For k <= 2 three abstract nodes cover every
    equality pattern among the anchor and the sources."""
    if k > 2:
        raise ValueError("orbit enumeration implemented for k <= 2")
    anchor = 0 if node_indexed else None
    nodes = (0, 1, 2) if node_indexed else (1, 2)
    coords = [(u, j) for u in nodes for j in range(d_in)]
    ids = set()
    for r in (1, 2):
        if r > k:
            break
        for combo in itertools.combinations(coords, r):
            for alpha in itertools.product(range(1, m + 1), repeat=r):
                if sum(alpha) > m:
                    continue
                ids.add(pattern_id(anchor, list(combo), list(alpha)))
    return sorted(ids)


class PatternCodebook:
    """Dense row index per orbit id, enumerated up front for embedding tables."""

    def __init__(self, k: int, m: int, d_in: int, node_indexed: bool = True):
        self.ids = enumerate_orbits(k, m, d_in, node_indexed)
        self._row = {pid: i for i, pid in enumerate(self.ids)}

    @property
    def size(self) -> int:
        return len(self.ids)

    def row(self, v, key) -> int:
        pid = pattern_id(v, [(u, j) for u, j, _ in key], [a for _, _, a in key])
        idx = self._row.get(pid)
        if idx is None:
            raise KeyError(f"orbit {pid} outside codebook")
        return idx


# ---------------------------------------------------------------------------
# Encoder specs
# ---------------------------------------------------------------------------

@dataclass
class EncoderSpec:
    """kind 'diag' and 'out' run one MLP over a fixed-order dense gather;
    'deepsets' runs phi per entry (value (+) orbit embedding), sum-pools per
    node, then rho."""

    kind: str
    mlp: MlpSpec | None = None
    phi: MlpSpec | None = None
    rho: MlpSpec | None = None
    embed: object = None  # (num orbits, embed dim) table, learned

    def __post_init__(self):
        if self.kind not in ("diag", "deepsets", "out"):
            raise ModelSpecError(f"unknown encoder kind {self.kind!r}")
        if self.kind in ("diag", "out") and self.mlp is None:
            raise ModelSpecError(f"{self.kind} encoder needs an MLP")
        if self.kind == "deepsets" and (self.phi is None or self.rho is None
                                        or self.embed is None):
            raise ModelSpecError("deepsets encoder needs phi, rho, and an embedding table")

    @property
    def out_width(self) -> int:
        return (self.rho if self.kind == "deepsets" else self.mlp).out_width


def diag_slot(j: int, alpha: int, i: int, m: int, width: int) -> int:
    """Canonical dense gather position: source dim major, order middle,
    output dim minor."""
    return (j * m + (alpha - 1)) * width + i


def _gather_dense(D: SparseDerivTensor, anchor_of_row) -> object:
    """Stack self-sourced first-order-key entries into the canonical dense
    layout, one (d_in * m * width)-vector per node; absent slots are zero."""
    slots, rows = [], []
    for i, key in enumerate(D.keys):
        if len(key) != 1:
            continue
        u, j, a = key[0]
        v = anchor_of_row(i)
        if u != v:
            continue
        slots.append(v * D.d_in * D.m + j * D.m + (a - 1))
        rows.append(i)
    block = tp.gather_rows(D.values, np.asarray(rows, dtype=np.int64)) if rows \
        else np.zeros((0, D.width))
    padded = tp.scatter_rows(block, np.asarray(slots, dtype=np.int64),
                             D.n * D.d_in * D.m)
    return tp.reshape(padded, (D.n, D.d_in * D.m * D.width))


def encode_node_diag(D_T: SparseDerivTensor, spec: EncoderSpec):
    """MLP over each node's own-source derivative block (k = 1 diagonals)."""
    if spec.kind != "diag":
        raise ModelSpecError("spec is not a diagonal encoder")
    if not D_T.node_indexed:
        raise ModelSpecError("diagonal encoder needs a node-indexed tensor")
    gathered = _gather_dense(D_T, lambda i: int(D_T.vs[i]))
    if spec.mlp.in_width != D_T.d_in * D_T.m * D_T.width:
        raise ModelSpecError(
            f"diag encoder expects input width {spec.mlp.in_width}, "
            f"gather produces {D_T.d_in * D_T.m * D_T.width}")
    return mlp_forward(spec.mlp, gathered)


def encode_out(D_out: SparseDerivTensor, spec: EncoderSpec):
    """Per-node gather of the pooled-output derivatives sourced at that node."""
    if spec.kind != "out":
        raise ModelSpecError("spec is not an output-derivative encoder")
    if D_out is None:
        raise ModelSpecError("model has no pooled output tensor")
    if D_out.node_indexed:
        raise ModelSpecError("expected an output tensor (no node index)")
    gathered = _gather_dense(D_out, lambda i: D_out.keys[i][0][0])
    if spec.mlp.in_width != D_out.d_in * D_out.m * D_out.width:
        raise ModelSpecError("out encoder width mismatch")
    return mlp_forward(spec.mlp, gathered)


def encode_node_deepsets(D_T: SparseDerivTensor, spec: EncoderSpec,
                         codebook: PatternCodebook | None = None):
    """Sum-pooled per-entry encoder: rho( sum_v phi(value (+) orbit embed) ).

    Work is one phi pass over the stored entries plus a segment sum, so cost
    is linear in the number of nonzeros. Entries are consumed in canonical
    order with a plain additive merge, making the pooling iteration-order
    independent.
    """
    if spec.kind != "deepsets":
        raise ModelSpecError("spec is not a deepsets encoder")
    if codebook is None:
        codebook = PatternCodebook(D_T.k, D_T.m, D_T.d_in)
    embed_w = tp.value_of(spec.embed).shape[1]
    if spec.phi.in_width != D_T.width + embed_w:
        raise ModelSpecError(
            f"phi expects width {spec.phi.in_width}, entries give {D_T.width + embed_w}")
    if D_T.nnz == 0:
        pooled = np.zeros((D_T.n, spec.phi.out_width))
    else:
        codes = np.asarray([codebook.row(int(v), key)
                            for v, key in zip(D_T.vs, D_T.keys)], dtype=np.int64)
        per_entry = tp.concat_cols([D_T.values, tp.gather_rows(spec.embed, codes)])
        feats = mlp_forward(spec.phi, per_entry)
        pooled = tp.segment_sum(feats, D_T.vs, D_T.n)
    return mlp_forward(spec.rho, pooled)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_diag_encoder(rng: np.random.Generator, d_in: int, m: int, width: int,
                       hidden: int, out_width: int, activation=None,
                       kind: str = "diag") -> EncoderSpec:
    from .activations import ActivationKind
    act = activation or ActivationKind.RELU
    mlp = build_mlp(rng, [d_in * m * width, hidden, out_width], act, scale=0.5)
    return EncoderSpec(kind=kind, mlp=mlp)


def selection_diag_encoder(d_in: int, m: int, width: int, picks,
                           kind: str = "diag") -> EncoderSpec:
    """Linear encoder whose rows select single gather slots (j, alpha, i)."""
    w = np.zeros((len(picks), d_in * m * width))
    for row, (j, a, i) in enumerate(picks):
        w[row, diag_slot(j, a, i, m, width)] = 1.0
    mlp = MlpSpec([d_in * m * width, len(picks)], [w], [np.zeros(len(picks))])
    return EncoderSpec(kind=kind, mlp=mlp)


def build_deepsets_encoder(rng: np.random.Generator, k: int, m: int, d_in: int,
                           width: int, embed_dim: int, hidden: int,
                           out_width: int, activation=None) -> EncoderSpec:
    from .activations import ActivationKind
    act = activation or ActivationKind.RELU
    codebook = PatternCodebook(k, m, d_in)
    embed = 0.5 * rng.standard_normal((codebook.size, embed_dim))
    phi = build_mlp(rng, [width + embed_dim, hidden, hidden], act, scale=0.5)
    rho = build_mlp(rng, [hidden, hidden, out_width], act, scale=0.5)
    return EncoderSpec(kind="deepsets", phi=phi, rho=rho, embed=embed)


def encoder_to_dict(spec: EncoderSpec) -> dict:
    from .mpnn import _mlp_to_dict
    doc = {"kind": spec.kind}
    for name in ("mlp", "phi", "rho"):
        sub = getattr(spec, name)
        if sub is not None:
            doc[name] = _mlp_to_dict(sub)
    if spec.embed is not None:
        doc["embed"] = np.asarray(tp.value_of(spec.embed)).tolist()
    return doc


def encoder_from_dict(doc: dict) -> EncoderSpec:
    from .mpnn import _mlp_from_dict
    return EncoderSpec(
        kind=doc["kind"],
        mlp=_mlp_from_dict(doc["mlp"]) if "mlp" in doc else None,
        phi=_mlp_from_dict(doc["phi"]) if "phi" in doc else None,
        rho=_mlp_from_dict(doc["rho"]) if "rho" in doc else None,
        embed=np.asarray(doc["embed"], dtype=np.float64) if "embed" in doc else None,
    )
