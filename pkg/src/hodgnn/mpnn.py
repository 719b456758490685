"""Message-passing forward evaluation: GIN-sum and degree-mean layers,
per-node MLP updates, sum-pool readout, and the special initializations used
by the derivative pipeline.

All arithmetic goes through the tape primitives, so the same code runs eagerly
on arrays and recorded on a gradient tape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tape as tp
from .activations import ActivationKind
from .graphcore import Graph, IsolatedNodeError

__all__ = ["MlpSpec", "AggSpec", "MpnnLayer", "Readout", "MpnnModel",
           "ForwardRecord", "aggregate", "mlp_forward", "mpnn_forward",
           "residual_concat", "rwse_init", "build_mlp", "build_gin_model",
           "model_to_dict", "model_from_dict", "ModelSpecError"]


class ModelSpecError(ValueError):
    """Inconsistent widths or malformed model description."""


@dataclass
class MlpSpec:
    """Dense MLP: widths[0] -> ... -> widths[-1], activation after every layer
    except (optionally) the last."""

    widths: list
    weights: list
    biases: list
    activation: ActivationKind = ActivationKind.RELU
    final_activation: bool = False

    def validate(self):
        if len(self.widths) < 2:
            raise ModelSpecError("MLP needs at least one layer")
        if len(self.weights) != len(self.widths) - 1 or len(self.biases) != len(self.weights):
            raise ModelSpecError("weights/biases count must match widths chain")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            wv, bv = tp.value_of(w), tp.value_of(b)
            want = (self.widths[i + 1], self.widths[i])
            if wv.shape != want:
                raise ModelSpecError(f"layer {i} weight shape {wv.shape} != {want}")
            if bv.shape != (self.widths[i + 1],):
                raise ModelSpecError(f"layer {i} bias shape {bv.shape}")
            if not (np.all(np.isfinite(wv)) and np.all(np.isfinite(bv))):
                raise ModelSpecError(f"layer {i} has non-finite parameters")

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]


@dataclass
class AggSpec:
    """Neighborhood aggregation: 'gin' is (1 + eps) h_v + sum of neighbors,
    'mean' is the degree-normalized neighbor average (no self term)."""

    kind: str = "gin"
    eps: object = None  # 0-d float array for 'gin'

    def __post_init__(self):
        if self.kind not in ("gin", "mean"):
            raise ModelSpecError(f"unknown aggregation {self.kind!r}")
        if self.kind == "gin" and self.eps is None:
            self.eps = np.float64(0.0)

    def coefficients(self, g: Graph):
        """(c_self, per-target-row neighbor coefficient vector b)."""
        if self.kind == "gin":
            return tp.add(1.0, self.eps), np.ones(g.num_nodes)
        if np.any(g.degrees == 0):
            raise IsolatedNodeError("degree-mean aggregation hit a degree-0 node")
        return None, 1.0 / g.degrees


@dataclass
class MpnnLayer:
    agg: AggSpec
    mlp: MlpSpec
    concat: bool = False  # feed h_v (+) aggregate into the MLP instead of the fused sum

    @property
    def in_width(self) -> int:
        return self.mlp.in_width // 2 if self.concat else self.mlp.in_width


@dataclass
class Readout:
    mlp: MlpSpec  # applied to the sum-pooled final node features


@dataclass
class MpnnModel:
    layers: list
    readout: Readout | None = None

    def validate(self):
        if not self.layers:
            raise ModelSpecError("model needs at least one layer")
        w = self.layers[0].in_width
        for i, layer in enumerate(self.layers):
            layer.mlp.validate()
            expect = 2 * w if layer.concat else w
            if layer.mlp.in_width != expect:
                raise ModelSpecError(f"layer {i} expects input width {layer.mlp.in_width}, got {expect}")
            w = layer.mlp.out_width
        if self.readout is not None:
            self.readout.mlp.validate()
            if self.readout.mlp.in_width != w:
                raise ModelSpecError("readout width does not chain")

    @property
    def T(self) -> int:
        return len(self.layers)

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    @property
    def out_width(self) -> int:
        return self.layers[-1].mlp.out_width


@dataclass
class ForwardRecord:
    """Every intermediate the derivative engine and the tape need."""

    h: list = field(default_factory=list)          # h[0] = X, h[t] after layer t
    h_tilde: list = field(default_factory=list)    # post-aggregation pre-MLP input
    preacts: list = field(default_factory=list)    # per layer: list of pre-activation matrices
    pooled: object = None                          # sum over nodes of h[T]
    readout_preacts: list = field(default_factory=list)
    out: object = None                             # readout output, None without readout

    @property
    def final(self):
        return self.h[-1]


def aggregate(g: Graph, h, agg: AggSpec):
    """One aggregation step over the graph; rows of h are node features."""
    if tp.value_of(h).shape[0] != g.num_nodes:
        raise ModelSpecError("feature row count != num_nodes")
    c_self, b = agg.coefficients(g)
    neigh = tp.segment_sum(tp.gather_rows(h, g.indices), g.row_index, g.num_nodes)
    neigh = tp.mul(neigh, b[:, None]) if agg.kind == "mean" else neigh
    if c_self is None:
        return neigh
    return tp.add(tp.mul(c_self, h), neigh)


def mlp_forward(mlp: MlpSpec, x, preacts: list | None = None):
    """Apply the MLP; optionally collect pre-activation values per sublayer."""
    h = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        y = tp.add(tp.linear(h, w), b)
        if preacts is not None:
            preacts.append(y)
        if i < last or mlp.final_activation:
            h = tp.act(mlp.activation, 0, y)
        else:
            h = y
    return h


def mpnn_forward(model: MpnnModel, g: Graph, features=None) -> ForwardRecord:
    """Full forward pass, retaining all intermediates."""
    model.validate()
    x = g.node_features if features is None else features
    if tp.value_of(x).shape[1] != model.in_width:
        raise ModelSpecError(
            f"feature width {tp.value_of(x).shape[1]} != model input width {model.in_width}")
    rec = ForwardRecord(h=[x])
    h = x
    for layer in model.layers:
        agg = aggregate(g, h, layer.agg)
        h_tilde = tp.concat_cols([h, agg]) if layer.concat else agg
        rec.h_tilde.append(h_tilde)
        layer_preacts: list = []
        h = mlp_forward(layer.mlp, h_tilde, layer_preacts)
        rec.preacts.append(layer_preacts)
        rec.h.append(h)
    if model.readout is not None:
        rec.pooled = tp.sum_rows(h)
        rec.out = mlp_forward(model.readout.mlp, rec.pooled, rec.readout_preacts)
    return rec


def residual_concat(record: ForwardRecord):
    """Concatenate h^(t) over t = 1..T, block t scaled by 1/t!."""
    blocks = [tp.mul(record.h[t], 1.0 / math.factorial(t)) for t in range(1, len(record.h))]
    return blocks[0] if len(blocks) == 1 else tp.concat_cols(blocks)


# ---------------------------------------------------------------------------
# Builders and special initializations
# ---------------------------------------------------------------------------

def build_mlp(rng: np.random.Generator, widths, activation=ActivationKind.RELU,
              scale: float = 0.5, final_activation: bool = False) -> MlpSpec:
    weights = [scale * rng.standard_normal((widths[i + 1], widths[i])) / np.sqrt(widths[i])
               for i in range(len(widths) - 1)]
    biases = [scale * 0.1 * rng.standard_normal(widths[i + 1]) for i in range(len(widths) - 1)]
    return MlpSpec(list(widths), weights, biases, activation, final_activation)


def build_gin_model(rng: np.random.Generator, d_in: int, hidden: int, T: int,
                    activation=ActivationKind.SILU, scale: float = 0.5,
                    out_width: int | None = None, readout_widths=None,
                    eps: float = 0.0) -> MpnnModel:
    """Random small-weight GIN stack; the workhorse for oracles and tests."""
    layers = []
    w = d_in
    for t in range(T):
        w_out = hidden if (t < T - 1 or out_width is None) else out_width
        mlp = build_mlp(rng, [w, hidden, w_out], activation, scale, final_activation=True)
        layers.append(MpnnLayer(AggSpec("gin", np.float64(eps)), mlp))
        w = w_out
    readout = None
    if readout_widths is not None:
        readout = Readout(build_mlp(rng, [w] + list(readout_widths), activation, scale))
    model = MpnnModel(layers, readout)
    model.validate()
    return model


def identity_mlp(width: int, activation=ActivationKind.IDENTITY,
                 final_activation: bool = False) -> MlpSpec:
    return MlpSpec([width, width], [np.eye(width)], [np.zeros(width)],
                   activation, final_activation)


def neighbor_sum_model(d: int, T: int) -> MpnnModel:
    """T plain neighbor-sum layers (gin with eps = -1, identity MLP): h -> A^T X."""
    layers = [MpnnLayer(AggSpec("gin", np.float64(-1.0)), identity_mlp(d)) for _ in range(T)]
    return MpnnModel(layers)


def rwse_init(T: int, L: int, variant: str = "mean") -> MpnnModel:
    """Base model whose first-order diagonal derivatives are return-walk
    probabilities.

    Runs on an all-ones feature block of width L. Layer t keeps coordinates
    below t fixed (through the pass-through block) and degree-mean aggregates
    the rest, so coordinate l has been averaged l+1 times after the final
    layer and its diagonal derivative equals the (l+1)-step return
    probability. The relu never sees a kink: all forward values stay at 1.

    variant='gin' instead gives the neighbor-sum network with identity weights
    and eps = -1, whose diagonals are unnormalized walk counts.
    """
    if T != L:
        raise ModelSpecError("layer count must equal the number of walk steps")
    if variant == "gin":
        layers = [MpnnLayer(AggSpec("gin", np.float64(-1.0)),
                            identity_mlp(L, ActivationKind.RELU, final_activation=True))
                  for _ in range(T)]
        return MpnnModel(layers)
    if variant != "mean":
        raise ModelSpecError(f"unknown rwse_init variant {variant!r}")
    layers = []
    for t in range(T):
        w = np.zeros((L, 2 * L))
        for i in range(L):
            if i < t:
                w[i, i] = 1.0        # pass-through block
            else:
                w[i, L + i] = 1.0    # aggregated block
        mlp = MlpSpec([2 * L, L], [w], [np.zeros(L)],
                      ActivationKind.RELU, final_activation=True)
        layers.append(MpnnLayer(AggSpec("mean"), mlp, concat=True))
    model = MpnnModel(layers)
    model.validate()
    return model


# ---------------------------------------------------------------------------
# JSON serialization (weights row-major)
# ---------------------------------------------------------------------------

def _mlp_to_dict(mlp: MlpSpec) -> dict:
    return {
        "widths": [int(w) for w in mlp.widths],
        "activation": mlp.activation.value,
        "final_activation": bool(mlp.final_activation),
        "weights": [np.asarray(tp.value_of(w)).tolist() for w in mlp.weights],
        "biases": [np.asarray(tp.value_of(b)).tolist() for b in mlp.biases],
    }


def _mlp_from_dict(doc: dict) -> MlpSpec:
    try:
        mlp = MlpSpec(
            widths=[int(w) for w in doc["widths"]],
            weights=[np.asarray(w, dtype=np.float64) for w in doc["weights"]],
            biases=[np.asarray(b, dtype=np.float64) for b in doc["biases"]],
            activation=ActivationKind(doc.get("activation", "relu")),
            final_activation=bool(doc.get("final_activation", False)),
        )
    except (KeyError, TypeError) as exc:
        raise ModelSpecError(f"bad MLP spec: {exc}") from exc
    mlp.validate()
    return mlp


def model_to_dict(model: MpnnModel) -> dict:
    doc = {"layers": []}
    for layer in model.layers:
        agg = {"kind": layer.agg.kind}
        if layer.agg.kind == "gin":
            agg["eps"] = float(tp.value_of(layer.agg.eps))
        doc["layers"].append({"agg": agg, "concat": bool(layer.concat),
                              "mlp": _mlp_to_dict(layer.mlp)})
    if model.readout is not None:
        doc["readout"] = {"mlp": _mlp_to_dict(model.readout.mlp)}
    return doc


def model_from_dict(doc: dict) -> MpnnModel:
    try:
        layers = []
        for ldoc in doc["layers"]:
            agg_doc = ldoc["agg"]
            agg = AggSpec(agg_doc["kind"],
                          np.float64(agg_doc.get("eps", 0.0)) if agg_doc["kind"] == "gin" else None)
            layers.append(MpnnLayer(agg, _mlp_from_dict(ldoc["mlp"]),
                                    bool(ldoc.get("concat", False))))
        readout = None
        if doc.get("readout") is not None:
            readout = Readout(_mlp_from_dict(doc["readout"]["mlp"]))
    except (KeyError, TypeError) as exc:
        raise ModelSpecError(f"bad model spec: {exc}") from exc
    model = MpnnModel(layers, readout)
    model.validate()
    return model
