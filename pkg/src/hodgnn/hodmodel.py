"""The four-stage derivative-informed pipeline, plus the expressivity
oracles it is checked against: explicit node marking and its Taylor
reconstruction from pooled-output derivatives.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tape as tp
from .derivengine import DEFAULT_MAX_ORDER, ComputeResult, compute_all
from .encoders import EncoderSpec, PatternCodebook, encode_node_deepsets, \
    encode_node_diag, encode_out
from .graphcore import Graph
from .mpnn import ModelSpecError, MpnnModel, mpnn_forward, residual_concat

__all__ = ["HodConfig", "HodModel", "HodOutput", "hod_forward",
           "ds_gnn_oracle", "taylor_subgraph_approx", "distinguish",
           "hod_to_dict", "hod_from_dict"]


@dataclass
class HodConfig:
    """Pipeline switches: derivative arity and order, which derivative
    streams feed the downstream network, and the residual combination."""

    k: int = 1
    m: int = 1
    use_node_derivs: bool = True
    use_out_derivs: bool = False  # the trained pipelines leave this off
    use_residual: bool = False

    def __post_init__(self):
        if self.k not in (1, 2):
            raise ModelSpecError("derivative arity k must be 1 or 2")
        if not 0 <= self.m <= DEFAULT_MAX_ORDER:
            raise ModelSpecError(f"max order m must be in [0, {DEFAULT_MAX_ORDER}]")


@dataclass
class HodModel:
    """base MPNN -> derivative tensors -> encoders -> downstream MPNN.

    ``base=None`` degenerates to the downstream network on raw features (the
    plain-MPNN baseline); ``m=0`` keeps the base but drops all derivative
    streams.
    """

    downstream: MpnnModel
    base: MpnnModel | None = None
    node_encoder: EncoderSpec | None = None
    out_encoder: EncoderSpec | None = None
    config: HodConfig = field(default_factory=HodConfig)


@dataclass
class HodOutput:
    h_der: object
    prediction: object
    record: object            # base ForwardRecord (None without a base)
    downstream_record: object
    D_T: object = None
    D_out: object = None
    diagnostics: dict = field(default_factory=dict)


def _encode_node_stream(model: HodModel, D_T):
    spec = model.node_encoder
    if spec.kind == "diag":
        return encode_node_diag(D_T, spec)
    if spec.kind == "deepsets":
        return encode_node_deepsets(D_T, spec)
    raise ModelSpecError(f"node stream cannot use encoder kind {spec.kind!r}")


def hod_forward(model: HodModel, g: Graph, features=None) -> HodOutput:
    """Run the pipeline: derivative-informed features are the base outputs
    concatenated with the encoded output-derivative and node-derivative
    streams, and the downstream network predicts from them."""
    cfg = model.config
    t0 = time.perf_counter()
    x = g.node_features if features is None else features
    diagnostics: dict = {}
    if model.base is None:
        h_der = x
        rec = None
        res = None
    else:
        want_derivs = cfg.m >= 1 and (cfg.use_node_derivs or cfg.use_out_derivs)
        res = compute_all(model.base, g, k=cfg.k, m=cfg.m if want_derivs else 0,
                          features=x, residual=cfg.use_residual)
        rec = res.record
        h_base = residual_concat(rec) if cfg.use_residual else rec.h[-1]
        blocks = [h_base]
        if cfg.use_out_derivs and cfg.m >= 1:
            if model.out_encoder is None or res.D_out is None:
                raise ModelSpecError("output-derivative stream needs a readout and an encoder")
            blocks.append(encode_out(res.D_out, model.out_encoder))
        if cfg.use_node_derivs and cfg.m >= 1:
            if model.node_encoder is None:
                raise ModelSpecError("node-derivative stream enabled without an encoder")
            blocks.append(_encode_node_stream(model, res.D_T))
        h_der = tp.concat_cols(blocks) if len(blocks) > 1 else blocks[0]
        diagnostics["nnz_per_layer"] = [D.nnz for D in res.per_layer]
    down_rec = mpnn_forward(model.downstream, g, features=h_der)
    if model.downstream.readout is not None:
        prediction = down_rec.out
    else:
        pred = down_rec.h[-1]
        prediction = tp.reshape(pred, (g.num_nodes,)) \
            if tp.value_of(pred).shape[1] == 1 else pred
    diagnostics["feature_width"] = int(tp.value_of(h_der).shape[1])
    diagnostics["seconds"] = time.perf_counter() - t0
    return HodOutput(h_der=h_der, prediction=prediction, record=rec,
                     downstream_record=down_rec,
                     D_T=None if res is None else res.D_T,
                     D_out=None if res is None else res.D_out,
                     diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# Node-marking oracles
# ---------------------------------------------------------------------------

def _marked_features(g: Graph, v: int, epsilon: float) -> np.ndarray:
    mark = np.zeros((g.num_nodes, 1))
    mark[v, 0] = epsilon
    return np.concatenate([g.node_features, mark], axis=1)


def ds_gnn_oracle(base: MpnnModel, g: Graph, v: int, epsilon: float) -> np.ndarray:
    """Pooled output of the base network with an explicit marking channel:
    epsilon at node v, zero elsewhere. Running over all v gives the
    subgraph-bag reference the derivative pipeline is compared against."""
    if base.in_width != g.feature_dim + 1:
        raise ModelSpecError("marking oracle needs base input width = features + 1")
    if base.readout is None:
        raise ModelSpecError("marking oracle needs a readout")
    rec = mpnn_forward(base, g, features=_marked_features(g, v, epsilon))
    return np.asarray(tp.value_of(rec.out))


def taylor_subgraph_approx(base: MpnnModel, g: Graph, v: int, epsilon: float,
                           m: int) -> np.ndarray:
    """Reconstruct the marked output from derivatives at zero marking:
    sum over orders i <= m of (1/i!) d^i(out)/d(mark at v)^i * epsilon^i,
    the order-0 term being the unmarked output."""
    if not base.layers[0].mlp.activation.analytic:
        warnings.warn("Taylor reconstruction with a non-analytic activation; "
                      "the remainder bound does not apply", stacklevel=2)
    res = compute_all(base, g, k=1, m=m, features=_marked_features(g, v, 0.0))
    if res.D_out is None:
        raise ModelSpecError("Taylor reconstruction needs a readout")
    mark_j = g.feature_dim
    out = np.asarray(tp.value_of(res.record.out)).copy()
    for i in range(1, m + 1):
        term = res.D_out.lookup(None, [(v, mark_j)], [i])
        out += term * (epsilon ** i / math.factorial(i))
    return out


def distinguish(out_a, out_b, tol: float) -> bool:
    """True when two output vectors differ beyond the tolerance."""
    a, b = np.asarray(out_a), np.asarray(out_b)
    if a.shape != b.shape:
        raise ModelSpecError("outputs have different widths")
    return bool(np.max(np.abs(a - b)) > tol)


# ---------------------------------------------------------------------------
# Serialization (checkpoints inline the full pipeline)
# ---------------------------------------------------------------------------

def hod_to_dict(model: HodModel) -> dict:
    from .encoders import encoder_to_dict
    from .mpnn import model_to_dict
    cfg = model.config
    doc = {
        "downstream": model_to_dict(model.downstream),
        "config": {"k": cfg.k, "m": cfg.m, "use_node_derivs": cfg.use_node_derivs,
                   "use_out_derivs": cfg.use_out_derivs,
                   "use_residual": cfg.use_residual},
        "encoders": {},
    }
    if model.base is not None:
        doc["base"] = model_to_dict(model.base)
    if model.node_encoder is not None:
        doc["encoders"]["node"] = encoder_to_dict(model.node_encoder)
    if model.out_encoder is not None:
        doc["encoders"]["out"] = encoder_to_dict(model.out_encoder)
    return doc


def hod_from_dict(doc: dict) -> HodModel:
    from .encoders import encoder_from_dict
    from .mpnn import model_from_dict
    cfg = HodConfig(**doc.get("config", {}))
    encs = doc.get("encoders", {})
    return HodModel(
        downstream=model_from_dict(doc["downstream"]),
        base=model_from_dict(doc["base"]) if "base" in doc else None,
        node_encoder=encoder_from_dict(encs["node"]) if "node" in encs else None,
        out_encoder=encoder_from_dict(encs["out"]) if "out" in encs else None,
        config=cfg,
    )
