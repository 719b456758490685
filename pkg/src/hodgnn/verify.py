"""Independent numerical oracles and the check suites built on them.

Everything here deliberately avoids the propagation engine's code paths: the
finite-difference oracle re-evaluates the plain forward pass under input
perturbations, the walk oracle uses dense matrix powers, and the marking
oracle runs explicit marked forward passes. The CLI's verify command and the
acceptance tests both run these suites.
"""
from __future__ import annotations

import itertools
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .activations import ActivationKind
from .derivengine import SparseDerivTensor, canonical_key, compute_all, key_total
from .graphcore import Graph, gen_complete, gen_cycle, gen_erdos_renyi, rwse
from .mpnn import MpnnModel, build_gin_model, mpnn_forward, residual_concat, rwse_init

__all__ = ["worker_count", "fd_tensor_entry", "possible_keys", "check_tensor_fd",
           "fd_suite", "rwse_suite", "taylor_suite", "ABSENT_TOL", "FD_RTOL"]

# Central-difference stencils per derivative order and per-total-order steps.
# Steps balance truncation (h^2) against float64 cancellation (eps / h^q); at
# these values both sit well under the check tolerances below.
_STENCILS = {
    1: ((-1, 1), (-0.5, 0.5)),
    2: ((-1, 0, 1), (1.0, -2.0, 1.0)),
    3: ((-2, -1, 1, 2), (-0.5, 1.0, -1.0, 0.5)),
}
_STEPS = {1: 2e-6, 2: 2.5e-4, 3: 2e-3, 4: 5e-3}

# Entries compare at these relative tolerances (order 3 is noisier); values
# with both sides under ABSENT_TOL count as zero, matching the absent-key rule.
# The absolute floors are the measured cancellation noise of the stencils at
# the steps above; they keep the relative check from flagging oracle noise on
# entries barely above the zero threshold.
FD_RTOL = {1: 1e-4, 2: 1e-4, 3: 1e-3}
FD_NOISE_FLOOR = {1: 1e-9, 2: 5e-8, 3: 8e-7}
ABSENT_TOL = 1e-6


def worker_count() -> int:
    """Worker cap for parallel suites; HODGNN_THREADS overrides machine count."""
    env = os.environ.get("HODGNN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


class _ForwardCache:
    """Memoized forward evaluations under sparse input perturbations."""

    def __init__(self, model: MpnnModel, g: Graph, features=None, residual=False):
        self.model = model
        self.g = g
        self.x = g.node_features if features is None else np.asarray(features, dtype=np.float64)
        self.residual = residual
        self._cache: dict = {}

    def eval(self, deltas: tuple):
        """deltas: sorted tuple of ((u, j), offset) with float offsets."""
        hit = self._cache.get(deltas)
        if hit is not None:
            return hit
        x = self.x.copy()
        for (u, j), off in deltas:
            x[u, j] += off
        rec = mpnn_forward(self.model, self.g, features=x)
        node = residual_concat(rec) if self.residual else rec.h[-1]
        out = (node, rec.out)
        self._cache[deltas] = out
        return out


def fd_tensor_entry(cache: _ForwardCache, key, which: str = "node"):
    """Central finite-difference estimate of one derivative key, evaluated for
    every (node, feature) output at once. ``key`` is a canonical source key."""
    q = key_total(key)
    if q > 4:
        raise ValueError("finite differences supported up to total order 4")
    h = _STEPS[q]
    coords = [((u, j), a) for u, j, a in key]
    per_coord = [list(zip(*_STENCILS[a])) for _, a in coords]
    acc = None
    for combo in itertools.product(*per_coord):
        weight = 1.0
        deltas = []
        for ((coord, _a), (offset, c)) in zip(coords, combo):
            weight *= c
            if offset != 0:
                deltas.append((coord, offset * h))
        node, out = cache.eval(tuple(sorted(deltas)))
        term = (node if which == "node" else out) * weight
        acc = term if acc is None else acc + term
    return acc / h ** q


def possible_keys(nodes, d: int, k: int, m: int) -> list:
    """Every canonical key over the given source coordinates with at most k
    distinct sources and total order at most m."""
    coords = [(u, j) for u in nodes for j in range(d)]
    keys = set()
    for a in range(1, m + 1):
        for c in coords:
            keys.add(canonical_key([c], [a]))
    if k >= 2:
        for c1, c2 in itertools.combinations(coords, 2):
            for a1 in range(1, m):
                for a2 in range(1, m + 1 - a1):
                    keys.add(canonical_key([c1, c2], [a1, a2]))
    return sorted(keys)


def _entry_matches(engine_val: float, fd_val: float, rtol: float, floor: float) -> bool:
    if abs(engine_val) < ABSENT_TOL and abs(fd_val) < ABSENT_TOL:
        return True
    return abs(engine_val - fd_val) <= rtol * max(abs(engine_val), abs(fd_val)) + floor


def check_tensor_fd(model: MpnnModel, g: Graph, k: int, m: int,
                    features=None) -> dict:
    """Compare every stored and every absent derivative entry against finite
    differences of the forward pass.

    Returns counts plus the worst mismatch; ``ok`` is True when all stored
    entries match at the per-order tolerance and all absent entries have
    finite-difference magnitude below ABSENT_TOL.
    """
    res = compute_all(model, g, k=k, m=m, features=features)
    cache = _ForwardCache(model, g, features=features)
    x = g.node_features if features is None else np.asarray(features)
    report = {"checked": 0, "absent_checked": 0, "mismatches": 0,
              "absent_violations": 0, "max_rel_err": 0.0, "max_absent_mag": 0.0,
              "ok": True}

    def run(tensor: SparseDerivTensor, which: str):
        index = tensor._build_index()
        for key in possible_keys(range(g.num_nodes), x.shape[1], k, m):
            fd = fd_tensor_entry(cache, key, which)
            q = min(key_total(key), 3)
            rtol, floor = FD_RTOL[q], FD_NOISE_FLOOR[q]
            if which == "node":
                rows = range(g.num_nodes)
            else:
                rows = [None]
            for v in rows:
                slot = key if v is None else (v, key)
                fd_vec = fd[v] if v is not None else fd
                row = index.get(slot)
                if row is not None:
                    engine_vec = tensor.values_array()[row]
                    report["checked"] += len(engine_vec)
                    for e, f in zip(engine_vec, fd_vec):
                        if not _entry_matches(e, f, rtol, floor):
                            report["mismatches"] += 1
                            report["ok"] = False
                        if max(abs(e), abs(f)) >= ABSENT_TOL:
                            rel = abs(e - f) / max(abs(e), abs(f))
                            report["max_rel_err"] = max(report["max_rel_err"], rel)
                else:
                    report["absent_checked"] += len(fd_vec)
                    mag = float(np.max(np.abs(fd_vec)))
                    report["max_absent_mag"] = max(report["max_absent_mag"], mag)
                    if mag >= ABSENT_TOL:
                        report["absent_violations"] += 1
                        report["ok"] = False

    run(res.D_T, "node")
    if res.D_out is not None:
        run(res.D_out, "out")
    return report


# ---------------------------------------------------------------------------
# Check suites (shared by the CLI and the acceptance tests)
# ---------------------------------------------------------------------------

def _random_sparse_graph(rng: np.random.Generator, n_max: int = 10,
                         max_degree: int = 4) -> Graph:
    """Connected-ish random graph with bounded degree for oracle runs."""
    n = int(rng.integers(4, n_max + 1))
    for attempt in range(200):
        g = gen_erdos_renyi(n, min(1.0, 2.5 / n), int(rng.integers(1 << 30)))
        if g.degrees.min() >= 1 and g.degrees.max() <= max_degree:
            return g
    raise RuntimeError("could not sample a bounded-degree graph")


_ANALYTIC = [ActivationKind.EXP, ActivationKind.SIN, ActivationKind.TANH,
             ActivationKind.SILU]


def sample_tiny_model(rng: np.random.Generator, g: Graph, d_in: int,
                      activation: ActivationKind, T: int, hidden: int,
                      readout_widths=None, scale: float = 0.5) -> MpnnModel:
    """Random small-weight model, resampled until its forward values stay
    bounded on g (exp stacks can blow up and would poison the difference
    stencils)."""
    for _ in range(100):
        model = build_gin_model(rng, d_in=d_in, hidden=hidden, T=T,
                                activation=activation, scale=scale,
                                readout_widths=readout_widths)
        with np.errstate(over="ignore", invalid="ignore"):
            rec = mpnn_forward(model, g, features=np.ones((g.num_nodes, d_in)))
            peak = max(float(np.max(np.abs(h))) for h in rec.h)
            if rec.out is not None:
                peak = max(peak, float(np.max(np.abs(rec.out))))
        if np.isfinite(peak) and peak < 5.0:
            return model
        scale *= 0.8
    raise RuntimeError("could not sample a bounded model")


def fd_suite(seed: int = 0, trials: int = 25, max_order: int = 3,
             ks=(1, 2), time_budget: float | None = None) -> list:
    """Random (graph, model) pairs checked entry-by-entry against finite
    differences, alternating over derivative arities."""
    rng = np.random.default_rng(seed)
    checks = []
    start = time.perf_counter()
    for trial in range(trials):
        k = ks[trial % len(ks)]
        m = int(rng.integers(1, max_order + 1))
        g = _random_sparse_graph(rng)
        act = _ANALYTIC[int(rng.integers(len(_ANALYTIC)))]
        hidden = int(rng.integers(2, 4))
        T = int(rng.integers(1, 4))
        model = sample_tiny_model(rng, g, 1, act, T, hidden,
                                  readout_widths=[hidden, 2])
        report = check_tensor_fd(model, g, k=k, m=m)
        checks.append({
            "check": f"fd trial {trial} (n={g.num_nodes}, k={k}, m={m}, act={act.value}, T={T})",
            "ok": report["ok"],
            "entries": report["checked"],
            "absent": report["absent_checked"],
            "max_rel_err": report["max_rel_err"],
            "max_absent_mag": report["max_absent_mag"],
        })
        if time_budget is not None and time.perf_counter() - start > time_budget:
            break
    return checks


def rwse_suite(g: Graph, steps: int) -> list:
    """Engine-derived walk encodings against the dense matrix-power oracle."""
    model = rwse_init(steps, steps)
    res = compute_all(model, g, k=1, m=1, features=np.ones((g.num_nodes, steps)))
    oracle = rwse(g, steps)
    dev = 0.0
    for v in range(g.num_nodes):
        for l in range(steps):
            got = res.D_T.lookup(v, [(v, l)], [1])[l]
            dev = max(dev, abs(got - oracle[v, l]))
    return [{"check": f"rwse reconstruction (n={g.num_nodes}, steps={steps})",
             "ok": dev < 1e-10, "max_abs_dev": dev}]


def taylor_suite(seed: int = 0, trials: int = 20, epsilon: float = 0.5,
                 order: int = 4) -> list:
    """Derivative-based Taylor reconstruction versus explicit node marking.

    At zero marking one derivative tensor serves every marked node, so each
    trial computes the tensors once and reconstructs all n marked outputs from
    them; the marking oracle runs n explicit forward passes for comparison.
    """
    import math as _math
    from .hodmodel import _marked_features, ds_gnn_oracle

    def one_trial(trial: int):
        trial_rng = np.random.default_rng(seed * 100003 + trial)
        g = _random_sparse_graph(trial_rng, n_max=8)
        act = _ANALYTIC[int(trial_rng.integers(len(_ANALYTIC)))]
        base = sample_tiny_model(trial_rng, g, g.feature_dim + 1, act,
                                 T=int(trial_rng.integers(1, 3)), hidden=2,
                                 readout_widths=[2])
        x0 = _marked_features(g, 0, 0.0)
        res = compute_all(base, g, k=1, m=order, features=x0)
        mark_j = g.feature_dim
        out0 = np.asarray(res.record.out)

        def taylor(v, upto):
            total = out0.copy()
            for i in range(1, upto + 1):
                total += res.D_out.lookup(None, [(v, mark_j)], [i]) \
                    * (epsilon ** i / _math.factorial(i))
            return total

        err_low, err_high = 0.0, 0.0
        for v in range(g.num_nodes):
            exact = ds_gnn_oracle(base, g, v, epsilon)
            err_low = max(err_low, float(np.max(np.abs(taylor(v, 1) - exact))))
            err_high = max(err_high, float(np.max(np.abs(taylor(v, order) - exact))))
        return {"check": f"taylor trial {trial} (n={g.num_nodes}, act={act.value})",
                "ok": err_high < err_low and err_high < 1e-3,
                "err_m1": err_low, f"err_m{order}": err_high}

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        checks = list(pool.map(one_trial, range(trials)))
    return checks


def _random_pipeline(trial_rng: np.random.Generator, g: Graph):
    """Small random full pipeline (< 500 parameters, m <= 2, analytic),
    resampled until the end-to-end prediction is finite and moderate."""
    from .hodmodel import hod_forward

    for attempt in range(50):
        scale = 0.5 * 0.8 ** attempt
        model = _build_random_pipeline(trial_rng, g, scale)
        with np.errstate(over="ignore", invalid="ignore"):
            pred = np.asarray(hod_forward(model, g).prediction)
        if np.all(np.isfinite(pred)) and np.max(np.abs(pred)) < 20.0:
            return model
    raise RuntimeError("could not sample a bounded pipeline")


def _build_random_pipeline(trial_rng: np.random.Generator, g: Graph, scale: float):
    from .encoders import build_deepsets_encoder, build_diag_encoder
    from .hodmodel import HodConfig, HodModel

    act = _ANALYTIC[int(trial_rng.integers(len(_ANALYTIC)))]
    m = int(trial_rng.integers(1, 3))
    hidden = int(trial_rng.integers(2, 5))
    T = int(trial_rng.integers(1, 4))
    use_out = bool(trial_rng.integers(2))
    deepsets = bool(trial_rng.integers(2))
    base = sample_tiny_model(trial_rng, g, 1, act, T, hidden,
                             readout_widths=[2] if use_out else None,
                             scale=scale)
    enc_out_width = 2
    if deepsets:
        node_enc = build_deepsets_encoder(trial_rng, 1, m, 1, base.out_width,
                                          embed_dim=2, hidden=3,
                                          out_width=enc_out_width, activation=act)
    else:
        node_enc = build_diag_encoder(trial_rng, 1, m, base.out_width, hidden=3,
                                      out_width=enc_out_width, activation=act)
    out_enc = None
    if use_out:
        out_enc = build_diag_encoder(trial_rng, 1, m, 2, hidden=3,
                                     out_width=2, activation=act, kind="out")
    in_down = base.out_width + enc_out_width + (2 if use_out else 0)
    down = build_gin_model(trial_rng, in_down, 3, 2, activation=act, scale=scale,
                           readout_widths=[1])
    cfg = HodConfig(k=1, m=m, use_out_derivs=use_out)
    return HodModel(downstream=down, base=base, node_encoder=node_enc,
                    out_encoder=out_enc, config=cfg)


def grad_suite(seed: int = 0, trials: int = 10, rtol: float = 1e-4,
               atol: float = 1e-8) -> list:
    """Every parameter gradient of a graph-level squared-error loss checked
    against central finite differences, over random full pipelines."""
    from .hodmodel import hod_forward
    from .tape import GradTape, value_of
    from .traincore import ParamStore, loss_value

    checks = []
    for trial in range(trials):
        trial_rng = np.random.default_rng(seed * 7919 + trial)
        g = _random_sparse_graph(trial_rng, n_max=7)
        g = g.with_labels(graph_label=[float(trial_rng.normal())])
        model = _random_pipeline(trial_rng, g)
        store = ParamStore.from_model(model)
        n_params = sum(int(v.size) for v in store.params.values())

        def loss_at():
            pred = hod_forward(store.bind(model, None), g).prediction
            return float(value_of(loss_value(pred, g.graph_label, "mse")))

        tape = GradTape()
        pred = hod_forward(store.bind(model, tape), g).prediction
        grads = tape.backward(loss_value(pred, g.graph_label, "mse"), np.asarray(1.0))

        h = 1e-6
        bad = 0
        worst = 0.0
        for name, p in store.params.items():
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                keep = p[idx]
                p[idx] = keep + h
                lp = loss_at()
                p[idx] = keep - h
                lm = loss_at()
                p[idx] = keep
                fd = (lp - lm) / (2 * h)
                an = float(grads[name][idx])
                err = abs(fd - an)
                rel = err / max(abs(fd), abs(an), atol / rtol)
                worst = max(worst, rel)
                if not np.isfinite(err) or err > rtol * max(abs(fd), abs(an)) + atol:
                    bad += 1
        checks.append({"check": f"grad trial {trial} (params={n_params}, m={model.config.m})",
                       "ok": bad == 0 and np.isfinite(worst), "params": n_params,
                       "bad": bad, "max_rel_err": worst})
    return checks
