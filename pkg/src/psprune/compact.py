"""Fold structure parameters into weights and physically remove pruned structures.

Compaction runs in four passes over the layer graph:

1. fold ``nu`` into each PSP conv weight and record which structures survive;
2. replace fully pruned convs by zero constants and fold constants through
   per-channel layers (batchnorm in eval mode, relu, pooling, adds);
3. propagate channel liveness backwards from the output, so producers drop
   output filters nobody reads;
4. rebuild the graph with shrunk tensors, inserting ``select`` gathers where
   a consumer reads a subset of what its producer emits.

Column- and shape-pruned convs keep a dense K x C x R x S tensor only when
every lowered row survives; otherwise they store the lowered K x n_kept
matrix plus the list of im2col rows to gather.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .layers import BN_EPS, LayerSpec, Model, infer_shapes
from .psp import StructureSet, lowered_rows, psp_forward

HIST_BINS = 101


class CompactionError(ValueError):
    pass


@dataclass
class CompactionPlan:
    kept: dict = field(default_factory=dict)            # PSP layer -> flat alpha indices kept
    folded: dict = field(default_factory=dict)          # PSP layer -> folded K x C x R x S weight
    removed_layers: list = field(default_factory=list)  # weighted layers gone from the compact graph
    out_channels: dict = field(default_factory=dict)    # layer -> kept output channels (original ids)
    in_channels: dict = field(default_factory=dict)     # conv -> kept input channels (original ids)
    columns: dict = field(default_factory=dict)         # gathered conv -> kept lowered rows (original ids)
    removed_params: int = 0
    added_params: int = 0

    def to_dict(self) -> dict:
        return {
            "kept": {k: [int(i) for i in v] for k, v in self.kept.items()},
            "removed_layers": list(self.removed_layers),
            "out_channels": {k: [int(i) for i in v] for k, v in self.out_channels.items()},
            "in_channels": {k: [int(i) for i in v] for k, v in self.in_channels.items()},
            "columns": {k: [int(i) for i in v] for k, v in self.columns.items()},
            "removed_params": int(self.removed_params),
            "added_params": int(self.added_params),
        }


# ------------------------------------------------------------ accounting

def weighted_layer_count(model: Model) -> int:
    """Conv and linear layers, not counting projection shortcuts."""
    return sum(1 for l in model.layers
               if l.kind in ("conv", "linear") and l.psp_exempt_reason != "shortcut")


def count_params(model: Model) -> int:
    """Stored parameters (weights, biases, batchnorm affine, constants); alpha excluded."""
    return int(sum(v.size for v in model.params.values()))


def layer_macs(layer: LayerSpec, in_shape, out_shape) -> int:
    a = layer.attrs
    if layer.kind == "conv":
        _, Ho, Wo = out_shape
        n_rows = len(a["columns"]) if "columns" in a else a["C"] * a["R"] * a["S"]
        return int(a["K"]) * n_rows * Ho * Wo
    if layer.kind == "linear":
        return int(a["in"]) * int(a["out"])
    return 0


def count_macs(model: Model, input_shape=None) -> int:
    """Multiply-accumulates of conv (K*C*R*S*H_out*W_out) and linear (in*out) layers."""
    shape = input_shape if input_shape is not None else model.input_shape
    if shape is None or len(tuple(shape)) != 3 or any(d is None for d in shape):
        raise ValueError(f"cannot count MACs: unresolved input shape {shape!r}")
    probe = Model(model.layers, model.params, model.buffers, tuple(shape), model.num_classes)
    shapes = infer_shapes(probe)
    return int(sum(layer_macs(l, shapes[l.inputs[0]] if l.inputs else None, shapes[l.name])
                   for l in model.layers))


def per_layer_counts(model: Model) -> dict:
    shapes = infer_shapes(model)
    out = {}
    for l in model.layers:
        if l.kind not in ("conv", "linear"):
            continue
        params = sum(v.size for k, v in model.params.items() if k.startswith(l.name + "."))
        out[l.name] = {"params": int(params), "macs": layer_macs(l, shapes[l.inputs[0]], shapes[l.name])}
    return out


def alpha_histogram(alpha, bins: int = HIST_BINS) -> dict:
    """Fixed-bin histogram over [-max|alpha|, +max|alpha|] (over [-1, 1] if alpha is all zero)."""
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    m = float(np.abs(alpha).max()) if alpha.size else 0.0
    lim = m if m > 0 else 1.0
    counts, _ = np.histogram(alpha, bins=bins, range=(-lim, lim))
    return {"lo": -lim, "hi": lim, "counts": [int(c) for c in counts]}


def sparsity_report(structure_sets: dict) -> dict:
    """Per-layer alpha histogram, fraction of structures inactive, active count."""
    out = {}
    for name, s in structure_sets.items():
        active = s.view().active_mask
        n = int(active.size)
        out[name] = {
            "granularity": s.granularity,
            "epsilon": float(s.epsilon),
            "structures": n,
            "active": int(active.sum()),
            "fraction_below_eps": float((n - int(active.sum())) / n) if n else 0.0,
            "histogram": alpha_histogram(s.alpha),
        }
    return out


def total_sparsity(structure_sets: dict) -> float:
    n = sum(s.n_structures for s in structure_sets.values())
    pruned = sum(int((~s.view().active_mask).sum()) for s in structure_sets.values())
    return pruned / n if n else 0.0


# ------------------------------------------------------------ compaction

def _used_input_channels(s: StructureSet, active: np.ndarray, C: int) -> np.ndarray:
    if s.granularity == "channel":
        return np.flatnonzero(active)
    if s.granularity == "column":
        return np.flatnonzero(active.any(axis=(0, 1)))
    return np.arange(C) if active.any() else np.array([], dtype=np.intp)


def _as_basic(s: StructureSet, view):
    """Rewrite a combined layer+channel set as the equivalent channel set."""
    if s.granularity != "layer_channel":
        return s, view
    nu = view.nu[0] * view.nu[1:]
    active = view.active_mask[0] & view.active_mask[1:]
    eff = StructureSet("channel", nu, 0.0, s.regularizer, s.grad_rule, active, False)
    return eff, eff.view()


def _bn_eval(model: Model, name: str, value: np.ndarray) -> np.ndarray:
    g, b = model.params[f"{name}.gamma"], model.params[f"{name}.beta"]
    rm, rv = model.buffers[f"{name}.running_mean"], model.buffers[f"{name}.running_var"]
    inv = 1.0 / np.sqrt(rv + BN_EPS)
    return (value - rm) * inv * g + b


def fold_and_compact(model: Model, structure_sets: dict | None = None):
    """Return ``(compact_model, plan)``; the compact model's eval forward matches
    the thresholded (masked) model's eval forward."""
    if model.compacted:
        raise CompactionError("model is already compacted")
    sets = model.structures if structure_sets is None else structure_sets
    for name in sets:
        if name not in {l.name for l in model.layers}:
            raise CompactionError(f"structure set for unknown layer {name!r}")
    shapes = infer_shapes(model)
    plan = CompactionPlan()
    params = {k: v.copy() for k, v in model.params.items()}
    buffers = {k: v.copy() for k, v in model.buffers.items()}
    layers = {l.name: LayerSpec.from_dict(l.to_dict()) for l in model.layers}
    order = [l.name for l in model.layers]

    # pass 1: fold
    used_in: dict[str, np.ndarray] = {}
    kept_rows: dict[str, np.ndarray] = {}
    const_value: dict[str, np.ndarray | None] = {}
    for name, s in sets.items():
        l = layers[name]
        w = model.params[f"{name}.weight"]
        view = s.view()
        plan.kept[name] = np.flatnonzero(view.active_mask.ravel())
        s, view = _as_basic(s, view)
        folded = psp_forward(w, s, view)
        params[f"{name}.weight"] = folded
        plan.folded[name] = folded
        if not view.active_mask.any():
            C, H, W = shapes[name]
            layers[name] = LayerSpec(name, "const", [], {"C": C, "H": H, "W": W}, block=l.block)
            del params[f"{name}.weight"]
            const_value[name] = None
            continue
        used_in[name] = _used_input_channels(s, view.active_mask, l.attrs["C"])
        if s.granularity in ("column", "shape"):
            kept_rows[name] = lowered_rows(s.granularity, w.shape, view.active_mask)

    # pass 2: constant folding through per-channel layers
    for name in order:
        l = layers[name]
        if l.kind == "const" or not l.inputs or not all(i in const_value for i in l.inputs):
            continue
        C, H, W = shapes[name] if len(shapes[name]) == 3 else (None, None, None)
        if C is None:
            continue
        vals = [const_value[i] for i in l.inputs]
        dense = [np.zeros(shapes[i][0]) if v is None else v for i, v in zip(l.inputs, vals)]
        if l.kind == "batchnorm":
            v = _bn_eval(model, name, dense[0])
            for p in ("gamma", "beta"):
                del params[f"{name}.{p}"]
            for p in ("running_mean", "running_var"):
                del buffers[f"{name}.{p}"]
        elif l.kind in ("relu",):
            v = np.maximum(dense[0], 0.0)
        elif l.kind in ("avgpool", "maxpool"):
            v = dense[0]
        elif l.kind == "residual_add":
            v = np.sum(dense, axis=0)
        elif l.kind == "select":
            v = dense[0][np.asarray(l.attrs["index"], dtype=np.intp)]
        else:
            continue
        layers[name] = LayerSpec(name, "const", [], {"C": C, "H": H, "W": W}, block=l.block)
        const_value[name] = None if not np.any(v) else v

    # the output must still depend on the input
    depends = {}
    for name in order:
        l = layers[name]
        depends[name] = l.kind == "input" or any(depends[i] for i in l.inputs)
    if not depends[order[-1]]:
        raise CompactionError("network disconnected: a fully pruned layer has no bypass path to the output")

    # pass 3: channel liveness, output to input
    def n_channels(name):
        return shapes[name][0]

    live: dict[str, set] = {name: set() for name in order}
    live[order[-1]] = set(range(n_channels(order[-1])))
    needs: dict[str, list] = {}
    for name in reversed(order):
        l = layers[name]
        mine = live[name]
        if not mine or l.kind in ("input", "const"):
            needs[name] = [set() for _ in l.inputs]
            continue
        if l.kind == "conv":
            req = [set(used_in[name].tolist()) if name in used_in else set(range(n_channels(l.inputs[0])))]
        elif l.kind == "linear":
            req = [set(range(n_channels(l.inputs[0])))]
        elif l.kind in ("batchnorm", "relu", "avgpool", "maxpool"):
            req = [set(mine)]
        elif l.kind == "residual_add":
            req = [set(mine) for _ in l.inputs]
        elif l.kind == "concat":
            req, off = [], 0
            for i in l.inputs:
                n = n_channels(i)
                req.append({c - off for c in mine if off <= c < off + n})
                off += n
        else:
            raise CompactionError(f"cannot compact layer kind {l.kind!r}")
        needs[name] = req
        for i, r in zip(l.inputs, req):
            live[i] |= r

    # pass 4: rebuild
    out_ch: dict[str, list] = {}
    new_layers: list[LayerSpec] = []
    new_params: dict[str, np.ndarray] = {}
    new_buffers: dict[str, np.ndarray] = {}

    def feed(consumer: str, producer: str, wanted: list, tag: int) -> str:
        have = out_ch[producer]
        if have == wanted:
            return producer
        pos = {c: j for j, c in enumerate(have)}
        sel = f"{consumer}.select{tag}"
        new_layers.append(LayerSpec(sel, "select", [producer], {"index": [pos[c] for c in wanted]}))
        out_ch[sel] = wanted
        return sel

    for name in order:
        l = layers[name]
        mine = sorted(live[name])
        if not mine:
            if model.layer(name).kind in ("conv", "linear"):
                plan.removed_layers.append(name)
            continue
        a = dict(l.attrs)
        if l.kind == "input":
            out_ch[name] = list(range(n_channels(name)))
            new_layers.append(l)
            continue
        if l.kind == "const":
            if model.layer(name).kind in ("conv", "linear"):
                plan.removed_layers.append(name)
            a["C"] = len(mine)
            if const_value[name] is not None:
                new_params[f"{name}.value"] = const_value[name][mine]
            new_layers.append(LayerSpec(name, "const", [], a, block=l.block))
            out_ch[name] = mine
            continue
        wanted_in = [sorted(r) for r in needs[name]]
        if l.kind == "concat":
            srcs = [feed(name, i, w, j) for j, (i, w) in enumerate(zip(l.inputs, wanted_in))]
            offs = np.cumsum([0] + [n_channels(i) for i in l.inputs])
            out_ch[name] = [c + int(offs[j]) for j, w in enumerate(wanted_in) for c in w]
            new_layers.append(LayerSpec(name, "concat", srcs, a, l.psp_attached, l.psp_exempt_reason, l.block))
            continue
        srcs = [feed(name, i, w, j) for j, (i, w) in enumerate(zip(l.inputs, wanted_in))]
        out_ch[name] = mine
        if l.kind == "conv":
            w = params[f"{name}.weight"][mine][:, wanted_in[0]]
            a["K"], a["C"] = len(mine), len(wanted_in[0])
            plan.in_channels[name] = wanted_in[0]
            if name in kept_rows:
                R, S = a["R"], a["S"]
                pos = {c: j for j, c in enumerate(wanted_in[0])}
                rows = kept_rows[name]
                new_rows = [pos[r // (R * S)] * R * S + r % (R * S) for r in rows]
                if len(new_rows) < a["C"] * R * S:
                    full2d = params[f"{name}.weight"][mine].reshape(len(mine), -1)
                    w = np.ascontiguousarray(full2d[:, rows])
                    a["columns"] = new_rows
                    plan.columns[name] = rows.tolist()
            new_params[f"{name}.weight"] = np.ascontiguousarray(w)
            if f"{name}.bias" in params:
                new_params[f"{name}.bias"] = params[f"{name}.bias"][mine]
        elif l.kind == "batchnorm":
            a["C"] = len(mine)
            for p in ("gamma", "beta"):
                new_params[f"{name}.{p}"] = params[f"{name}.{p}"][mine]
            for p in ("running_mean", "running_var"):
                new_buffers[f"{name}.{p}"] = buffers[f"{name}.{p}"][mine]
        elif l.kind == "linear":
            new_params[f"{name}.weight"] = params[f"{name}.weight"]
            new_params[f"{name}.bias"] = params[f"{name}.bias"]
        new_layers.append(LayerSpec(name, l.kind, srcs, a, l.psp_attached, l.psp_exempt_reason, l.block))
        if len(mine) < n_channels(name):
            plan.out_channels[name] = mine

    compact = Model(new_layers, new_params, new_buffers, model.input_shape, model.num_classes, {},
                    dict(model.arch), compacted=True)
    infer_shapes(compact)
    for k, v in model.params.items():
        plan.removed_params += v.size - (new_params[k].size if k in new_params else 0)
    plan.added_params = int(sum(v.size for k, v in new_params.items() if k not in model.params))
    plan.removed_params = int(plan.removed_params)
    return compact, plan


def masked_model(model: Model) -> Model:
    """Copy with ``nu`` folded into the weights but nothing removed."""
    m = model.copy()
    for name, s in model.structures.items():
        m.params[f"{name}.weight"] = psp_forward(model.params[f"{name}.weight"], s)
    m.structures = {}
    return m


# ---------------------------------------------------------------- report

@dataclass
class CompressionReport:
    layers: list
    total: dict

    def to_dict(self) -> dict:
        return {"layers": self.layers, "total": self.total}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        cols = ["layer", "granularity", "params_before", "params_after", "macs_before", "macs_after",
                "structures_total", "structures_kept", "fraction_below_eps"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.layers:
            w.writerow([row.get(c, "") for c in cols])
        t = self.total
        w.writerow(["TOTAL", "", t["params_before"], t["params_after"], t["macs_before"], t["macs_after"],
                    t["structures_total"], t["structures_kept"], t["fraction_below_eps"]])
        return buf.getvalue()


def compression_report(original: Model, compact: Model, plan: CompactionPlan | None = None,
                       structure_sets: dict | None = None) -> CompressionReport:
    sets = original.structures if structure_sets is None else structure_sets
    before = per_layer_counts(original)
    after = per_layer_counts(compact)
    sp = sparsity_report(sets)
    rows = []
    for name, b in before.items():
        a = after.get(name, {"params": 0, "macs": 0})
        row = {"layer": name, "params_before": b["params"], "params_after": a["params"],
               "macs_before": b["macs"], "macs_after": a["macs"]}
        if name in sp:
            r = sp[name]
            row.update(granularity=r["granularity"], structures_total=r["structures"],
                       structures_kept=r["active"], fraction_below_eps=r["fraction_below_eps"],
                       histogram=r["histogram"])
        rows.append(row)
    n_total = sum(r["structures"] for r in sp.values())
    n_kept = sum(r["active"] for r in sp.values())
    total = {
        "params_before": count_params(original), "params_after": count_params(compact),
        "macs_before": count_macs(original), "macs_after": count_macs(compact),
        "layers_before": weighted_layer_count(original), "layers_after": weighted_layer_count(compact),
        "structures_total": n_total, "structures_kept": n_kept,
        "fraction_below_eps": (n_total - n_kept) / n_total if n_total else 0.0,
    }
    if plan is not None:
        total["removed_layers"] = list(plan.removed_layers)
    return CompressionReport(rows, total)
