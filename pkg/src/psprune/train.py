"""PSP training: substituted forward, straight-through backward, two SGD groups.

Weights always use momentum SGD with coupled weight decay. Structure
parameters use the same momentum and learning rate with either weight decay
or an l1 penalty. Pruning modes:

``psp_threshold``       nu = alpha where |alpha| >= epsilon, else 0
``psp_fixed_sparsity``  the lowest ``fraction`` of |alpha| per layer is masked,
                        re-ranked every epoch; no structure regularization
``l1_norm_baseline``    alpha frozen at 1, the lowest-l1-norm ``fraction`` of
                        weight structures is masked, re-ranked every epoch
``none``                structure parameters are ignored entirely
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .compact import alpha_histogram, total_sparsity
from .data import Dataset, batches
from .layers import Model, attach_psp, forward_graph
from .optim import SgdState, sgd_step
from .psp import ALL_GRANULARITIES, GRAD_RULES, STRUCTURE_REGULARIZERS, apply_fixed_sparsity, l1_norm_mask

MODES = ("psp_threshold", "psp_fixed_sparsity", "l1_norm_baseline", "none")
LOG_FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, step, value):
        super().__init__(f"non-finite value {value} at epoch {epoch}, step {step}")
        self.epoch, self.step = epoch, step


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    lr_milestones: tuple = (0.5, 0.75)
    lr_divisor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    structure_regularizer: str = "weight_decay"
    structure_lambda: float = 1e-4
    epsilon: float = 0.1
    granularity: str = "column"
    grad_rule: str = "paper_sum"
    mode: str = "psp_threshold"
    fraction: float = 0.0
    seed: int = 0
    flip: bool = False
    psp_include: tuple = ()
    psp_exclude: tuple = ()

    def __post_init__(self):
        self.lr_milestones = tuple(float(m) for m in self.lr_milestones)
        self.psp_include = tuple(self.psp_include)
        self.psp_exclude = tuple(self.psp_exclude)
        self.validate()

    def validate(self):
        checks = [
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr > 0, "lr must be > 0"),
            (all(0 < m <= 1 for m in self.lr_milestones), "lr_milestones must be fractions in (0, 1]"),
            (self.lr_divisor > 0, "lr_divisor must be > 0"),
            (0 <= self.momentum < 1, "momentum must lie in [0, 1)"),
            (self.weight_decay >= 0 and self.structure_lambda >= 0, "regularization strengths must be >= 0"),
            (self.epsilon >= 0, "epsilon must be >= 0"),
            (self.structure_regularizer in STRUCTURE_REGULARIZERS,
             f"structure_regularizer must be one of {STRUCTURE_REGULARIZERS}"),
            (self.granularity in ALL_GRANULARITIES, f"granularity must be one of {ALL_GRANULARITIES}"),
            (self.grad_rule in GRAD_RULES, f"grad_rule must be one of {GRAD_RULES}"),
            (self.mode in MODES, f"mode must be one of {MODES}"),
            (0 <= self.fraction < 1, "fraction must lie in [0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def lr_at(self, epoch: int) -> float:
        # a milestone that floors to epoch 0 (very short runs) is skipped
        drops = sum(epoch >= max(1, int(math.floor(m * self.epochs))) for m in self.lr_milestones)
        return self.lr / self.lr_divisor ** drops

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        d["psp_include"] = list(self.psp_include)
        d["psp_exclude"] = list(self.psp_exclude)
        return d


@dataclass
class RunLog:
    run_id: str = "run"
    records: list = field(default_factory=list)

    def append(self, record: dict):
        if self.records and record["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("epoch index must increase monotonically")
        self.records.append(record)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "RunLog":
        recs = [json.loads(line) for line in text.splitlines() if line.strip()]
        versions = {r.get("format_version") for r in recs}
        if len(versions) > 1:
            raise ValueError(f"mixed log format versions {sorted(map(str, versions))}")
        log = cls(recs[0]["run_id"] if recs else "run")
        for r in recs:
            log.append(r)
        return log


def evaluate(model: Model, ds: Dataset, batch_size: int = 256, use_psp: bool = True):
    """Top-1 and top-5 error in percent (top-5 is None for <= 5 classes)."""
    if model.num_classes != ds.num_classes:
        raise ConfigError(f"model has {model.num_classes} classes, dataset has {ds.num_classes}")
    wrong1 = wrong5 = 0
    for x, y in batches(ds, batch_size, shuffle=False):
        logits, _, _ = forward_graph(model, x, train=False, use_psp=use_psp)
        z = logits.value
        wrong1 += int((z.argmax(axis=1) != y).sum())
        if model.num_classes > 5:
            top5 = np.argsort(-z, axis=1, kind="stable")[:, :5]
            wrong5 += int((top5 != y[:, None]).all(axis=1).sum())
    n = max(len(ds), 1)
    return 100.0 * wrong1 / n, (100.0 * wrong5 / n if model.num_classes > 5 else None)


def prepare_structures(model: Model, config: TrainConfig):
    """Attach structure sets if needed and configure them for ``config.mode``."""
    if config.mode == "none":
        return
    if not model.structures:
        attach_psp(model, config.granularity, config.epsilon, config.seed, config.structure_regularizer,
                   config.grad_rule, config.psp_include, config.psp_exclude)
    for s in model.structures.values():
        s.grad_rule = config.grad_rule
        s.regularizer = config.structure_regularizer
        if config.mode == "psp_threshold":
            s.epsilon, s.mask, s.trainable = config.epsilon, None, True
        elif config.mode == "psp_fixed_sparsity":
            s.epsilon, s.trainable = 0.0, True
        else:
            s.alpha = np.ones_like(s.alpha)
            s.epsilon, s.trainable = 0.0, False


def _rerank(model: Model, config: TrainConfig):
    for name, s in model.structures.items():
        if config.mode == "psp_fixed_sparsity":
            s.mask = ~apply_fixed_sparsity(s, config.fraction)
        elif config.mode == "l1_norm_baseline":
            s.mask = ~l1_norm_mask(model.params[f"{name}.weight"], s.granularity, config.fraction)


def _apply_updates(model, leaves, w_state, s_state, use_psp):
    for name in model.params:
        g = leaves[name].grad
        g = np.zeros_like(model.params[name]) if g is None else g
        model.params[name], _ = sgd_step(model.params[name], g, w_state, name)
    if not use_psp:
        return
    for lname, s in model.structures.items():
        node = leaves.get(f"{lname}.alpha")
        if node is None or not s.trainable:
            continue
        g = np.zeros_like(s.alpha) if node.grad is None else node.grad
        s.alpha, _ = sgd_step(s.alpha, g, s_state, f"{lname}.alpha")


def train(model: Model, train_ds: Dataset, config: TrainConfig, val_ds: Dataset | None = None,
          run_id: str = "run", on_epoch: Callable | None = None):
    """Train in place; returns ``(model, RunLog)``."""
    config.validate()
    prepare_structures(model, config)
    use_psp = config.mode != "none"
    w_state = SgdState(config.lr, config.momentum, config.weight_decay, "weight_decay")
    s_lambda = 0.0 if config.mode == "psp_fixed_sparsity" else config.structure_lambda
    s_state = SgdState(config.lr, config.momentum, s_lambda, config.structure_regularizer)
    log = RunLog(run_id)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        w_state.lr = s_state.lr = lr
        if use_psp:
            _rerank(model, config)
        loss_sum, seen = 0.0, 0
        for step, (x, y) in enumerate(batches(train_ds, config.batch_size, config.seed, True, epoch, config.flip)):
            tape = ad.Tape()
            logits, tape, leaves = forward_graph(model, x, tape, train=True, use_psp=use_psp, requires_grad=True)
            loss = ad.cross_entropy(logits, y)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, step, value)
            tape.backward(loss)
            try:
                _apply_updates(model, leaves, w_state, s_state, use_psp)
            except FloatingPointError as exc:
                raise TrainingDiverged(epoch, step, f"({exc})") from exc
            loss_sum += value * len(y)
            seen += len(y)
        record = {
            "format_version": LOG_FORMAT_VERSION,
            "run_id": run_id,
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / max(seen, 1),
        }
        if val_ds is not None:
            top1, top5 = evaluate(model, val_ds, use_psp=use_psp)
            record["val_error"] = top1
            record["val_top5_error"] = top5
        if use_psp:
            record["sparsity"] = {n: float((~s.view().active_mask).mean()) for n, s in model.structures.items()}
            record["total_sparsity"] = total_sparsity(model.structures)
            record["alpha_hist"] = {n: alpha_histogram(s.alpha) for n, s in model.structures.items()}
        else:
            record["sparsity"], record["total_sparsity"], record["alpha_hist"] = {}, 0.0, {}
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return model, log


# ------------------------------------------------------------------ sweep

SWEEP_COLUMNS = ["method", "level", "epsilon", "structure_lambda", "sparsity", "val_error"]


def ablation_sweep(model_factory: Callable[[], Model], train_ds: Dataset, val_ds: Dataset,
                   config: TrainConfig, epsilons=None, lambdas=None, l1_epsilon: float = 1e-3):
    """Train one model per sweep level; returns rows of sparsity vs validation error.

    ``epsilons`` sweeps the threshold with weight decay on the structure
    parameters ("psp_weight_decay"); ``lambdas`` sweeps the l1 strength at a
    fixed small threshold ``l1_epsilon`` ("psp_l1"). Exactly one axis must be given.
    """
    if (epsilons is None) == (lambdas is None):
        raise ConfigError("select exactly one sweep axis: epsilons or lambdas")
    rows = []
    if epsilons is not None:
        levels = [replace(config, mode="psp_threshold", structure_regularizer="weight_decay", epsilon=float(e))
                  for e in epsilons]
        method = "psp_weight_decay"
    else:
        levels = [replace(config, mode="psp_threshold", structure_regularizer="l1", structure_lambda=float(l),
                          epsilon=l1_epsilon)
                  for l in lambdas]
        method = "psp_l1"
    for i, cfg in enumerate(levels):
        model = model_factory()
        model.structures = {}
        model, log = train(model, train_ds, cfg, val_ds, run_id=f"{method}-{i}")
        err = evaluate(model, val_ds)[0] if val_ds is not None else float("nan")
        rows.append({"method": method, "level": i, "epsilon": cfg.epsilon, "structure_lambda": cfg.structure_lambda,
                     "sparsity": total_sparsity(model.structures), "val_error": err})
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in SWEEP_COLUMNS})
    return buf.getvalue()
