"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""
import csv
import io
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psprune import autodiff as ad
from psprune.compact import count_macs, count_params, fold_and_compact, total_sparsity
from psprune.data import SyntheticSpec, make_synthetic, subtract_mean
from psprune.layers import (attach_psp, build_densenet_small, build_plain_cnn, build_resnet_small, forward,
                            forward_graph)
from psprune.optim import SgdState, sgd_step
from psprune.psp import StructureSet, substitute, threshold
from psprune.train import SWEEP_COLUMNS, TrainConfig, ablation_sweep, sweep_csv, train

from conftest import central_diff, rel_err, two_conv_net
from test_compact import enumerate_counts, single_conv
from test_psp import sum_oracle

MU, LR, LAM = 0.9, 0.1, 1e-4


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}" + (f": {detail}" if detail else ""))
        assert ok, f"criterion {number} failed: {detail}"
    return emit


# ---------------------------------------------------------------- 1

def _threshold_oracle(a, eps):
    return a if abs(a) >= eps else 0.0


def test_c1_threshold_semantics(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    bad = 0
    for _ in range(200):
        eps = float(rng.uniform(0, 0.5))
        alpha = rng.normal(0, 0.3, 64)
        # exact boundaries on both signs, plus the neighbouring doubles
        alpha[:6] = [eps, -eps, np.nextafter(eps, 0), -np.nextafter(eps, 0), np.nextafter(eps, 1), 0.0]
        v = threshold(alpha, eps)
        want = np.array([_threshold_oracle(a, eps) for a in alpha])
        bad += int(not np.array_equal(v.nu, want)) + int(not np.array_equal(v.active_mask, np.abs(alpha) >= eps))
        bad += int(not (v.active_mask[0] and v.active_mask[1]))

    @settings(max_examples=300, deadline=None, derandomize=True)
    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=16),
           st.floats(0, 1e6, allow_nan=False))
    def prop(values, eps):
        v = threshold(np.array(values), eps)
        assert [float(x) for x in v.nu] == [_threshold_oracle(a, eps) for a in values]

    prop()
    dt = time.perf_counter() - t0
    verdict(1, "threshold semantics", bad == 0 and dt < 1.0, f"mismatches={bad} runtime={dt:.2f}s")


# ---------------------------------------------------------------- 2

def _psp_net(granularity, rule, seed=0):
    m = two_conv_net(seed)
    attach_psp(m, granularity, epsilon=0.0, seed=seed + 1, grad_rule=rule)
    return m


def _net_loss(m, x, y):
    logits, tape, leaves = forward_graph(m, x, ad.Tape(), requires_grad=True)
    return ad.cross_entropy(logits, y), tape, leaves


def test_c2_ste_gradients(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(4, 2, 5, 5)), rng.integers(0, 3, 4)
    worst, exact = 0.0, True
    n_params = count_params(two_conv_net())
    for granularity in ("column", "channel", "shape"):
        m = _psp_net(granularity, "chain_rule")
        loss, tape, leaves = _net_loss(m, x, y)
        tape.backward(loss)
        for name, s in m.structures.items():
            fd = central_diff(lambda: float(_net_loss(m, x, y)[0].value), s.alpha)
            worst = max(worst, float(rel_err(leaves[f"{name}.alpha"].grad, fd, floor=1e-5).max()))

        m = _psp_net(granularity, "paper_sum")
        loss, tape, leaves = _net_loss(m, x, y)
        tape.backward(loss)
        for node in tape.nodes:
            if node.op != "psp_substitute":
                continue
            alpha_leaf = node.parents[1]
            expect = sum_oracle(node.grad, granularity)
            exact &= np.array_equal(alpha_leaf.grad, expect)
    dt = time.perf_counter() - t0
    ok = n_params <= 1000 and worst <= 1e-4 and exact and dt < 60
    verdict(2, "STE gradients", ok,
            f"params={n_params} chain_rule max rel err={worst:.2e} paper_sum bit-exact={exact} runtime={dt:.1f}s")


# ---------------------------------------------------------------- 3

def test_c3_compaction_equivalence(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    x = rng.normal(size=(100, 3, 8, 8))
    diffs, pruned = {}, {}
    for granularity in ("column", "channel", "shape", "layer", "layer_channel"):
        m = attach_psp(build_densenet_small(10, 10, 4, (3, 8, 8), seed=3), granularity, epsilon=0.1, seed=4)
        for k in m.buffers:
            m.buffers[k] = m.buffers[k] + rng.uniform(0.1, 0.5, m.buffers[k].shape)
        compact, _ = fold_and_compact(m)
        diffs[granularity] = float(np.max(np.abs(forward(m, x) - forward(compact, x))))
        pruned[granularity] = count_params(m) - count_params(compact)
    dt = time.perf_counter() - t0
    ok = max(diffs.values()) <= 1e-6 and all(p > 0 for p in pruned.values()) and dt < 120
    detail = " ".join(f"{g}={d:.1e}" for g, d in diffs.items())
    verdict(3, "compaction equivalence", ok, f"max abs diff {detail} runtime={dt:.1f}s")


# ---------------------------------------------------------------- 4

def test_c4_accounting_oracle(verdict):
    archs = {
        "resnet8": build_resnet_small(8, 10, (3, 16, 16)),
        "resnet20": build_resnet_small(20, 100, (3, 32, 32)),
        "densenet10": build_densenet_small(10, 10, 4, (3, 16, 16)),
        "densenet40": build_densenet_small(40, 10, 12, (3, 32, 32)),
        "plain": build_plain_cnn(10, (1, 28, 28)),
        "two_conv": two_conv_net(),
        "resnet14_compact": fold_and_compact(
            attach_psp(build_resnet_small(14, 10, (3, 16, 16), seed=2), "column", seed=5))[0],
    }
    mismatched = [n for n, m in archs.items() if (count_params(m), count_macs(m)) != enumerate_counts(m)]
    spot = count_macs(single_conv(2, 3, 3, 3, 8, 8, padding=1))
    ok = not mismatched and spot == 3456 and len(archs) >= 5
    verdict(4, "accounting oracle", ok, f"architectures={len(archs)} mismatched={mismatched} spot={spot}")


# ---------------------------------------------------------------- 5

def _velocity_sum(t, mu):
    """Displacement after t steps of a unit constant force under momentum, from rest."""
    return sum((1 - mu ** i) / (1 - mu) for i in range(1, t + 1))


def test_c5_reappearance(verdict):
    eps, a0, push = 0.2, 0.05, 0.05
    s = StructureSet("layer", np.array(a0), epsilon=eps)
    w = np.ones((1, 1, 1, 1))
    state = SgdState(LR, MU, LAM, "weight_decay")
    # decay pulls back by at most lam*eps while alpha sits below the threshold
    force = LR * (push - LAM * eps)
    bound = next(t for t in range(1, 10_000) if a0 + force * _velocity_sum(t, MU) >= eps)
    history = []
    for step in range(1, bound + 1):
        tape = ad.Tape()
        wn, an = tape.leaf(w, "w"), tape.leaf(s.alpha, "alpha")
        q = substitute(wn, an, s)
        history.append(bool(s.view().active_mask))
        tape.backward(ad.scale(ad.total(q), -push))
        s.alpha, _ = sgd_step(s.alpha, an.grad, state, "alpha")
        if s.view().active_mask:
            break
    came_back = bool(s.view().active_mask)
    ok = not history[0] and came_back and step <= bound
    verdict(5, "pruned structure reappears", ok, f"reactivated at step {step} (bound {bound}), alpha={float(s.alpha):.4f}")


# ---------------------------------------------------------------- 6

def test_c6_regularizer_contrast(verdict):
    a0, eps, steps = 0.5, 0.1, 20_000
    # weight decay: linear two-term recurrence, alpha_t = A r1^t + B r2^t
    wd = SgdState(LR, MU, LAM, "weight_decay")
    a, traj = np.array(a0), [a0]
    for _ in range(steps):
        a, _ = sgd_step(a, np.zeros(()), wd, "a")
        traj.append(float(a))
    traj = np.array(traj)
    c = LAM * LR
    r1, r2 = np.roots([1.0, -(1 + MU - c), MU])
    r1, r2 = max(r1, r2), min(r1, r2)
    B = (traj[1] - a0 * r1) / (r2 - r1)
    A = a0 - B
    t = np.arange(steps + 1)
    closed = A * r1 ** t + B * r2 ** t
    ratio = traj[-1] / traj[-2]
    wd_ok = (np.all(traj > 0) and np.all(np.diff(traj) < 0) and abs(ratio - r1) < 1e-9
             and 0 < r2 < r1 < 1 and A > 0 and np.allclose(traj, closed, rtol=1e-9, atol=0))

    # late steps are exact multiples of lr*lam/(1-mu); start off that grid so the crossing is unambiguous
    a0 += 3e-5
    l1 = SgdState(LR, MU, LAM, "l1")
    a, hist = np.array(a0), [a0]
    while abs(float(a)) > eps:
        a, _ = sgd_step(a, np.zeros(()), l1, "a")
        hist.append(float(a))
    predicted = next(n for n in range(1, 10 ** 6) if a0 - c * _velocity_sum(n, MU) <= eps)
    late_steps = -np.diff(hist)[-100:]
    l1_ok = len(hist) - 1 == predicted and np.allclose(late_steps, c / (1 - MU), rtol=1e-6)
    verdict(6, "weight decay vs l1", bool(wd_ok and l1_ok),
            f"wd alpha after {steps} steps={traj[-1]:.4e} ratio={ratio:.8f} (r1={r1:.8f}); "
            f"l1 entered [-eps, eps] at step {len(hist) - 1} (predicted {predicted})")


# ---------------------------------------------------------------- 7

def test_c7_desk_scale_end_to_end(verdict):
    t0 = time.perf_counter()
    spec = SyntheticSpec(n_train=1000, n_val=1000, noise=2.5, size=16)
    tr = subtract_mean(make_synthetic(spec, 0))
    va = subtract_mean(make_synthetic(spec, 0, "val"), tr.mean)

    def run(mode):
        m = build_resnet_small(8, 10, tr.input_shape, seed=0)
        cfg = TrainConfig(epochs=30, mode=mode, granularity="column", epsilon=0.1, weight_decay=LAM,
                          structure_lambda=LAM, momentum=MU, lr=LR, seed=0, grad_rule="chain_rule")
        return train(m, tr, cfg, va, run_id=mode)

    base, base_log = run("none")
    pruned, log_a = run("psp_threshold")
    again, log_b = run("psp_threshold")
    dt = time.perf_counter() - t0
    base_err, psp_err = base_log.records[-1]["val_error"], log_a.records[-1]["val_error"]
    sparsity = total_sparsity(pruned.structures)
    identical = (log_a.to_jsonl() == log_b.to_jsonl()
                 and all(np.array_equal(pruned.params[k], again.params[k]) for k in pruned.params)
                 and all(np.array_equal(s.alpha, again.structures[n].alpha) for n, s in pruned.structures.items()))
    ok = psp_err <= base_err + 2.0 and sparsity >= 0.40 and identical and dt < 1800
    verdict(7, "desk-scale end to end", ok,
            f"baseline={base_err:.1f}% psp={psp_err:.1f}% column sparsity={sparsity:.1%} "
            f"bit-identical={identical} runtime={dt:.0f}s")


# ---------------------------------------------------------------- 8

def _is_trend_up(levels, values):
    slope = np.polyfit(levels, values, 1)[0]
    return values[-1] >= values[0] and slope >= 0


def test_c8_sweep_monotonicity(verdict):
    spec = SyntheticSpec(n_train=400, n_val=200, size=8, noise=1.5)
    tr = subtract_mean(make_synthetic(spec, 0))
    va = subtract_mean(make_synthetic(spec, 0, "val"), tr.mean)
    cfg = TrainConfig(epochs=16, seed=0, granularity="column", grad_rule="chain_rule")

    def factory():
        return build_resnet_small(8, 10, (3, 8, 8), seed=0)

    eps_levels = [0.0, 0.02, 0.04, 0.06, 0.08]
    lam_levels = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6]
    eps_rows = ablation_sweep(factory, tr, va, cfg, epsilons=eps_levels)
    lam_rows = ablation_sweep(factory, tr, va, cfg, lambdas=lam_levels)
    eps_sp = [r["sparsity"] for r in eps_rows]
    lam_sp = [r["sparsity"] for r in lam_rows]
    eps_ok = all(b >= a for a, b in zip(eps_sp, eps_sp[1:]))
    lam_ok = _is_trend_up(np.log10(lam_levels), lam_sp)

    text = sweep_csv(eps_rows + lam_rows)
    rows = list(csv.DictReader(io.StringIO(text)))
    shape_ok = (list(rows[0]) == SWEEP_COLUMNS and len(rows) == 10
                and [r["method"] for r in rows] == ["psp_weight_decay"] * 5 + ["psp_l1"] * 5
                and [float(r["epsilon"]) for r in rows[:5]] == eps_levels
                and all(float(r["epsilon"]) == 1e-3 for r in rows[5:])
                and [float(r["structure_lambda"]) for r in rows[5:]] == lam_levels
                and all(0 <= float(r["sparsity"]) <= 1 and 0 <= float(r["val_error"]) <= 100 for r in rows))
    verdict(8, "sweep monotonicity", eps_ok and lam_ok and shape_ok,
            f"eps sparsity={[round(v, 4) for v in eps_sp]} l1 sparsity={[round(v, 4) for v in lam_sp]} "
            f"csv shape ok={shape_ok}")


# ---------------------------------------------------------------- 9

def test_c9_mode_off_equivalence(verdict):
    spec = SyntheticSpec(n_train=128, n_val=64, size=8, noise=1.5)
    tr = subtract_mean(make_synthetic(spec, 0))
    va = subtract_mean(make_synthetic(spec, 0, "val"), tr.mean)
    cfg = TrainConfig(epochs=3, mode="none", seed=0)

    plain = build_resnet_small(8, 10, (3, 8, 8), seed=0)
    attached = attach_psp(build_resnet_small(8, 10, (3, 8, 8), seed=0), "column", epsilon=0.1, seed=7)
    alphas = {n: s.alpha.copy() for n, s in attached.structures.items()}
    plain, log_p = train(plain, tr, TrainConfig(epochs=3, mode="none", seed=0), va, run_id="r")
    attached, log_a = train(attached, tr, cfg, va, run_id="r")
    same = (log_p.to_jsonl() == log_a.to_jsonl()
            and all(np.array_equal(plain.params[k], attached.params[k]) for k in plain.params)
            and all(np.array_equal(plain.buffers[k], attached.buffers[k]) for k in plain.buffers)
            and all(np.array_equal(alphas[n], s.alpha) for n, s in attached.structures.items()))
    x = np.random.default_rng(9).normal(size=(8, 3, 8, 8))
    same &= np.array_equal(forward(plain, x), forward(attached, x, use_psp=False))
    verdict(9, "mode=none adds no side effects", bool(same), f"bit-identical={bool(same)}")
