import numpy as np
import pytest

from psprune import autodiff as ad
from psprune.compact import sparsity_report
from psprune.data import Dataset, SyntheticSpec, make_synthetic, subtract_mean
from psprune.layers import LayerSpec, Model, attach_psp, build_resnet_small, forward_graph
from psprune.train import (ConfigError, RunLog, SWEEP_COLUMNS, TrainConfig, TrainingDiverged, ablation_sweep,
                           evaluate, sweep_csv, train)

SPEC = SyntheticSpec(n_train=96, n_val=48, size=8, noise=1.5)


@pytest.fixture(scope="module")
def data():
    tr = subtract_mean(make_synthetic(SPEC, 0))
    return tr, subtract_mean(make_synthetic(SPEC, 0, "val"), tr.mean)


def small_resnet(seed=0):
    return build_resnet_small(8, 10, (3, 8, 8), widths=(4, 8, 8), seed=seed)


def linear_model(n_in=4, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    layers = [LayerSpec("input", "input", []),
              LayerSpec("fc", "linear", ["input"], {"in": n_in, "out": classes}, psp_exempt_reason="output")]
    return Model(layers, {"fc.weight": rng.normal(size=(classes, n_in)), "fc.bias": rng.normal(size=classes)},
                 {}, (n_in, 1, 1), classes)


def test_defaults():
    c = TrainConfig()
    assert (c.weight_decay, c.structure_lambda, c.momentum, c.lr) == (1e-4, 1e-4, 0.9, 0.1)
    assert c.epsilon == 0.1 and c.grad_rule == "paper_sum" and c.batch_size == 64


def test_lr_schedule():
    c = TrainConfig(epochs=30)
    assert [c.lr_at(e) for e in (0, 14, 15, 21, 22, 29)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001, 0.001])
    assert TrainConfig(epochs=1).lr_at(0) == 0.1


@pytest.mark.parametrize("kw", [{"mode": "prune_all"}, {"fraction": 1.0}, {"epsilon": -1}, {"granularity": "row"},
                                {"batch_size": 0}, {"momentum": 1.0}, {"grad_rule": "other"}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_zero_epochs(data):
    m = small_resnet()
    before = {k: v.copy() for k, v in m.params.items()}
    m, log = train(m, data[0], TrainConfig(epochs=0))
    assert log.records == []
    assert all(np.array_equal(before[k], m.params[k]) for k in before)


def test_single_step_plain_sgd():
    rng = np.random.default_rng(0)
    ds = Dataset(rng.normal(size=(5, 4, 1, 1)), [0, 2, 1, 1, 0], 3)
    m = linear_model()
    p0 = {k: v.copy() for k, v in m.params.items()}
    tape = ad.Tape()
    logits, tape, leaves = forward_graph(m, ds.images, tape, requires_grad=True)
    grads = ad.backward(tape, ad.cross_entropy(logits, ds.labels))
    cfg = TrainConfig(epochs=1, batch_size=5, lr=0.05, momentum=0.0, weight_decay=0.0, mode="none")
    train(m, ds, cfg)
    for k in p0:
        # full batch, so the shuffled order changes nothing but summation order
        assert np.allclose(m.params[k], p0[k] - 0.05 * grads[k], rtol=0, atol=1e-15)


def test_two_epoch_runs_are_bit_identical(data):
    a, _ = train(small_resnet(), data[0], TrainConfig(epochs=2, batch_size=32, granularity="column"))
    b, _ = train(small_resnet(), data[0], TrainConfig(epochs=2, batch_size=32, granularity="column"))
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    for k in a.structures:
        assert a.structures[k].alpha.tobytes() == b.structures[k].alpha.tobytes()


def test_mode_none_matches_unattached(data):
    cfg = TrainConfig(epochs=1, batch_size=32, mode="none")
    plain, _ = train(small_resnet(), data[0], cfg)
    attached = attach_psp(small_resnet(), "column", epsilon=0.3, seed=4)
    attached, _ = train(attached, data[0], cfg)
    for k in plain.params:
        assert plain.params[k].tobytes() == attached.params[k].tobytes()


def test_fixed_sparsity_mode(data):
    cfg = TrainConfig(epochs=2, batch_size=32, mode="psp_fixed_sparsity", fraction=0.25, granularity="channel")
    m, log = train(small_resnet(), data[0], cfg)
    for name, s in m.structures.items():
        assert (~s.mask).sum() == int(np.floor(0.25 * s.n_structures))
        assert s.epsilon == 0.0
    assert all(abs(v - np.floor(0.25 * 4) / 4) < 1 for v in log.records[-1]["sparsity"].values())


def test_l1_norm_baseline_freezes_alpha(data):
    cfg = TrainConfig(epochs=1, batch_size=32, mode="l1_norm_baseline", fraction=0.5, granularity="column")
    m, _ = train(small_resnet(), data[0], cfg)
    for s in m.structures.values():
        assert np.array_equal(s.alpha, np.ones_like(s.alpha))
        assert (~s.mask).sum() == s.n_structures // 2


def test_divergence_reports_position():
    ds = Dataset(np.full((4, 4, 1, 1), np.nan), [0, 1, 2, 0], 3)
    with pytest.raises(TrainingDiverged) as exc:
        train(linear_model(), ds, TrainConfig(epochs=1, batch_size=2, mode="none"))
    assert exc.value.epoch == 0 and exc.value.step == 0


def test_log_records_and_sparsity_agree(data):
    m, log = train(small_resnet(), data[0], TrainConfig(epochs=2, batch_size=32), data[1], run_id="r1")
    assert [r["epoch"] for r in log.records] == [0, 1]
    rec = log.records[-1]
    rep = sparsity_report(m.structures)
    for name, frac in rec["sparsity"].items():
        assert frac == rep[name]["fraction_below_eps"]
        assert sum(rec["alpha_hist"][name]["counts"]) == rep[name]["structures"]
    assert rec["run_id"] == "r1" and 0 <= rec["val_error"] <= 100


def test_runlog_round_trip_and_checks():
    log = RunLog("x")
    log.append({"epoch": 0, "format_version": 1, "run_id": "x"})
    with pytest.raises(ValueError):
        log.append({"epoch": 0, "format_version": 1, "run_id": "x"})
    log.append({"epoch": 1, "format_version": 1, "run_id": "x"})
    assert RunLog.from_jsonl(log.to_jsonl()).records == log.records
    bad = log.to_jsonl() + '{"epoch": 2, "format_version": 2, "run_id": "x"}\n'
    with pytest.raises(ValueError, match="mixed"):
        RunLog.from_jsonl(bad)


# ------------------------------------------------------------------ eval

def test_eval_single_correct_sample():
    m = linear_model(n_in=2, classes=6)
    m.params["fc.weight"] = np.zeros((6, 2))
    m.params["fc.bias"] = np.array([0, 0, 0, 5.0, 0, 0])
    top1, top5 = evaluate(m, Dataset(np.zeros((1, 2, 1, 1)), [3], 6))
    assert f"{top1:.2f}" == "0.00" and top5 == 0.0


def test_eval_random_predictions_near_chance():
    rng = np.random.default_rng(5)
    m = linear_model(n_in=8, classes=10, seed=5)
    labels = np.arange(10_000) % 10
    top1, top5 = evaluate(m, Dataset(rng.normal(size=(10_000, 8, 1, 1)), labels, 10), batch_size=2000)
    assert abs(top1 - 90.0) <= 3.0
    assert abs(top5 - 50.0) <= 3.0


def test_eval_top5_only_above_five_classes():
    m = linear_model(classes=3)
    assert evaluate(m, Dataset(np.zeros((2, 4, 1, 1)), [0, 1], 3))[1] is None


def test_eval_class_mismatch():
    with pytest.raises(ConfigError):
        evaluate(linear_model(classes=3), Dataset(np.zeros((2, 4, 1, 1)), [0, 1], 4))


# ------------------------------------------------------------------ sweep

def test_sweep_needs_exactly_one_axis(data):
    with pytest.raises(ConfigError):
        ablation_sweep(small_resnet, data[0], data[1], TrainConfig(epochs=1), epsilons=[0.1], lambdas=[1e-4])
    with pytest.raises(ConfigError):
        ablation_sweep(small_resnet, data[0], data[1], TrainConfig(epochs=1))


def test_sweep_of_one_equals_train(data):
    cfg = TrainConfig(epochs=1, batch_size=32)
    rows = ablation_sweep(small_resnet, data[0], data[1], cfg, epsilons=[0.05])
    m, _ = train(small_resnet(), data[0], TrainConfig(epochs=1, batch_size=32, epsilon=0.05), data[1])
    assert rows[0]["val_error"] == evaluate(m, data[1])[0]
    assert sweep_csv(rows).splitlines()[0] == ",".join(SWEEP_COLUMNS)
