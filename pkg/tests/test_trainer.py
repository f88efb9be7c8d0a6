import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnmil.errors import TrainingError
from attnmil.net import MilClassifier, MilRegressor, forward
from attnmil.store import EmbeddingBag, LabelSet
from attnmil.trainer import (
    AdamW,
    TrainConfig,
    bag_loss,
    class_weights,
    fit_bins,
    hinge_loss,
    train_bags,
    wmse_loss,
)


def test_hinge_examples():
    loss, g = hinge_loss([3.0, 1.0], 0)
    assert loss == 0.0 and not g.any()
    loss, g = hinge_loss([0.5, 0.0], 0)
    assert loss == 0.5 and g.tolist() == [-1.0, 1.0]
    loss, g = hinge_loss([0.0, 1.0], 1, class_weight=2.0)  # margin exactly 1
    assert loss == 0.0 and not g.any()
    assert hinge_loss([0.0, 0.0], 1, class_weight=3.0)[0] == 3.0


@settings(max_examples=100, deadline=None)
@given(
    a=st.floats(-5, 5),
    b=st.floats(-5, 5),
    label=st.integers(0, 1),
    w=st.floats(0.1, 4),
)
def test_hinge_gradient_finite_difference(a, b, label, w):
    s = np.array([a, b])
    margin = s[label] - s[1 - label]
    eps = 1e-6
    if abs(margin - 1) < 4 * eps:
        return  # kink
    _, g = hinge_loss(s, label, w)
    for i in range(2):
        d = np.zeros(2)
        d[i] = eps
        num = (hinge_loss(s + d, label, w)[0] - hinge_loss(s - d, label, w)[0]) / (2 * eps)
        assert abs(num - g[i]) < 1e-6 * max(1, w)


def test_class_weight_examples():
    w = class_weights([0] * 2786 + [1] * 599)
    # 3385/1198 = 2.825543..., quoted to four places as 2.8256
    np.testing.assert_allclose(w, [0.6075, 2.8256], atol=1e-4)
    np.testing.assert_allclose(w, [3385 / 5572, 3385 / 1198], rtol=1e-15)
    np.testing.assert_allclose(class_weights([0] * 9 + [1]), [5 / 9, 5.0], rtol=1e-15)
    assert class_weights([0, 1, 1, 0]).tolist() == [1.0, 1.0]
    with pytest.raises(TrainingError):
        class_weights([1, 1, 1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=2, max_size=200).filter(lambda l: 0 < sum(l) < len(l)))
def test_class_weights_have_unit_sample_mean(labels):
    w = class_weights(labels)
    assert abs(np.mean(w[labels]) - 1.0) < 1e-9


def test_fit_bins_uniform_targets_all_weight_one():
    bw = fit_bins(np.arange(10) + 0.5, 10)
    assert np.allclose(bw.weights, 1.0)
    assert bw.edges[0] == 0.5 and bw.edges[-1] == 9.5
    assert bw.bin_of(9.5) == 9  # rightmost edge inclusive


def test_fit_bins_inverse_count_ratio():
    t = [0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 10.0]
    bw = fit_bins(t, 10)
    assert bw.counts.tolist() == [9, 0, 0, 0, 0, 0, 0, 0, 0, 1]
    assert bw.weights[9] / bw.weights[0] == pytest.approx(9.0, rel=1e-12)
    assert bw.weights[1] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=80).filter(lambda l: max(l) > min(l)), st.integers(2, 12))
def test_fit_bins_normalized(targets, bins):
    bw = fit_bins(targets, bins)
    assert abs(np.mean([bw.weight(t) for t in targets]) - 1.0) < 1e-9
    assert (bw.weights[bw.counts > 0] > 0).all()


def test_fit_bins_rejects_constant_and_clamps_out_of_range():
    with pytest.raises(TrainingError):
        fit_bins([1.0, 1.0], 10)
    bw = fit_bins([0.0, 1.0, 2.0], 2)
    assert bw.bin_of(-5.0) == 0 and bw.bin_of(50.0) == 1


def test_wmse_examples():
    class Two:
        def weight(self, _):
            return 2.0

    assert wmse_loss(3.5, 2.0, Two()) == (4.5, 6.0)
    assert wmse_loss(1.0, 1.0, Two())[0] == 0.0
    bw = fit_bins(np.arange(10.0), 10)
    for t in np.arange(10.0):
        assert wmse_loss(t + 0.3, t, bw) == wmse_loss(t + 0.3, t, None)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(loss="huber")
    with pytest.raises(ValueError):
        TrainConfig(loss="wmse", bins=1)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)


# -- training loop ---------------------------------------------------------------


def _toy_bags(n, seed, regression=False):
    rng = np.random.default_rng(seed)
    bags = []
    for i in range(n):
        y = i % 2
        x = rng.standard_normal((6, 4))
        x[0, :2] += 3.0 * y
        labels = LabelSet(t_max=float(99 + y + rng.normal(0, 0.1))) if regression else LabelSet(mir_binary=y)
        bags.append(EmbeddingBag(f"b{seed}_{i:03d}", np.stack([np.arange(6), np.zeros(6, int)], 1), x.astype(np.float32), labels))
    return bags


SMALL = dict(hidden=8, attention_dim=4)


def test_zero_lr_keeps_parameters_and_loss():
    cfg = TrainConfig(learning_rate=0.0, max_epochs=3, patience=5, **SMALL)
    res = train_bags(_toy_bags(8, 0), _toy_bags(4, 1), "mir", cfg)
    assert res.model.equals(MilClassifier.init(4, 8, 4, cfg.seed))
    losses = [r.train_loss for r in res.log]
    assert losses[0] == losses[1] == losses[2]


def test_training_is_deterministic():
    cfg = TrainConfig(learning_rate=1e-3, max_epochs=4, seed=3, **SMALL)
    a = train_bags(_toy_bags(10, 0), _toy_bags(4, 1), "mir", cfg)
    b = train_bags(_toy_bags(10, 0), _toy_bags(4, 1), "mir", cfg)
    assert a.log_csv() == b.log_csv()
    assert a.model.equals(b.model)


def test_log_format_and_single_selected_epoch():
    cfg = TrainConfig(learning_rate=1e-3, max_epochs=5, patience=2, **SMALL)
    res = train_bags(_toy_bags(10, 0), _toy_bags(4, 1), "mir", cfg)
    lines = res.log_csv().splitlines()
    assert lines[0] == "epoch,train_loss,val_metric,selected"
    assert sum(r.selected for r in res.log) == 1
    assert res.log[res.best_epoch - 1].selected


def test_early_stop_respects_patience():
    cfg = TrainConfig(learning_rate=0.0, max_epochs=50, patience=3, **SMALL)
    res = train_bags(_toy_bags(6, 0), _toy_bags(4, 1), "mir", cfg)
    assert len(res.log) == 4 and res.best_epoch == 1


@pytest.mark.parametrize("loss", ["mse", "wmse"])
def test_regression_loop_reduces_rmse(loss):
    cfg = TrainConfig(learning_rate=3e-3, max_epochs=6, loss=loss, **SMALL)
    res = train_bags(_toy_bags(20, 0, True), _toy_bags(6, 1, True), "tmax", cfg)
    assert isinstance(res.model, MilRegressor)
    assert min(r.val_metric for r in res.log) <= res.log[0].val_metric


def test_missing_label_and_mismatched_loss():
    with pytest.raises(TrainingError):
        train_bags(_toy_bags(4, 0), _toy_bags(2, 1), "wbc", TrainConfig(loss="mse", **SMALL))
    with pytest.raises(ValueError):
        train_bags(_toy_bags(4, 0), _toy_bags(2, 1), "mir", TrainConfig(loss="mse", **SMALL))


def test_class_weighting_is_identity_on_balanced_data():
    bags = _toy_bags(8, 0)
    base = TrainConfig(learning_rate=1e-3, max_epochs=2, **SMALL)
    weighted = TrainConfig(learning_rate=1e-3, max_epochs=2, class_weighting=True, **SMALL)
    a = train_bags(bags, _toy_bags(4, 1), "mir", base)
    b = train_bags(bags, _toy_bags(4, 1), "mir", weighted)
    assert a.log_csv() == b.log_csv()


def test_single_step_descent():
    fails = 0
    for case in range(100):
        rng = np.random.default_rng(case)
        regress = case % 2 == 1
        cls = MilRegressor if regress else MilClassifier
        model = cls.init(4, 8, 4, seed=case)
        x = rng.standard_normal((int(rng.integers(1, 12)), 4))
        y = float(rng.normal()) if regress else int(rng.integers(0, 2))
        cfg = TrainConfig(loss="mse" if regress else "hinge", **SMALL)
        before, grads = bag_loss(model, x, y, cfg, None)
        if before == 0.0:
            continue
        AdamW(model, lr=1e-5, weight_decay=0.0).step(model, grads)
        after, _ = bag_loss(model, x, y, cfg, None)
        fails += after > before
    assert fails <= 2


def test_adamw_decoupled_decay_on_zero_gradient():
    m = MilRegressor.init(2, 2, 2, seed=1)
    before = m.W_proj.astype(np.float64).copy()
    AdamW(m, lr=0.1, weight_decay=0.5).step(m, m.zeros_like())
    np.testing.assert_allclose(m.W_proj, (before * (1 - 0.05)).astype(np.float32), rtol=1e-6)


def test_regression_head_starts_at_target_mean():
    bags = _toy_bags(6, 0, True)
    cfg = TrainConfig(learning_rate=0.0, max_epochs=1, loss="mse", **SMALL)
    res = train_bags(bags, _toy_bags(2, 1, True), "tmax", cfg)
    assert res.model.head_b[0] == np.float32(np.mean([b.labels.t_max for b in bags]))
    assert math.isfinite(float(forward(res.model, bags[0]).out[0]))
