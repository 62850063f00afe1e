import numpy as np
import pytest

from eventprop.config import RunConfig
from eventprop.core import LayerParams, init_weights
from eventprop.loss import LossConfig
from eventprop.optim import combine
from eventprop.reference import ReferenceEngine


@pytest.fixture(scope="module")
def engine():
    return ReferenceEngine(LayerParams(), LossConfig())


def weights_for(seed, dims=(5, 40, 3)):
    rng = np.random.default_rng(seed)
    return [init_weights(5, dims[1], 3.2, 3.2, rng), init_weights(dims[1], 3, 5.2, 2.8, rng)]


def test_batch_gradient_is_fixed_order_sum(engine, small_data):
    X, y = small_data
    w = weights_for(1)
    results, grads = engine.run_batch(w, X[:22], y[:22])
    manual = [g.copy() for g in results[0].grads]
    for r in results[1:]:
        for acc, g in zip(manual, r.grads):
            acc += g
    for a, b in zip(grads, manual):
        np.testing.assert_array_equal(a, b)


def test_forward_only_has_no_gradients(engine, small_data):
    X, y = small_data
    r = engine.run_sample(weights_for(2), X[0], int(y[0]), backward=False)
    assert r.grads == [] and len(r.v_traces) == 2


def test_traces_have_initial_row_plus_T(engine, small_data):
    X, y = small_data
    r = engine.run_sample(weights_for(2), X[0], int(y[0]))
    assert all(v.shape == (29, n) for v, n in zip(r.v_traces, (40, 3)))
    assert all(not v[0].any() for v in r.v_traces)
    assert all(not lam[-1].any() for lam in r.lam_traces)


def test_oracle_labels_give_full_accuracy(engine, small_data):
    X, _ = small_data
    w = weights_for(3)
    preds = np.array([engine.run_sample(w, x, 0, backward=False).prediction for x in X])
    keep = preds >= 0
    acc, _, _ = engine.evaluate(w, X[keep], preds[keep])
    assert acc == 1.0


def test_untrained_accuracy_is_chance_on_average():
    # errors of one untrained net are correlated across samples, so the
    # statistic is the mean over independent initialisations
    from eventprop import trainer
    cfg = RunConfig(n_test=600)
    _, (X, y) = trainer.load_datasets(cfg)
    engine = ReferenceEngine(cfg.layer_params(), cfg.loss_config())
    accs = []
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        w = [init_weights(5, 120, 3.2, 3.2, rng), init_weights(120, 3, 5.2, 2.8, rng)]
        accs.append(engine.evaluate(w, X, y)[0])
    se = np.std(accs, ddof=1) / np.sqrt(len(accs))
    assert abs(np.mean(accs) - 1 / 3) < 5 * se


def test_mean_reduction(engine, small_data):
    X, y = small_data
    results, grads = engine.run_batch(weights_for(4), X[:5], y[:5], "mean")
    expected = combine([r.grads for r in results], "mean")
    for a, b in zip(grads, expected):
        np.testing.assert_array_equal(a, b)
