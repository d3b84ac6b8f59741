import math

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import logsumexp

from aewin.data import CLASS_NAMES, synthetic_batch, synthetic_example
from aewin.train import DivergenceError, evaluate, train_toy


class TestData:
    def test_pure_in_seed_and_index(self):
        a, la = synthetic_example(5, 7)
        b, lb = synthetic_example(5, 7)
        assert a.tobytes() == b.tobytes() and la == lb
        c, _ = synthetic_example(6, 7)
        assert a.tobytes() != c.tobytes()

    def test_labels_cycle(self):
        _, labels = synthetic_batch(0, range(9))
        assert labels.tolist() == [0, 1, 2] * 3
        assert len(CLASS_NAMES) == 3

    def test_shape(self):
        img, _ = synthetic_example(0, 0, size=16)
        assert img.shape == (16, 16, 3)

    @pytest.mark.parametrize("index", range(6))
    def test_noise_free_structure(self, index):
        img, label = synthetic_example(1, index, noise=0.0)
        g = img[..., 0]
        assert set(np.unique(g)) <= {0.0, 1.0}
        if label == 0:
            assert (g == g[:, :1]).all() and not (g == g[:1, :]).all()
        elif label == 1:
            assert (g == g[:1, :]).all() and not (g == g[:, :1]).all()
        else:
            # constant on 8x8 blocks (patch 4 times window 2), alternating
            blocks = g.reshape(32, 32)
            assert not (g == g[:, :1]).all() and not (g == g[:1, :]).all()
            shifted = np.roll(np.roll(blocks, 8, axis=0), 8, axis=1)
            assert (shifted == blocks).all()

    def test_noise_level(self):
        img, _ = synthetic_example(2, 0, noise=0.3)
        clean, _ = synthetic_example(2, 0, noise=0.0)
        assert np.std(img - clean) == pytest.approx(0.3, rel=0.05)


def pooled_logistic_accuracy(images, labels):
    """Multinomial logistic regression on per-channel spatial means."""
    x = np.concatenate([images.mean(axis=(1, 2)), np.ones((len(labels), 1))], axis=1)
    k = 3

    def loss(w):
        z = x @ w.reshape(x.shape[1], k)
        return np.mean(logsumexp(z, axis=1) - z[np.arange(len(labels)), labels])

    w = minimize(loss, np.zeros(x.shape[1] * k), method="L-BFGS-B").x
    return float(((x @ w.reshape(x.shape[1], k)).argmax(axis=1) == labels).mean())


def test_pooled_baseline_is_weak():
    images, labels = synthetic_batch(0, range(96))
    assert pooled_logistic_accuracy(images, labels) < 0.9


class TestTrain:
    def test_zero_steps_loss_near_uniform(self, toy_spec):
        result = train_toy(toy_spec, seed=0, steps=0, train_size=24)
        assert abs(result.initial_loss - math.log(3)) < 0.1
        assert result.history == []

    def test_repeatable(self, toy_spec):
        a = train_toy(toy_spec, seed=3, steps=3, batch_size=4, train_size=12)
        b = train_toy(toy_spec, seed=3, steps=3, batch_size=4, train_size=12)
        assert [s.loss for s in a.history] == [s.loss for s in b.history]
        assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)

    def test_divergence_reported(self, toy_spec):
        with pytest.raises(DivergenceError):
            train_toy(toy_spec, seed=0, steps=20, lr=1e12, batch_size=4, train_size=12)

    def test_evaluate_matches_history_shape(self, toy_spec):
        result = train_toy(toy_spec, seed=0, steps=2, batch_size=4, train_size=12)
        images, labels = synthetic_batch(0, range(12))
        loss, acc = evaluate(result.params, toy_spec, images, labels)
        assert loss == pytest.approx(result.final_loss) and acc == result.final_accuracy
