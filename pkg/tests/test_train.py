import numpy as np
import pytest

from hqp.data import load_dataset
from hqp.errors import TrainingDivergedError
from hqp.graph import build_mini_convnet
from hqp.train import train_baseline


@pytest.fixture(scope="module")
def tiny():
    return load_dataset(seed=5, sizes={"train": 400, "calib": 10, "val": 10, "holdout": 200})


class TestTrainBaseline:
    def test_zero_lr_keeps_weights(self, tiny):
        model = build_mini_convnet(0.25, seed=0)
        trained, _ = train_baseline(model, tiny.train, epochs=1, lr=0.0, holdout=tiny.holdout)
        for a, b in zip(model.layers, trained.layers):
            for k in ("weight", "bias", "gamma", "beta"):
                if k in a.params:
                    np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_loss_decreases(self, tiny):
        losses = []
        train_baseline(build_mini_convnet(0.25, seed=0), tiny.train, epochs=3, lr=0.01,
                       on_epoch=lambda e, l: losses.append(l))
        assert len(losses) == 3 and losses[-1] < losses[0]

    def test_same_seed_same_weights(self, tiny):
        a, acc_a = train_baseline(build_mini_convnet(0.25, seed=0), tiny.train, 1, 0.05, seed=3,
                                  holdout=tiny.holdout)
        b, acc_b = train_baseline(build_mini_convnet(0.25, seed=0), tiny.train, 1, 0.05, seed=3,
                                  holdout=tiny.holdout)
        assert a == b and acc_a == acc_b

    def test_returns_holdout_accuracy(self, tiny):
        model, acc = train_baseline(build_mini_convnet(0.25), tiny.train, 1, 0.05,
                                    holdout=tiny.holdout)
        assert 0.0 <= acc <= 1.0 and model.baseline_accuracy == acc
        _, none = train_baseline(build_mini_convnet(0.25), tiny.train, 1, 0.05)
        assert none is None

    def test_input_model_untouched(self, tiny):
        model = build_mini_convnet(0.25)
        before = model.copy()
        train_baseline(model, tiny.train, 1, 0.05)
        assert model == before

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_epoch(self, tiny):
        model = build_mini_convnet(0.25)
        model.layers[-1].params["weight"][0, 0] = np.inf
        with pytest.raises(TrainingDivergedError) as err:
            train_baseline(model, tiny.train, epochs=2, lr=0.05)
        assert err.value.epoch == 0
