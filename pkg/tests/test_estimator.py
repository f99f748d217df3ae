import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from nv3d import apsp, net, taskgen
from nv3d import train as tr
from nv3d.estimator import InContextEstimator, check_context, check_volumes


@pytest.fixture(scope="module")
def ckpt():
    cfg = tr.TrainConfig(side=8, stages=2, base_channels=2, dtype="f64", tasks="segmentation")
    return tr.Checkpoint(cfg, net.init_params(cfg.net_config(), 1, np.float64))


@pytest.fixture(scope="module")
def data():
    target, ctx = taskgen.sample_episode("segmentation", 4, 3, side=8)
    X = np.stack([p.image[0] for p in ctx])
    y = np.stack([p.label[0] for p in ctx])
    return X, y, target


class TestValidation:
    def test_adds_channel(self):
        assert check_volumes(np.zeros((2, 4, 4, 4))).shape == (2, 1, 4, 4, 4)

    @pytest.mark.parametrize("shape", [(4, 4, 4), (2, 2, 4, 4, 4), (2, 4, 4, 5)])
    def test_rejects_shapes(self, shape):
        with pytest.raises(ValueError):
            check_volumes(np.zeros(shape))

    def test_rejects_nan(self):
        x = np.zeros((1, 4, 4, 4))
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            check_volumes(x)

    def test_context_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            check_context(np.zeros((2, 4, 4, 4)), np.zeros((3, 4, 4, 4)))

    def test_side(self):
        with pytest.raises(ValueError, match="side"):
            check_volumes(np.zeros((1, 4, 4, 4)), side=8)


class TestEstimator:
    def test_params_and_clone(self, ckpt):
        est = InContextEstimator(ckpt, mini_context=2, dtype="f64")
        params = est.get_params()
        assert params["mini_context"] == 2 and params["task"] == "segmentation"
        assert clone(est).get_params()["mini_context"] == 2

    def test_not_fitted(self, ckpt, data):
        with pytest.raises(NotFittedError):
            InContextEstimator(ckpt).predict(data[0])

    def test_matches_apsp_forward(self, ckpt, data):
        X, y, target = data
        est = InContextEstimator(ckpt, mini_context=1, dtype="f64").fit(X, y)
        assert est.n_context_ == 4
        raw = est.decision_function(target.image)
        ref = apsp.apsp_forward(target.image, est.context_, 4, ckpt.params, ckpt.net_config).data
        assert np.max(np.abs(raw - ref)) < 1e-10
        pred = est.predict(target.image[None])
        assert pred.shape == (1, 8, 8, 8) and set(np.unique(pred)) <= {0.0, 1.0}

    def test_mini_context_does_not_change_output(self, ckpt, data):
        X, y, target = data
        outs = [InContextEstimator(ckpt, mini_context=m, dtype="f64").fit(X, y).decision_function(target.image)
                for m in (1, 3)]
        assert np.max(np.abs(outs[0] - outs[1])) < 1e-10

    def test_score(self, ckpt, data):
        X, y, target = data
        s = InContextEstimator(ckpt, dtype="f64").fit(X, y).score(target.image, target.label)
        assert 0.0 <= s <= 1.0

    def test_generation_clips(self, ckpt, data):
        X, y, target = data
        pred = InContextEstimator(ckpt, task="inpainting", dtype="f64").fit(X, y).predict(target.image)
        assert pred.min() >= 0 and pred.max() <= 1

    @pytest.mark.parametrize("kw", [{"task": "teleport"}, {"mini_context": 0}, {"checkpoint": None}])
    def test_bad_params(self, ckpt, data, kw):
        est = InContextEstimator(**({"checkpoint": ckpt} | kw))
        with pytest.raises(ValueError):
            est.fit(*data[:2])

    def test_loads_path(self, ckpt, data, tmp_path):
        tr.save_checkpoint(tmp_path / "m.nv3d", ckpt)
        est = InContextEstimator(str(tmp_path / "m.nv3d")).fit(*data[:2])
        assert est.model_.params["head.w"].dtype == np.float32
