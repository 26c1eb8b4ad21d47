import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sparsefusion.config import RunConfig
from sparsefusion.estimator import SparseFusionReconstructor
from sparsefusion.pipeline import synthetic_inputs
from sparsefusion.synthetic import DEFAULT_FRAGMENT_ORIGIN, default_scene

ORIGIN = " ".join(map(str, DEFAULT_FRAGMENT_ORIGIN))


@pytest.fixture(scope="module")
def frames():
    kfs, priors, gts = synthetic_inputs(default_scene(), RunConfig())
    return list(zip(kfs, priors)), gts


@pytest.fixture(scope="module")
def fitted(frames):
    return SparseFusionReconstructor(fragment_origin=ORIGIN).fit(frames[0])


def test_params_and_clone():
    est = SparseFusionReconstructor(s=1.5, seed=3)
    params = est.get_params()
    assert params["s"] == 1.5 and params["seed"] == 3 and params["feature_source"] is None
    twin = clone(est)
    assert twin.get_params() == params and not hasattr(twin, "volumes_")
    assert est.set_params(s=2.5).s == 2.5


def test_unfitted_raises(frames):
    est = SparseFusionReconstructor()
    with pytest.raises(NotFittedError):
        est.predict([frames[0][0][0]])
    with pytest.raises(NotFittedError):
        est.transform(np.zeros((1, 3)))


def test_fit_builds_volumes_and_mesh(fitted):
    assert len(fitted.volumes_) == 3 and len(fitted.fragments_) == 1
    assert len(fitted.mesh.faces) > 0
    red = fitted.reductions_
    assert len(red) == 3 and all(r > 0 for r in red)


def test_predict_close_to_truth(fitted, frames):
    kfs = [kf for kf, _ in frames[0][:3]]
    pred = fitted.predict(kfs)
    assert pred.shape == (3, 120, 160)
    gt = np.stack([g.depth for g in frames[1][:3]])
    both = (pred > 0) & (gt > 0)
    assert np.median(np.abs(pred[both] - gt[both])) < 0.04


def test_transform_sign_on_sphere(fitted):
    vals = fitted.transform([[0.0, 0.0, 1.0], [0.0, 0.0, 0.8 + 0.85]])
    assert vals[0] < 0 or np.isnan(vals[0])
    far = fitted.transform([[50.0, 50.0, 50.0]])
    assert np.isnan(far[0])
    with pytest.raises(ValueError):
        fitted.transform(np.zeros((2, 2)))


def test_score_against_own_mesh(fitted):
    assert fitted.score(fitted.mesh) == 1.0
    assert 0.0 <= fitted.score(np.array([[10.0, 10.0, 10.0]])) <= 1.0


def test_partial_fit_accumulates(frames):
    est = SparseFusionReconstructor(fragment_origin=ORIGIN)
    est.partial_fit(frames[0])
    n = len(est.volumes_[-1])
    est.partial_fit(frames[0])
    assert len(est.fragments_) == 2 and len(est.volumes_[-1]) >= n
    with pytest.raises(ValueError):
        est.partial_fit(frames[0][:4])


def test_fit_input_validation(frames):
    est = SparseFusionReconstructor()
    with pytest.raises(ValueError):
        est.fit([])
    with pytest.raises(TypeError):
        est.fit([(frames[0][0][0], np.zeros((120, 160)))])
    with pytest.raises(ValueError):
        est.fit([1, 2])
