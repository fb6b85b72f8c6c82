import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pbnet import PBNetSegmenter
from pbnet.data import generate_phantoms
from pbnet.exceptions import ConfigError, ShapeError


@pytest.fixture(scope="module")
def phantoms():
    ph = generate_phantoms(4, 64, seed=0)
    return np.stack([p.image for p in ph]), np.stack([p.mask for p in ph])


@pytest.fixture(scope="module")
def fitted(phantoms):
    X, y = phantoms
    return PBNetSegmenter(backbone="tiny-test", epochs=2, batch_size=4, augment=False).fit(X, y)


def test_get_params_and_clone():
    est = PBNetSegmenter(backbone="tiny-test", epochs=3)
    params = est.get_params()
    assert params["backbone"] == "tiny-test" and params["epochs"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est


def test_set_params():
    est = PBNetSegmenter().set_params(lr=0.01, mgpm=False)
    assert est.lr == 0.01 and est.mgpm is False


def test_predict_shapes(fitted, phantoms):
    X, y = phantoms
    proba = fitted.predict_proba(X)
    assert proba.shape == (4, 64, 64) and proba.dtype == np.float32
    assert ((proba > 0) & (proba < 1)).all()
    pred = fitted.predict(X)
    assert pred.dtype == np.uint8 and set(np.unique(pred)) <= {0, 1}
    assert 0 <= fitted.score(X, y) <= 1


def test_accepts_channel_first_and_gray(fitted, phantoms):
    X, _ = phantoms
    a = fitted.predict_proba(X)
    b = fitted.predict_proba(X.transpose(0, 3, 1, 2))
    c = fitted.predict_proba(X[..., 0])
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, c)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        PBNetSegmenter().predict(np.zeros((1, 64, 64)))


def test_input_validation(phantoms):
    X, y = phantoms
    est = PBNetSegmenter(backbone="tiny-test", epochs=1)
    with pytest.raises(ShapeError):
        est.fit(X[:, :50], y[:, :50])
    with pytest.raises(ShapeError):
        est.fit(X, y[:2])
    with pytest.raises(ConfigError):
        PBNetSegmenter(backbone="tiny-test", bgm=False, boundary_loss=True, epochs=1).fit(X, y)


def test_save_load(fitted, phantoms, tmp_path):
    X, _ = phantoms
    fitted.save(tmp_path / "est.pt")
    loaded = PBNetSegmenter.load(tmp_path / "est.pt")
    assert loaded.get_params() == fitted.get_params()
    np.testing.assert_array_equal(loaded.predict_proba(X), fitted.predict_proba(X))
