import numpy as np
import pytest
from conftest import tiny_config
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from beamfed.data import generate_dataset, ul_features
from beamfed.estimators import ChannelFeaturizer, FederatedBeamClassifier


@pytest.fixture(scope="module")
def channels():
    ds, _ = generate_dataset(tiny_config(), 0)
    s = ds.samples
    return s.h_ul, s.label, s.client_id, ds.num_beams


def _small(**kw):
    base = dict(num_clusters=2, max_rounds=3, local_bs=16, conv_filters=(2, 2), hidden_units=(8, 8),
                n_classes=8, random_state=0)
    base.update(kw)
    return FederatedBeamClassifier(**base)


def test_featurizer_matches_function(channels):
    h = channels[0]
    f = ChannelFeaturizer().fit(h)
    np.testing.assert_array_equal(f.transform(h), ul_features(h))
    assert (f.n_subcarriers_, f.n_antennas_) == h.shape[1:]
    with pytest.raises(ValueError):
        f.transform(h[:, :2])
    with pytest.raises(ValueError):
        ChannelFeaturizer().fit(h.real)
    with pytest.raises(NotFittedError):
        ChannelFeaturizer().transform(h)


def test_params_round_trip_through_clone():
    est = _small(personalization="moe", epsilon=0.4)
    again = clone(est)
    assert again.get_params() == est.get_params()


@pytest.mark.parametrize("personalization", ["none", "finetune", "moe"])
def test_fit_predict(channels, personalization):
    h, y, ids, b = channels
    est = _small(personalization=personalization).fit(h, y, ids)
    proba = est.predict_proba(h, ids)
    assert proba.shape == (len(y), b)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)
    pred = est.predict(h, ids)
    assert set(pred) <= set(range(b))
    assert 0.0 <= est.score(h, y, ids) <= 1.0
    assert len(est.models_) == len(np.unique(ids))


def test_fit_is_deterministic_and_accepts_features(channels):
    h, y, ids, _ = channels
    a = _small().fit(h, y, ids).predict_proba(h, ids)
    b = _small().fit(ul_features(h), y, ids).predict_proba(ul_features(h), ids)
    np.testing.assert_array_equal(a, b)


def test_pipeline_with_single_client(channels):
    h, y, _, _ = channels
    pipe = make_pipeline(ChannelFeaturizer(), _small(num_clusters=1))
    pipe.fit(h, y)
    assert pipe.predict(h).shape == y.shape


def test_input_errors(channels):
    h, y, ids, _ = channels
    with pytest.raises(ValueError):
        _small(personalization="bogus").fit(h, y, ids)
    with pytest.raises(ValueError):
        _small().fit(h, y, ids[:-1])
    with pytest.raises(ValueError):
        _small(n_classes=2).fit(h, y, ids)
    est = _small().fit(h, y, ids)
    with pytest.raises(ValueError):
        est.predict(h, np.full(len(y), 99))
    with pytest.raises(ValueError):
        est.predict(h)
