import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from triplet_watershed import TripletWatershed, make_synthetic
from triplet_watershed.data import split


@pytest.fixture(scope="module")
def problem():
    ds = make_synthetic(20, 20, 5, 3, 0.3, rng=0, unlabeled_frac=0.05)
    sp = split(ds.labels, fraction=0.2, rng=0)
    return ds, sp, sp.training_target(ds.labels)


def quick(**kw):
    base = dict(patch_size=3, epochs=3, hidden=(16,), embed_dim=8, n_estimators=5)
    base.update(kw)
    return TripletWatershed(**base)


def test_params_and_clone():
    est = quick(alpha=0.3)
    assert est.get_params()["alpha"] == 0.3
    c = clone(est)
    assert c.get_params() == est.get_params()
    est.set_params(epochs=7)
    assert est.epochs == 7


def test_fit_predict_transform(problem):
    ds, sp, y = problem
    est = quick().fit(ds.cube, y)
    assert len(est.history_) == 3
    pred = est.predict(ds.cube)
    assert pred.shape == ds.labels.shape
    np.testing.assert_array_equal(pred == 0, ds.labels == 0)
    assert set(np.unique(pred[pred > 0])) <= {1, 2, 3}
    # ensemble members see only part of the seeds; the single watershed keeps them all
    single = est.predict_single(ds.cube)
    np.testing.assert_array_equal(single[sp.train], ds.labels[sp.train])
    assert est.transform(ds.cube).shape == (20, 20, 8)
    labels, votes, es = est.predict_votes(ds.cube)
    assert votes.shape == (es.n_vertices, 3) and np.all(votes.sum(1) == 5)
    assert 0 <= est.score(ds.cube, np.where(sp.test, ds.labels, 0)) <= 1
    np.testing.assert_array_equal(est.predict(ds.cube, y), pred)


def test_same_seed_same_model(problem):
    ds, _, y = problem
    a = quick(random_state=3).fit(ds.cube, y)
    b = quick(random_state=3).fit(ds.cube, y)
    np.testing.assert_array_equal(a.model_.params, b.model_.params)


def test_save_load(problem, tmp_path):
    ds, _, y = problem
    est = quick().fit(ds.cube, y)
    est.save(tmp_path / "m.twnet", {"note": 1})
    back = TripletWatershed.load(tmp_path / "m.twnet")
    assert back.get_params() == est.get_params()  # n_jobs defaults match
    np.testing.assert_array_equal(back.transform(ds.cube), est.transform(ds.cube))
    np.testing.assert_array_equal(back.predict(ds.cube, y), est.predict(ds.cube))


def test_warm_start_continues(problem):
    ds, _, y = problem
    est = quick(warm_start=True).fit(ds.cube, y)
    first = est.n_iter_
    est.fit(ds.cube, y)
    assert est.n_iter_ == 2 * first


def test_conv_arch(problem):
    ds, _, y = problem
    est = quick(arch="conv", conv_channels=(4, 6, 4), epochs=1).fit(ds.cube, y)
    assert est.predict(ds.cube).shape == (20, 20)


def test_errors(problem):
    ds, _, y = problem
    with pytest.raises(NotFittedError):
        quick().predict(ds.cube)
    with pytest.raises(ValueError):
        quick(patch_size=4).fit(ds.cube, y)
    with pytest.raises(ValueError):
        quick(arch="rnn").fit(ds.cube, y)
    with pytest.raises(ValueError):
        quick().fit(ds.cube, np.where(y > 0, 1, y))
    with pytest.raises(ValueError):
        quick().fit(ds.cube, y[:5])
    bad = ds.cube.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        quick().fit(bad, y)
    est = quick(epochs=1).fit(ds.cube, y)
    with pytest.raises(ValueError):
        est.predict(ds.cube[..., :4])
    with pytest.raises(ValueError, match="not seen"):
        est.predict(ds.cube, np.where(y > 0, 4, y))
