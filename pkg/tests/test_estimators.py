import numpy as np
import pytest
from sklearn.base import clone

from pfcm.dataset import SyntheticSpec, generate_synthetic, bin_hamd
from pfcm.estimators import (DeltaAgglomerativeClustering, FedAvgClassifier, MatrixPreprocessor,
                             PFCMClassifier)

SMALL = dict(conv1_channels=2, conv2_channels=3, fc_hidden=5, rounds=3)


def _raw(num_clients=9, seed=0):
    data = generate_synthetic(SyntheticSpec(num_clients=num_clients, seed=seed))
    X = np.array([r.features for r in data.records])
    y = np.array([bin_hamd(r.hamd_score) for r in data.records])
    g = np.array([r.subject_id for r in data.records])
    return X, y, g


def test_preprocessor_shapes_and_range():
    X, _, _ = _raw()
    out = MatrixPreprocessor().fit_transform(X)
    assert out.shape == (len(X), 1, 9, 9)
    assert out.min() >= 0 and out.max() <= 1
    assert np.all(out[:, 0, 8, 8] == 0)


def test_preprocessor_rejects_wrong_width():
    with pytest.raises(ValueError):
        MatrixPreprocessor().fit(np.zeros((3, 79)))
    pre = MatrixPreprocessor().fit(np.random.default_rng(0).random((4, 80)))
    with pytest.raises(ValueError):
        pre.transform(np.zeros((2, 81)))


def test_fedavg_classifier_fits_and_predicts():
    X, y, g = _raw()
    imgs = MatrixPreprocessor().fit_transform(X)
    clf = FedAvgClassifier(**SMALL).fit(imgs, y, g)
    pred = clf.predict(imgs)
    assert pred.shape == y.shape and set(pred) <= {0, 1, 2}
    assert len(clf.history_) == 3
    assert 0 <= clf.score(imgs, y) <= 1


def test_fedavg_classifier_is_seeded():
    X, y, g = _raw()
    imgs = MatrixPreprocessor().fit_transform(X)
    a = FedAvgClassifier(**SMALL).fit(imgs, y, g).weights_
    b = FedAvgClassifier(**SMALL).fit(imgs, y, g).weights_
    assert a.values.tobytes() == b.values.tobytes()


def test_pfcm_classifier_end_to_end():
    X, y, g = _raw(12)
    imgs = MatrixPreprocessor().fit_transform(X)
    train = np.isin(g, np.unique(g)[:9])
    clf = PFCMClassifier(cluster_rounds=2, cut="k=2", **SMALL).fit(imgs[train], y[train], g[train])
    assert len(clf.clusters_) == 2
    assert set(clf.assignment_) == set(np.unique(g[train]))
    routed = clf.register(imgs[~train], y[~train], g[~train])
    assert set(routed) == set(np.unique(g[~train])) and set(routed.values()) <= {0, 1}
    acc = clf.score(imgs[~train], y[~train], g[~train])
    assert 0 <= acc <= 1


def test_pfcm_unknown_client_uses_global_model():
    X, y, g = _raw()
    imgs = MatrixPreprocessor().fit_transform(X)
    clf = PFCMClassifier(cluster_rounds=1, cut="k=1", **SMALL).fit(imgs, y, g)
    from pfcm import nn_core
    expected = nn_core.predict(clf.global_weights_, clf.spec_, imgs[:3])
    assert np.array_equal(clf.predict(imgs[:3], ["new"] * 3), expected)


def test_labels_out_of_range_rejected():
    X, y, g = _raw()
    imgs = MatrixPreprocessor().fit_transform(X)
    with pytest.raises(ValueError):
        FedAvgClassifier(n_classes=2, **SMALL).fit(imgs, y * 0 + 2, g)


def test_get_params_and_clone():
    clf = PFCMClassifier(rounds=7, cut="k=3")
    params = clf.get_params()
    assert params["rounds"] == 7 and params["cut"] == "k=3"
    twin = clone(clf)
    assert twin.get_params() == params and twin is not clf
    assert clone(DeltaAgglomerativeClustering(linkage="single")).linkage == "single"


def test_delta_clustering_recovers_directions():
    rng = np.random.default_rng(0)
    centers = rng.normal(size=(3, 20))
    X = np.repeat(centers, 5, axis=0) + 0.01 * rng.normal(size=(15, 20))
    est = DeltaAgglomerativeClustering().fit(X)
    assert est.n_clusters_ == 3
    assert len(est.dendrogram_.merges) == 14
    labels = est.fit_predict(X)
    for block in range(3):
        assert len(set(labels[5 * block:5 * block + 5])) == 1
