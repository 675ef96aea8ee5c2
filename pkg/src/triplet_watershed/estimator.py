"""Scikit-learn style estimator for the triplet-trained watershed classifier."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .classifier import EnsembleConfig, classify_ensemble, classify_single
from .data import PatchSource
from .graph import UNLABELED
from .graph_build import PcaBasis, build_edge_set, reweight
from .nn import Model, conv_spec, mlp_spec
from .trainer import TrainConfig, embed_all, train
from .validation import check_cube, check_label_map


def _child_ints(random_state, n):
    seqs = np.random.SeedSequence(random_state).spawn(n)
    return [int(s.generate_state(1)[0]) for s in seqs]


class TripletWatershed(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Transductive pixel classifier for image cubes.

    A patch network is trained with triplet loss on labels propagated by a
    seeded watershed over a fixed pixel graph (4-adjacency plus a Euclidean
    MST on PCA features); prediction is an ensemble watershed over the
    learned embedding.

    ``fit(X, y)`` takes the cube ``X`` of shape (H, W, B) and a label map
    ``y`` of shape (H, W): positive values are training labels, -1 marks
    graph pixels with unknown label, 0 leaves the pixel out of the graph.
    The graph therefore covers every nonzero pixel, labeled or not.

    Parameters
    ----------
    n_components : int or None
        PCA components kept as network input; None keeps all bands.
    emst_dims : int
        Leading PCA components used for the EMST (capped at n_components).
    patch_size : int
        Odd side of the square patch around each pixel.
    arch : {"mlp", "conv"}
    embed_dim : int
    hidden : tuple of int
        MLP hidden widths.
    conv_channels : tuple of 3 ints
    epochs, batch_size, alpha, seed_fraction, lr_base, lr_max, cycle_length,
    triplet_pool, fixed_seeds :
        Training loop settings, see :class:`~triplet_watershed.trainer.TrainConfig`.
    n_estimators, ensemble_seed_fraction, feature_fraction :
        Ensemble watershed used by :meth:`predict`.
    dtype : {"float32", "float64"}
    n_jobs : int
        Worker threads for the ensemble; results do not depend on it.
    random_state : int
    warm_start : bool
        Continue training the current network on the next ``fit``.
    """

    def __init__(self, n_components=None, emst_dims=32, patch_size=11, arch="mlp",
                 embed_dim=64, hidden=(128, 128), conv_channels=(24, 48, 32),
                 epochs=100, batch_size=256, alpha=0.2, seed_fraction=0.4,
                 lr_base=0.01, lr_max=0.1, cycle_length=None, triplet_pool="all",
                 fixed_seeds=False, n_estimators=25, ensemble_seed_fraction=0.5,
                 feature_fraction=0.5, dtype="float32", n_jobs=1, random_state=0,
                 warm_start=False):
        self.n_components = n_components
        self.emst_dims = emst_dims
        self.patch_size = patch_size
        self.arch = arch
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.conv_channels = conv_channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.alpha = alpha
        self.seed_fraction = seed_fraction
        self.lr_base = lr_base
        self.lr_max = lr_max
        self.cycle_length = cycle_length
        self.triplet_pool = triplet_pool
        self.fixed_seeds = fixed_seeds
        self.n_estimators = n_estimators
        self.ensemble_seed_fraction = ensemble_seed_fraction
        self.feature_fraction = feature_fraction
        self.dtype = dtype
        self.n_jobs = n_jobs
        self.random_state = random_state
        self.warm_start = warm_start

    # -- helpers ----------------------------------------------------------
    def _seeds(self):
        init, fit, ens = _child_ints(self.random_state, 3)
        return init, fit, ens

    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, alpha=self.alpha,
            seed_fraction=self.seed_fraction, lr_base=self.lr_base, lr_max=self.lr_max,
            cycle_length=self.cycle_length, embed_dim=self.embed_dim, arch=self.arch,
            triplet_pool=self.triplet_pool, fixed_seeds=self.fixed_seeds,
            seed=self._seeds()[1])

    def ensemble_config(self):
        return EnsembleConfig(self.n_estimators, self.ensemble_seed_fraction,
                              self.feature_fraction, self._seeds()[2])

    def _project(self, X):
        X = check_cube(X)
        h, w, b = X.shape
        if b != self.pca_.n_features_in_:
            raise ValueError(f"X has {b} bands, the model was fit on {self.pca_.n_features_in_}")
        return self.pca_.transform(X.reshape(-1, b)).reshape(h, w, -1)

    def _layout(self):
        return "flat" if self.arch == "mlp" else "chw"

    def _build_model(self, n_bands):
        if self.arch == "mlp":
            n_in = self.patch_size ** 2 * n_bands
            layers = mlp_spec(n_in, self.embed_dim, tuple(self.hidden))
            shape = (n_in,)
        elif self.arch == "conv":
            layers = conv_spec(n_bands, self.patch_size, self.embed_dim,
                               tuple(self.conv_channels))
            shape = (n_bands, self.patch_size, self.patch_size)
        else:
            raise ValueError(f"unknown arch {self.arch!r}")
        return Model(layers, shape, seed=self._seeds()[0], dtype=np.dtype(self.dtype))

    def _graph_for(self, Z, y):
        edge_set = build_edge_set(y != 0, Z, min(self.emst_dims, Z.shape[2]))
        vertex_feats = Z[edge_set.coords[:, 0], edge_set.coords[:, 1]]
        graph = edge_set.to_graph(vertex_feats[:, :min(self.emst_dims, Z.shape[2])])
        lab = y[edge_set.coords[:, 0], edge_set.coords[:, 1]]
        seeds = np.full(edge_set.n_vertices, UNLABELED, dtype=np.int64)
        known = lab > 0
        unseen = np.setdiff1d(np.unique(lab[known]), self.classes_)
        if len(unseen):
            raise ValueError(f"labels {unseen.tolist()} were not seen during fit")
        seeds[known] = np.searchsorted(self.classes_, lab[known])
        return edge_set, graph, seeds

    def _source(self, Z, coords):
        dtype = self.model_.dtype if hasattr(self, "model_") else np.dtype(self.dtype)
        return PatchSource(Z, coords, self.patch_size, self._layout(), dtype)

    # -- estimator API ----------------------------------------------------
    def fit(self, X, y):
        X = check_cube(X)
        y = check_label_map(y, X.shape[:2])
        if self.patch_size % 2 != 1:
            raise ValueError("patch_size must be odd")
        if not (self.warm_start and hasattr(self, "model_")):
            self.pca_ = PcaBasis(self.n_components).fit(X.reshape(-1, X.shape[2]))
            self.classes_ = np.unique(y[y > 0])
            if len(self.classes_) < 2:
                raise ValueError("fit needs training labels from at least two classes")
        Z = self._project(X)
        self._set_graph(Z, y)
        source = self._source(Z, self.edge_set_.coords)
        start = 0
        if self.warm_start and hasattr(self, "model_"):
            start = getattr(self, "n_iter_", 0)
        else:
            self.model_ = self._build_model(Z.shape[2])
        self.model_, self.history_ = train(source, self.graph_, self.model_,
                                           self.seed_labels_, self._train_config(),
                                           start_iteration=start)
        self.n_iter_ = self.model_.iteration
        return self

    def _set_graph(self, Z, y):
        self.edge_set_, self.graph_, self.seed_labels_ = self._graph_for(Z, y)
        self.shape_ = Z.shape[:2]

    def prepare_graph(self, X, y):
        """Build the graph and seeds for ``X`` from the label map ``y``.

        Later calls to :meth:`predict` without ``y`` reuse them. A loaded
        model needs this (or an explicit ``y``) before predicting.
        """
        check_is_fitted(self, "model_")
        self._set_graph(self._project(X), check_label_map(y, np.shape(X)[:2]))
        return self

    def orphan_vertices(self):
        """Graph vertices whose connected component holds no seed."""
        comps = self.graph_.connected_components()
        seeded = np.unique(comps[self.seed_labels_ != UNLABELED])
        return int((~np.isin(comps, seeded)).sum())

    def _vertex_embeddings(self, Z, coords):
        return embed_all(self.model_, self._source(Z, coords))

    def transform(self, X):
        """Embeddings of every pixel, shape (H, W, embed_dim)."""
        check_is_fitted(self, "model_")
        Z = self._project(X)
        h, w = Z.shape[:2]
        coords = np.argwhere(np.ones((h, w), dtype=bool))
        return self._vertex_embeddings(Z, coords).reshape(h, w, -1)

    def predict_votes(self, X, y=None):
        """Ensemble watershed labels and vote counts over the graph vertices.

        Without ``y`` the graph and seeds from ``fit`` are reused; with ``y``
        (same convention as in ``fit``) they are rebuilt from it.

        Returns ``(label_map, votes, edge_set)``; ``votes`` has one row per
        graph vertex and one column per class.
        """
        check_is_fitted(self, "model_")
        Z = self._project(X)
        if y is None:
            if not hasattr(self, "graph_") or Z.shape[:2] != tuple(self.shape_):
                raise ValueError("no fitted graph for this image; pass the seed label map y")
            edge_set, graph, seeds = self.edge_set_, self.graph_, self.seed_labels_
        else:
            y = check_label_map(y, Z.shape[:2])
            edge_set, graph, seeds = self._graph_for(Z, y)
        emb = self._vertex_embeddings(Z, edge_set.coords)
        labels, votes = classify_ensemble(graph, emb, seeds, self.ensemble_config(),
                                          n_classes=len(self.classes_), n_jobs=self.n_jobs)
        return self._to_map(labels, edge_set), votes, edge_set

    def predict(self, X, y=None):
        """Label map (H, W) with original class labels, 0 outside the graph."""
        return self.predict_votes(X, y)[0]

    def predict_single(self, X, y=None):
        """Single watershed on the full embedding (the rule used in training)."""
        check_is_fitted(self, "model_")
        Z = self._project(X)
        if y is None:
            edge_set, graph, seeds = self.edge_set_, self.graph_, self.seed_labels_
        else:
            edge_set, graph, seeds = self._graph_for(Z, check_label_map(y, Z.shape[:2]))
        graph = graph.with_weights(np.ones(graph.n_edges))
        reweight(graph, self._vertex_embeddings(Z, edge_set.coords))
        return self._to_map(classify_single(graph, seeds), edge_set)

    def _to_map(self, labels, edge_set):
        out = np.zeros(edge_set.shape, dtype=np.int64)
        ok = labels != UNLABELED
        coords = edge_set.coords[ok]
        out[coords[:, 0], coords[:, 1]] = self.classes_[labels[ok]]
        return out

    def score(self, X, y):
        """Overall accuracy on the pixels where ``y`` > 0."""
        y = np.asarray(y)
        pred = self.predict(X)
        scored = y > 0
        return float(np.mean(pred[scored] == y[scored]))

    # -- persistence ------------------------------------------------------
    def save(self, path, run_config=None):
        """Write the network and everything needed to predict (``n_jobs`` is
        left out so files do not depend on the thread count)."""
        check_is_fitted(self, "model_")
        params = {k: (list(v) if isinstance(v, tuple) else v)
                  for k, v in self.get_params().items() if k != "n_jobs"}
        extra = {"estimator": params, "pca": self.pca_.to_dict(),
                 "classes": self.classes_.tolist(), "n_iter": int(self.n_iter_),
                 "train_config": self._train_config().to_dict(),
                 "ensemble_config": self.ensemble_config().to_dict(),
                 "run_config": run_config or {}}
        self.model_.save(path, extra)

    @classmethod
    def load(cls, path):
        model, extra = Model.load(path)
        params = extra["estimator"]
        for key in ("hidden", "conv_channels"):
            params[key] = tuple(params[key])
        est = cls(**params)
        est.model_ = model
        est.pca_ = PcaBasis.from_dict(extra["pca"])
        est.classes_ = np.asarray(extra["classes"], dtype=np.int64)
        est.n_iter_ = extra.get("n_iter", 0)
        est.model_.iteration = est.n_iter_
        est.history_ = []
        return est
