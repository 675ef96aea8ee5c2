"""Watershed classification with triplet-trained embeddings for image cubes."""
from .classifier import EnsembleConfig, classify_ensemble, classify_single, mine_triplets
from .data import HsiDataset, load_dataset, make_synthetic, save_dataset, split
from .estimator import TripletWatershed
from .graph import (DISCONNECTED, UNLABELED, Graph, brute_force_max_margin, label_orphans,
                    pass_value, set_dissimilarity, watershed_label)
from .graph_build import PcaBasis, build_edge_set, euclidean_mst, fit_pca, reweight
from .metrics import compute_metrics, mean_average_precision
from .nn import Model, grad_check
from .trainer import TrainConfig, cyclic_lr, train, triplet_loss

__version__ = "0.1.0"
