from .embeddings import compute_embeddings, config_hash, load_embeddings, save_embeddings
from .estimators import CovarianceSpectrum, NearestMeanClassifier, WeightedKNNClassifier
from .metrics import (EmbeddingMatrix, NMCStability, PrototypeSet, SpectrumRecord, compute_prototypes, covariance,
                      exclusion_difference, forgetting, forward_transfer, knn_accuracy, knn_predict, linear_cka,
                      nmc_accuracy, nmc_predict, nmc_stability_protocol, spectrum)
from .report import MetricReport
