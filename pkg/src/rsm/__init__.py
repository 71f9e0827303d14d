"""Explaining survival predictions through feature significance, outcome
clusters and similar-patient retrieval."""

from .cohort import (Cohort, CohortSchema, PatientRecord, load_cohort, save_cohort, split,
                     standardize_and_impute)
from .datagen import SyntheticConfig, default_paper_config, generate, simulate
from .errors import (ConfigError, DataError, DivergenceError, RSMError, StageError,
                     StaleArtifactError)
from .metrics import c_index_td, evaluate, mae
from .pdfcluster import PdfStats, js_distance, kmeans_fit, pdf_stats, select_k
from .significance import SignificanceReport, ks_two_sample, select_significant
from .simrank import build_index, kpca_fit, pca_fit, query_similar
from .survnet import SurvivalPDF, TrainConfig, forward, gradients, loss, predict, train

__version__ = "0.1.0"
