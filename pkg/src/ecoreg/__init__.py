"""Ecological inference by distribution regression on survey microdata."""

__version__ = "0.1.0"

from .data_model import (Microdata, OutcomeCounts, Record, RegionRow, RegionTable, RowKind,
                         Schema, VariableSpec, validate)
from .featurizer import (EmbeddingMatrix, FeatureLayout, Featurizer, FeaturizerConfig, OrfMap,
                         build_orf, fit_standardizer)
from .solver import (DesignProblem, ModelFit, cross_validate, deviance, fit_cv, fit_lambda,
                     fit_path, fraction_deviance_explained, lambda_max, softmax)
from .inference import (ExitPollRow, SubgroupQuery, exit_poll_table, fit_scatter, gender_gap,
                        predict_subgroup, subgroup_embedding)
from .explorer import enumerate_feature_sets, run_exploration, square_plot_data
