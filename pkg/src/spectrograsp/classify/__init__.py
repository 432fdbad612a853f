"""Spectral classifiers: four model families, grid search and evaluation."""

from .metrics import EvalReport, confusion_matrix, evaluate, macro_f1, within_pair_accuracy, write_confusion_csv
from .model import (
    DEFAULT_HYPERPARAMS,
    FAMILIES,
    ClassifierModel,
    LabeledVectors,
    model_from_dict,
    model_to_dict,
    predict,
    predict_proba,
    scores,
    train,
)
from .selection import expand_grid, grid_search_cv, split_train_test, stratified_group_folds

__all__ = [
    "DEFAULT_HYPERPARAMS", "FAMILIES", "ClassifierModel", "EvalReport", "LabeledVectors",
    "confusion_matrix", "evaluate", "expand_grid", "grid_search_cv", "macro_f1", "model_from_dict",
    "model_to_dict", "predict", "predict_proba", "scores", "split_train_test",
    "stratified_group_folds", "train", "within_pair_accuracy", "write_confusion_csv",
]
