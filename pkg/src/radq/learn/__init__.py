from .classifier import ClassifierConfig, MlpClassifier, predict, predict_proba, train_classifier
from .lopo import FoldResult, LopoPlan, audit_folds, required_candidates, run_lopo
from .scg import ScgConfig, ScgResult, scg_minimize

__all__ = [
    "ClassifierConfig", "MlpClassifier", "predict", "predict_proba", "train_classifier",
    "FoldResult", "LopoPlan", "audit_folds", "required_candidates", "run_lopo",
    "ScgConfig", "ScgResult", "scg_minimize",
]
