"""Leave-one-patient-out cross-validation over candidate sequences."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..candidates import Candidate, CandidateError, balance_split
from .classifier import ClassifierConfig, predict_proba, train_classifier

log = logging.getLogger(__name__)

Featurizer = Callable[[list[Candidate]], np.ndarray]


@dataclass(frozen=True)
class Fold:
    fold_id: int
    test_patient: str
    train_patients: tuple[str, ...]


@dataclass(frozen=True)
class LopoPlan:
    folds: tuple[Fold, ...]

    @classmethod
    def for_patients(cls, patient_ids) -> "LopoPlan":
        pids = sorted(set(patient_ids))
        if len(pids) < 2:
            raise ValueError("leave-one-patient-out needs at least two patients")
        return cls(tuple(Fold(i, p, tuple(q for q in pids if q != p)) for i, p in enumerate(pids)))


@dataclass
class FoldResult:
    fold_id: int
    test_patient: str
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0
    n_train: int = 0
    skipped: str | None = None  # reason when the fold could not be evaluated
    predictions: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def fold_seed(seed: int, fold_id: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(fold_id)]).generate_state(1, np.uint64)[0])


def fold_split(cands: list[Candidate], fold: Fold, seed: int):
    return balance_split(cands, seed, test_patients=(fold.test_patient,))


def required_candidates(cands: list[Candidate], seed: int, plan: LopoPlan | None = None) -> list[Candidate]:
    """Every candidate any fold trains or tests on, in input order.

    Sequencing only these keeps the expensive forward passes to the union of
    the balanced subsets rather than the whole augmented pool.
    """
    plan = plan or LopoPlan.for_patients(c.patient_id for c in cands)
    need: set[str] = set()
    for fold in plan.folds:
        try:
            train, test = fold_split(cands, fold, seed)
        except CandidateError:
            continue
        need.update(c.candidate_id for c in train)
        need.update(c.candidate_id for c in test)
    return [c for c in cands if c.candidate_id in need]


def audit_folds(cands: list[Candidate], seed: int, plan: LopoPlan | None = None) -> list[str]:
    """Leakage problems across folds; an empty list means the audit passed."""
    plan = plan or LopoPlan.for_patients(c.patient_id for c in cands)
    problems = []
    for fold in plan.folds:
        try:
            train, test = fold_split(cands, fold, seed)
        except CandidateError:
            continue
        tp = {c.patient_id for c in train} & {c.patient_id for c in test}
        tf = {c.family_id for c in train} & {c.family_id for c in test}
        if tp:
            problems.append(f"fold {fold.fold_id}: patients in train and test: {sorted(tp)}")
        if tf:
            problems.append(f"fold {fold.fold_id}: rotation families in train and test: {sorted(tf)[:3]}")
        if {c.patient_id for c in test} - {fold.test_patient}:
            problems.append(f"fold {fold.fold_id}: test set holds other patients")
    return problems


def _features(featurize, cands) -> np.ndarray:
    if isinstance(featurize, Mapping):
        return np.stack([np.asarray(featurize[c.candidate_id], dtype=np.float64) for c in cands])
    return np.asarray(featurize(cands), dtype=np.float64)


def run_fold(cands, featurize, fold: Fold, seed: int, config: ClassifierConfig) -> FoldResult:
    res = FoldResult(fold.fold_id, fold.test_patient)
    try:
        train, test = fold_split(cands, fold, seed)
    except CandidateError as exc:
        # policy: a held-out patient without cancerous candidates cannot be scored
        # against a balanced test set, so the fold is skipped and reported
        res.skipped = str(exc)
        log.warning("fold %d (%s) skipped: %s", fold.fold_id, fold.test_patient, exc)
        return res
    if not test:
        res.skipped = "no test candidates"
        return res
    X, y = _features(featurize, train), np.array([int(c.is_cancerous) for c in train])
    model = train_classifier(X, y, fold_seed(seed, fold.fold_id), config)
    prob = predict_proba(model, _features(featurize, test))
    res.n_train = len(train)
    for c, p in zip(test, prob):
        pred = int(p[1] > p[0])
        truth = int(c.is_cancerous)
        res.tp += pred and truth
        res.tn += (not pred) and (not truth)
        res.fp += pred and not truth
        res.fn += (not pred) and truth
        res.predictions.append({"candidate_id": c.candidate_id, "label": truth, "predicted": pred,
                                "p_cancerous": float(p[1])})
    return res


def run_lopo(cands: list[Candidate], featurize: Featurizer | Mapping[str, np.ndarray], seed: int,
             config: ClassifierConfig = ClassifierConfig(), plan: LopoPlan | None = None,
             threads: int = 1) -> list[FoldResult]:
    """One fold per patient; ``featurize`` maps candidates to sequences (callable or id lookup)."""
    plan = plan or LopoPlan.for_patients(c.patient_id for c in cands)
    n_canc = len({c.patient_id for c in cands if c.is_cancerous})
    if n_canc < 2:
        raise CandidateError("leave-one-patient-out needs at least two patients with cancerous candidates")
    job = lambda f: run_fold(cands, featurize, f, seed, config)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(job, plan.folds))
    return [job(f) for f in plan.folds]


def write_fold_results(results: list[FoldResult], path) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_fold_results(path) -> list[FoldResult]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(FoldResult(**json.loads(line)))
    return out
