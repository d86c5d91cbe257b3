"""Pipeline stages over a run directory.

Each stage reads the outputs of earlier stages, writes its own
subdirectory and a ``provenance.json`` there, and never touches earlier
outputs.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, baseline, evaluation, phantom, seqio
from .candidates import (Candidate, augment_rotations, candidate_counts, extract_candidates, read_candidates,
                         threshold_cdi, write_candidates)
from .config import RunConfig
from .learn import lopo
from .sequencer import discover as disc
from .sequencer.model import LayerPlan, load_model, save_model, sequence_batch
from .volume_io import file_sha256, load_cohort

log = logging.getLogger(__name__)

STAGE_VERSIONS = {
    "phantom": "phantom-1", "candidates": "candidates-1", "discover": "discover-1",
    "sequence": "sequence-1", "baseline": baseline.METHOD, "lopo": "lopo-1", "report": "report-1",
}
STAGES = tuple(STAGE_VERSIONS)
TIMINGS_FILE = "timings.json"


class MissingInputError(FileNotFoundError):
    pass


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"missing {path} (run the '{stage}' stage first)")
    return path


def write_provenance(directory: Path, stage: str, cfg: RunConfig, inputs: dict, extra: dict | None = None):
    doc = {
        "stage": stage,
        "stage_version": STAGE_VERSIONS[stage],
        "package_version": __version__,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "seeds": asdict(cfg.seeds),
        "inputs": {k: file_sha256(v) for k, v in sorted(inputs.items())},
        **(extra or {}),
    }
    (directory / "provenance.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _stage_dir(run: Path, stage: str) -> Path:
    d = Path(run) / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


# --------------------------------------------------------------- stages

def run_phantom(cfg: RunConfig, run) -> Path:
    d = _stage_dir(run, "phantom")
    phantom.write_cohort(cfg.phantom, d)
    write_provenance(d, "phantom", cfg, {})
    return d


def _cohort_path(run) -> Path:
    return _require(Path(run) / "phantom" / "cohort" / "cohort.json", "phantom")


def run_candidates(cfg: RunConfig, run) -> Path:
    manifest_path = _cohort_path(run)
    _, cases = load_cohort(manifest_path)
    cands: list[Candidate] = []
    for case in cases:
        found = extract_candidates(case, threshold_cdi(case.cdi), cfg=cfg.candidates)
        cands.extend(augment_rotations(found))
    d = _stage_dir(run, "candidates")
    write_candidates(cands, d)
    counts = candidate_counts(cands)
    counts["per_patient"] = {
        p: candidate_counts([c for c in cands if c.patient_id == p]) for p in sorted({c.patient_id for c in cands})
    }
    (d / "counts.json").write_text(json.dumps(counts, indent=2, sort_keys=True))
    write_provenance(d, "candidates", cfg, {"cohort.json": manifest_path})
    return d


def load_stage_candidates(run) -> list[Candidate]:
    d = Path(run) / "candidates"
    _require(d / "index.jsonl", "candidates")
    return read_candidates(d)


def plan_for(cfg: RunConfig) -> LayerPlan:
    return LayerPlan.paper() if cfg.sequencer.profile == "paper" else LayerPlan.desk(cfg.sequencer.desk_factor)


def run_discover(cfg: RunConfig, run) -> Path:
    cands = load_stage_candidates(run)
    s = cfg.sequencer
    dcfg = disc.DiscoveryConfig(max_iter=s.discovery_iterations, max_patches=s.discovery_patches,
                                psi_init=s.psi_init, global_psi=s.global_psi, chunk=s.chunk)
    model, dlog = disc.discover(cands, plan_for(cfg), cfg.seeds.discovery, dcfg)
    d = _stage_dir(run, "discover")
    save_model(model, d / "sequencer.json")
    (d / "discovery_log.json").write_text(json.dumps(dlog.to_json(), indent=2))
    write_provenance(d, "discover", cfg, {"index.jsonl": Path(run) / "candidates" / "index.jsonl"},
                     {"model_hash": model.model_hash()})
    return d


def needed_candidates(cfg: RunConfig, cands) -> list[Candidate]:
    return lopo.required_candidates(cands, cfg.seeds.folds)


def run_sequence(cfg: RunConfig, run) -> Path:
    cands = load_stage_candidates(run)
    model_path = _require(Path(run) / "discover" / "sequencer.json", "discover")
    model = load_model(model_path)
    need = needed_candidates(cfg, cands)
    seqs = sequence_batch(model, need, threads=cfg.threads, chunk=cfg.sequencer.chunk,
                          dtype=np.dtype(cfg.sequencer.sequence_dtype))
    d = _stage_dir(run, "sequence")
    seqio.write_sequences(d, "sequences", [c.candidate_id for c in need], [c.label for c in need],
                          np.stack([s.values for s in seqs]), meta={"model_hash": model.model_hash()})
    write_provenance(d, "sequence", cfg, {"sequencer.json": model_path,
                                          "index.jsonl": Path(run) / "candidates" / "index.jsonl"},
                     {"n_sequences": len(seqs)})
    return d


def run_baseline(cfg: RunConfig, run) -> Path:
    cands = load_stage_candidates(run)
    need = needed_candidates(cfg, cands)
    vals = baseline.texture_batch(need)
    d = _stage_dir(run, "baseline")
    seqio.write_sequences(d, "texture", [c.candidate_id for c in need], [c.label for c in need], vals,
                          names=baseline.feature_names(), meta={"method": baseline.METHOD})
    write_provenance(d, "baseline", cfg, {"index.jsonl": Path(run) / "candidates" / "index.jsonl"})
    return d


def _lookup(path: Path, stage: str) -> dict[str, np.ndarray]:
    ids, _, vals, _ = seqio.read_sequences(_require(path, stage))
    return dict(zip(ids, vals))


SEQUENCE_TABLES = {"discovered": ("sequence", "sequences.csv"), "baseline": ("baseline", "texture.csv")}


def run_lopo(cfg: RunConfig, run) -> Path:
    cands = load_stage_candidates(run)
    tables = {name: _lookup(Path(run) / st / fn, st) for name, (st, fn) in SEQUENCE_TABLES.items()}
    d = _stage_dir(run, "lopo")
    audit = lopo.audit_folds(cands, cfg.seeds.folds)
    for name, table in tables.items():
        res = lopo.run_lopo(cands, table, cfg.seeds.folds, cfg.classifier, threads=cfg.threads)
        lopo.write_fold_results(res, d / f"{name}_folds.jsonl")
    (d / "audit.json").write_text(json.dumps({"passed": not audit, "problems": audit}, indent=2))
    inputs = {f"{st}/{fn}": Path(run) / st / fn for st, fn in SEQUENCE_TABLES.values()}
    write_provenance(d, "lopo", cfg, inputs)
    return d


def separability(cfg: RunConfig, cands, table: dict) -> evaluation.SeparabilityReport:
    """Fisher criterion over the original-orientation candidates that any fold trains or tests on."""
    tested = [c for c in needed_candidates(cfg, cands) if c.rotation_index == 0 and c.candidate_id in table]
    h = [table[c.candidate_id] for c in tested if not c.is_cancerous]
    k = [table[c.candidate_id] for c in tested if c.is_cancerous]
    return evaluation.fisher_criterion(h, k)


def run_report(cfg: RunConfig, run, config_text: str | None = None) -> Path:
    cands = load_stage_candidates(run)
    folds, seps = {}, {}
    for name, (st, fn) in SEQUENCE_TABLES.items():
        folds[name] = lopo.read_fold_results(_require(Path(run) / "lopo" / f"{name}_folds.jsonl", "lopo"))
        seps[name] = separability(cfg, cands, _lookup(Path(run) / st / fn, st))
    audit = json.loads(_require(Path(run) / "lopo" / "audit.json", "lopo").read_text())
    discovery_log = json.loads(_require(Path(run) / "discover" / "discovery_log.json", "discover").read_text())
    model = load_model(Path(run) / "discover" / "sequencer.json")
    d = _stage_dir(run, "report")
    extra = {
        "leakage_audit": audit,
        "discovery": {"losses": discovery_log["losses"], "successes": discovery_log["successes"],
                      "model_hash": model.model_hash(), "profile": model.plan.profile,
                      "trained_scalars": model.n_trained_scalars(),
                      "realized_weights": model.n_realized_weights()},
        "candidate_counts": json.loads((Path(run) / "candidates" / "counts.json").read_text()),
        "config_text": config_text,
        "config_hash": cfg.config_hash(),
    }
    evaluation.build_report(evaluation.ReportInputs(folds, seps, cfg.to_dict(), asdict(cfg.seeds), extra),
                            out_dir=d)
    write_provenance(d, "report", cfg, {f"{n}_folds.jsonl": Path(run) / "lopo" / f"{n}_folds.jsonl" for n in folds})
    return d


RUNNERS = {
    "phantom": run_phantom, "candidates": run_candidates, "discover": run_discover, "sequence": run_sequence,
    "baseline": run_baseline, "lopo": run_lopo, "report": run_report,
}


def run_stage(cfg: RunConfig, run, stage: str, config_text: str | None = None) -> Path:
    """Run one stage and record its wall time in ``<run>/timings.json``.

    Timings live outside the stage directories so every other output is a
    pure function of (config, seeds).
    """
    t0 = time.perf_counter()
    out = run_report(cfg, run, config_text) if stage == "report" else RUNNERS[stage](cfg, run)
    seconds = time.perf_counter() - t0
    path = Path(run) / TIMINGS_FILE
    timings = json.loads(path.read_text()) if path.exists() else {}
    timings[stage] = seconds
    path.write_text(json.dumps(timings, indent=2))
    log.info("stage %s done in %.1f s", stage, seconds)
    return out


def run_all(cfg: RunConfig, run, config_text: str | None = None) -> Path:
    timings = Path(run) / TIMINGS_FILE
    if timings.exists():
        timings.unlink()
    for st in STAGES:
        run_stage(cfg, run, st, config_text)
    return Path(run) / "report"


def reproducibility_digest(run) -> str:
    """SHA-256 over every output file of a run except the wall-clock timings."""
    h = hashlib.sha256()
    root = Path(run)
    for p in sorted(q for q in root.rglob("*") if q.is_file() and q.name != TIMINGS_FILE):
        h.update(p.relative_to(root).as_posix().encode() + b"\0")
        h.update(file_sha256(p).encode())
    return h.hexdigest()
