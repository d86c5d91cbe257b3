"""Volumes, patient cases and cohort manifests, plus their on-disk format.

A ``.vol`` file is one UTF-8 JSON header line followed by the raw
little-endian float32 payload in row-major, x-fastest order.  In memory the
grid is held as a ``(nz, ny, nx)`` C-ordered array so that ``data[z]`` is an
axial slice and the flattened order matches the payload.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

VOLUME_FORMAT = "radq-vol-1"
CASE_FORMAT = "radq-case-1"
COHORT_FORMAT = "radq-cohort-1"

_LE_F32 = np.dtype("<f4")


class VolumeFormatError(ValueError):
    """Raised when a volume file or object violates the format contract."""


class CaseInvariantError(ValueError):
    """Raised when a patient case or cohort violates one of its invariants."""


@dataclass(frozen=True, eq=False)
class Volume:
    modality_id: str
    dims: tuple[int, int, int]
    voxel_size_mm: tuple[float, float, float]
    data: np.ndarray
    is_mask: bool = False
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        vox = tuple(float(v) for v in self.voxel_size_mm)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size_mm", vox)
        arr = np.asarray(self.data)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        nx, ny, nz = dims
        if arr.size != nx * ny * nz:
            raise VolumeFormatError(
                f"{self.modality_id}: data length {arr.size} != nx*ny*nz = {nx * ny * nz}"
            )
        arr = np.ascontiguousarray(arr.reshape(nz, ny, nx))
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        validate_volume(self)

    @classmethod
    def from_array(cls, modality_id, array, voxel_size_mm=(1.0, 1.0, 1.0), **kw):
        """Build from a ``(nz, ny, nx)`` array."""
        arr = np.asarray(array)
        if arr.ndim != 3:
            raise VolumeFormatError(f"expected a 3D (nz, ny, nx) array, got shape {arr.shape}")
        nz, ny, nx = arr.shape
        return cls(modality_id, (nx, ny, nz), voxel_size_mm, arr, **kw)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, array, modality_id=None, **kw) -> "Volume":
        """Same geometry, new contents."""
        return Volume(
            modality_id or self.modality_id, self.dims, self.voxel_size_mm, array,
            is_mask=kw.pop("is_mask", False), meta=kw.pop("meta", {}),
        )

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.modality_id == other.modality_id
            and self.dims == other.dims
            and self.voxel_size_mm == other.voxel_size_mm
            and self.is_mask == other.is_mask
            and dict(self.meta) == dict(other.meta)
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


def validate_volume(v: Volume) -> None:
    if len(v.dims) != 3 or any(d <= 0 for d in v.dims):
        raise VolumeFormatError(f"{v.modality_id}: dims must be three positive integers, got {v.dims}")
    if len(v.voxel_size_mm) != 3 or not all(np.isfinite(s) and s > 0 for s in v.voxel_size_mm):
        raise VolumeFormatError(f"{v.modality_id}: voxel sizes must be strictly positive, got {v.voxel_size_mm}")
    flat = v.data.reshape(-1)
    bad = ~np.isfinite(flat)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise VolumeFormatError(f"{v.modality_id}: non-finite value at voxel index {idx}")
    if v.is_mask:
        off = (flat != 0.0) & (flat != 1.0)
        if off.any():
            idx = int(np.flatnonzero(off)[0])
            raise VolumeFormatError(
                f"{v.modality_id}: mask value {flat[idx]!r} at voxel index {idx} is not 0.0 or 1.0"
            )


def write_volume(v: Volume, path) -> None:
    validate_volume(v)
    header = {
        "format": VOLUME_FORMAT,
        "modality_id": v.modality_id,
        "dims": list(v.dims),
        "voxel_size_mm": list(v.voxel_size_mm),
        "count": int(v.data.size),
        "mask": bool(v.is_mask),
        "meta": dict(v.meta),
    }
    line = json.dumps(header, sort_keys=True).encode("utf-8")
    if b"\n" in line:
        raise VolumeFormatError("header must serialize to a single line")
    payload = v.data.astype(_LE_F32, copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(line + b"\n")
        fh.write(payload)


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise VolumeFormatError(f"{path}: malformed header (no newline terminator)")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: malformed header ({exc})") from None
    if not isinstance(header, dict) or header.get("format") != VOLUME_FORMAT:
        raise VolumeFormatError(f"{path}: malformed header (unknown format {header.get('format')!r})"
                                if isinstance(header, dict) else f"{path}: malformed header")
    try:
        dims = tuple(int(d) for d in header["dims"])
        count = int(header["count"])
        modality = str(header["modality_id"])
        vox = tuple(float(s) for s in header["voxel_size_mm"])
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{path}: malformed header (missing or invalid field {exc})") from None
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise VolumeFormatError(f"{path}: malformed header (dims {dims})")
    expected = dims[0] * dims[1] * dims[2]
    if count != expected:
        raise VolumeFormatError(f"{path}: header count {count} != nx*ny*nz = {expected}")
    payload = raw[nl + 1:]
    if len(payload) != 4 * expected:
        raise VolumeFormatError(
            f"{path}: payload length {len(payload)} bytes, expected {4 * expected} "
            f"({expected} float32 values)"
        )
    data = np.frombuffer(payload, dtype=_LE_F32).astype(np.float32)
    return Volume(modality, dims, vox, data, is_mask=bool(header.get("mask", False)),
                  meta=header.get("meta") or {})


@dataclass(frozen=True, eq=False)
class PatientCase:
    patient_id: str
    age_years: int
    t2w: Volume
    dwi_by_b: Mapping[float, Volume]
    adc: Volume
    chb_dwi: Volume
    cdi: Volume
    prostate_mask: Volume
    tumour_mask: Volume

    def __post_init__(self):
        object.__setattr__(self, "dwi_by_b", dict(sorted(self.dwi_by_b.items())))
        validate_case(self)

    @property
    def b_values(self) -> list[float]:
        return list(self.dwi_by_b)

    def volumes(self) -> dict[str, Volume]:
        out = {"t2w": self.t2w}
        for b, v in self.dwi_by_b.items():
            out[_dwi_key(b)] = v
        out.update(adc=self.adc, chb_dwi=self.chb_dwi, cdi=self.cdi,
                   prostate_mask=self.prostate_mask, tumour_mask=self.tumour_mask)
        return out


def _dwi_key(b: float) -> str:
    return f"dwi_b{int(round(b)):04d}" if float(b).is_integer() else f"dwi_b{b:g}"


def validate_case(case: PatientCase) -> None:
    if not case.dwi_by_b:
        raise CaseInvariantError(f"{case.patient_id}: no DWI volumes")
    bs = list(case.dwi_by_b)
    if bs[0] != 0:
        raise CaseInvariantError(f"{case.patient_id}: b-values must start at 0, got {bs}")
    if any(b1 <= b0 for b0, b1 in zip(bs, bs[1:])):
        raise CaseInvariantError(f"{case.patient_id}: b-values must be strictly increasing, got {bs}")
    vols = case.volumes()
    ref = case.t2w.dims
    for name, v in vols.items():
        if v.dims != ref:
            raise CaseInvariantError(
                f"{case.patient_id}: dims mismatch, {name} has {v.dims} but t2w has {ref}"
            )
    for name in ("prostate_mask", "tumour_mask"):
        if not vols[name].is_mask:
            raise CaseInvariantError(f"{case.patient_id}: {name} must be a binary mask volume")
    outside = (case.tumour_mask.data > 0) & (case.prostate_mask.data == 0)
    if outside.any():
        idx = int(np.flatnonzero(outside.reshape(-1))[0])
        raise CaseInvariantError(
            f"{case.patient_id}: tumour_mask not within prostate_mask (voxel index {idx})"
        )


def save_case(case: PatientCase, directory) -> Path:
    validate_case(case)
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, v in case.volumes().items():
        fname = f"{name}.vol"
        write_volume(v, d / fname)
        files[name] = fname
    meta = {
        "format_version": CASE_FORMAT,
        "patient_id": case.patient_id,
        "age_years": int(case.age_years),
        "b_values": [float(b) for b in case.b_values],
        "files": files,
    }
    (d / "case.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def load_case(directory) -> PatientCase:
    d = Path(directory)
    meta = json.loads((d / "case.json").read_text())
    if meta.get("format_version") != CASE_FORMAT:
        raise CaseInvariantError(f"{d}: unknown case format {meta.get('format_version')!r}")
    files = meta["files"]
    dwi = {}
    for b in meta["b_values"]:
        dwi[float(b)] = read_volume(d / files[_dwi_key(b)])
    return PatientCase(
        patient_id=meta["patient_id"],
        age_years=int(meta["age_years"]),
        t2w=read_volume(d / files["t2w"]),
        dwi_by_b=dwi,
        adc=read_volume(d / files["adc"]),
        chb_dwi=read_volume(d / files["chb_dwi"]),
        cdi=read_volume(d / files["cdi"]),
        prostate_mask=read_volume(d / files["prostate_mask"]),
        tumour_mask=read_volume(d / files["tumour_mask"]),
    )


@dataclass(frozen=True)
class CohortManifest:
    cases: tuple[tuple[str, str], ...]  # (patient_id, case directory relative to manifest)
    seed: int
    format_version: str = COHORT_FORMAT

    def __post_init__(self):
        object.__setattr__(self, "cases", tuple((str(p), str(f)) for p, f in self.cases))
        ids = [p for p, _ in self.cases]
        if len(set(ids)) != len(ids):
            raise CaseInvariantError("cohort manifest has duplicate patient_ids")

    @property
    def patient_ids(self) -> list[str]:
        return [p for p, _ in self.cases]


def save_manifest(m: CohortManifest, path) -> None:
    doc = {
        "format_version": m.format_version,
        "seed": int(m.seed),
        "cases": [{"patient_id": p, "path": f} for p, f in m.cases],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_manifest(path) -> CohortManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format_version") != COHORT_FORMAT:
        raise CaseInvariantError(f"{path}: unknown cohort format {doc.get('format_version')!r}")
    m = CohortManifest(tuple((c["patient_id"], c["path"]) for c in doc["cases"]), int(doc["seed"]))
    for pid, rel in m.cases:
        if not (path.parent / rel / "case.json").exists():
            raise CaseInvariantError(f"{path}: case file for {pid} missing at {rel}")
    return m


def load_cohort(path) -> tuple[CohortManifest, list[PatientCase]]:
    path = Path(path)
    m = load_manifest(path)
    return m, [load_case(path.parent / rel) for _, rel in m.cases]


def save_cohort(cases, seed, directory) -> CohortManifest:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for case in cases:
        save_case(case, d / case.patient_id)
        entries.append((case.patient_id, case.patient_id))
    m = CohortManifest(tuple(entries), seed)
    save_manifest(m, d / "cohort.json")
    return m


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_sha256(directory) -> str:
    """Content hash over every file under ``directory`` (sorted relative paths)."""
    root = Path(directory)
    h = hashlib.sha256()
    for dirpath, _, names in sorted(os.walk(root)):
        for name in sorted(names):
            p = Path(dirpath) / name
            h.update(str(p.relative_to(root)).encode())
            h.update(file_sha256(p).encode())
    return h.hexdigest()
    return h.hexdigest()
