"""Tumour-candidate detection, patch extraction, rotation augmentation and
balanced sampling."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume_io import PatientCase, Volume

CHANNELS = ("t2w", "adc", "chb_dwi", "cdi")
HEALTHY, CANCEROUS = "healthy", "cancerous"
N_ROTATIONS = 8
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class CandidateError(ValueError):
    pass


@dataclass(frozen=True)
class CandidateConfig:
    patch_size: int = 32
    context_size: int = 46
    healthy_grid_stride: int = 12
    tumour_dilation: int = 2
    overlap_threshold: float = 0.5

    def __post_init__(self):
        if self.patch_size < 2 or self.patch_size % 2:
            raise ValueError("patch_size must be an even integer >= 2")
        if self.context_size < int(np.ceil(self.patch_size * np.sqrt(2))):
            raise ValueError("context_size must cover the patch rotated by 45 degrees")
        if (self.context_size - self.patch_size) % 2:
            raise ValueError("context_size - patch_size must be even")
        if self.healthy_grid_stride < 1:
            raise ValueError("healthy_grid_stride must be positive")
        if not 0 < self.overlap_threshold <= 1:
            raise ValueError("overlap_threshold must lie in (0, 1]")


@dataclass(frozen=True)
class CandidateMask:
    mask: Volume
    cdi_max: float


@dataclass(frozen=True, eq=False)
class Candidate:
    patient_id: str
    centroid: tuple[int, int, int]  # (x, y, z) voxel coordinates
    label: str
    rotation_index: int
    patch: np.ndarray  # (4, P, P) float32, channel order CHANNELS
    source: str = "component"  # "component" (thresholded CDI) or "grid" (healthy sampling)
    degenerate_channels: tuple[int, ...] = ()
    context: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.label not in (HEALTHY, CANCEROUS):
            raise CandidateError(f"unknown label {self.label!r}")
        if not 0 <= self.rotation_index < N_ROTATIONS:
            raise CandidateError(f"rotation_index {self.rotation_index} outside 0..7")
        if not np.all(np.isfinite(self.patch)):
            raise CandidateError(f"{self.family_id}: non-finite patch values")

    @property
    def family_id(self) -> str:
        x, y, z = self.centroid
        return f"{self.patient_id}/z{z}/y{y}/x{x}/{self.source}"

    @property
    def candidate_id(self) -> str:
        return f"{self.family_id}/r{self.rotation_index}"

    @property
    def is_cancerous(self) -> bool:
        return self.label == CANCEROUS


def threshold_cdi(cdi: Volume) -> CandidateMask:
    """Binary candidate mask: 1 where CDI is strictly above half its maximum."""
    data = cdi.data
    cmax = float(data.max())
    if cmax == float(data.min()):
        raise CandidateError("CDI volume is constant, half-max threshold is degenerate")
    m = (data > cmax / 2).astype(np.float32)
    return CandidateMask(cdi.with_data(m, "cdi_mask", is_mask=True, meta={"cdi_max": cmax}), cmax)


def _normalize_slice(case: PatientCase, z: int):
    pm = case.prostate_mask.data[z] > 0
    chans, degenerate = [], []
    for i, name in enumerate(CHANNELS):
        img = getattr(case, name).data[z].astype(np.float64)
        vals = img[pm]
        sd = vals.std()
        if sd > 0 and np.isfinite(sd):
            chans.append((img - vals.mean()) / sd)
        else:
            chans.append(np.zeros_like(img))
            degenerate.append(i)
    return np.stack(chans), tuple(degenerate)


def _window(stack: np.ndarray, y: int, x: int, size: int) -> np.ndarray:
    """(C, size, size) window with rows y-size/2 .. y+size/2-1, reflected at the slice edge."""
    half = size // 2
    pad = np.pad(stack, ((0, 0), (half, half), (half, half)), mode="symmetric")
    return pad[:, y:y + size, x:x + size]


def extract_candidates(case: PatientCase, mask: CandidateMask, healthy_grid_stride: int | None = None,
                       cfg: CandidateConfig = CandidateConfig()) -> list[Candidate]:
    """Thresholded-CDI components plus grid-sampled healthy tissue, one patch each."""
    if healthy_grid_stride is not None:
        cfg = replace(cfg, healthy_grid_stride=healthy_grid_stride)
    if mask.mask.dims != case.prostate_mask.dims:
        raise CandidateError(f"mask dims {mask.mask.dims} differ from case dims {case.prostate_mask.dims}")
    prostate = case.prostate_mask.data > 0
    tumour = case.tumour_mask.data > 0
    if not prostate.any():
        raise CandidateError(f"{case.patient_id}: empty prostate mask")
    cand_mask = (mask.mask.data > 0) & prostate
    P, W = cfg.patch_size, cfg.context_size
    crop = (W - P) // 2
    out: list[Candidate] = []

    def make(stack, degenerate, x, y, z, label, source):
        ctx = _window(stack, y, x, W).astype(np.float32)
        patch = np.ascontiguousarray(ctx[:, crop:crop + P, crop:crop + P])
        return Candidate(case.patient_id, (x, y, z), label, 0, patch, source, degenerate, ctx)

    nz = prostate.shape[0]
    for z in range(nz):
        if not prostate[z].any():
            continue
        stack, degenerate = _normalize_slice(case, z)
        labels, n = ndimage.label(cand_mask[z], structure=_EIGHT_CONNECTED)
        for k in range(1, n + 1):
            ys, xs = np.nonzero(labels == k)
            frac = tumour[z][ys, xs].mean()
            label = CANCEROUS if frac >= cfg.overlap_threshold else HEALTHY
            cy, cx = int(np.floor(ys.mean() + 0.5)), int(np.floor(xs.mean() + 0.5))
            out.append(make(stack, degenerate, cx, cy, z, label, "component"))
        allowed = prostate[z] & ~ndimage.binary_dilation(
            tumour[z], structure=_EIGHT_CONNECTED, iterations=cfg.tumour_dilation) \
            if cfg.tumour_dilation > 0 else prostate[z] & ~tumour[z]
        s = cfg.healthy_grid_stride
        for gy in range(s // 2, allowed.shape[0], s):
            for gx in range(s // 2, allowed.shape[1], s):
                if allowed[gy, gx]:
                    out.append(make(stack, degenerate, gx, gy, z, HEALTHY, "grid"))
    return out


def rotate_patch(context: np.ndarray, k: int, patch_size: int) -> np.ndarray:
    """Rotate a (C, W, W) context by k*45 degrees CCW about its centre and crop to patch_size.

    Multiples of 90 degrees are exact index permutations; odd k uses bilinear
    interpolation with mirrored out-of-window samples.
    """
    W = context.shape[-1]
    crop = (W - patch_size) // 2
    base = context[:, crop:crop + patch_size, crop:crop + patch_size]
    if k % 2 == 0:
        return np.ascontiguousarray(np.rot90(base, k // 2, axes=(1, 2)))
    theta = np.deg2rad(45.0 * k)
    c, s = np.cos(theta), np.sin(theta)
    centre_p = (patch_size - 1) / 2
    centre_w = (W - 1) / 2
    ii, jj = np.meshgrid(np.arange(patch_size) - centre_p, np.arange(patch_size) - centre_p, indexing="ij")
    src_y = ii * c + jj * s + centre_w
    src_x = jj * c - ii * s + centre_w
    out = np.stack([
        ndimage.map_coordinates(ch.astype(np.float64), [src_y, src_x], order=1, mode="mirror")
        for ch in context
    ])
    return out.astype(context.dtype)


def augment_rotations(cands: list[Candidate]) -> list[Candidate]:
    out = []
    for cand in cands:
        if cand.rotation_index != 0:
            raise CandidateError(f"{cand.candidate_id}: already augmented")
        if cand.context is None:
            raise CandidateError(f"{cand.candidate_id}: no context window to rotate from")
        P = cand.patch.shape[-1]
        for k in range(N_ROTATIONS):
            patch = cand.patch if k == 0 else rotate_patch(cand.context, k, P)
            out.append(replace(cand, rotation_index=k, patch=patch, context=None))
    return out


def family_priority(seed: int, family_id: str) -> int:
    """Seeded sort key; subset-consistent, so nested pools select nested sets."""
    h = hashlib.blake2b(f"{int(seed)}:{family_id}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def _families(cands):
    fams: dict[str, Candidate] = {}
    for c in cands:
        fams.setdefault(c.family_id, c)
    return fams


def balanced_families(cands: list[Candidate], seed: int) -> list[str]:
    """All cancerous families plus an equal number of healthy ones, chosen by seeded priority."""
    fams = _families(cands)
    canc = sorted(f for f, c in fams.items() if c.is_cancerous)
    if not canc:
        raise CandidateError("no cancerous candidates to balance against")
    healthy = sorted((f for f, c in fams.items() if not c.is_cancerous),
                     key=lambda f: (family_priority(seed, f), f))
    return sorted(canc + healthy[:len(canc)])


def balance_split(cands: list[Candidate], seed: int, test_patients=()) -> tuple[list[Candidate], list[Candidate]]:
    """Balanced (train, test) partition by patient.

    Train keeps every rotation of each selected family; test keeps only
    rotation 0.  Partitioning is by patient, so rotation families never
    straddle the split.
    """
    test_patients = set(test_patients)
    train_pool = [c for c in cands if c.patient_id not in test_patients]
    test_pool = [c for c in cands if c.patient_id in test_patients]
    keep = set(balanced_families(train_pool, seed))
    train = [c for c in train_pool if c.family_id in keep]
    test = []
    if test_pool:
        keep_t = set(balanced_families(test_pool, seed))
        test = [c for c in test_pool if c.family_id in keep_t and c.rotation_index == 0]
    return train, test


def write_candidates(cands: list[Candidate], directory) -> None:
    """``patches.bin`` (little-endian float32 patches back to back) plus ``index.jsonl``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    offset = 0
    with open(d / "patches.bin", "wb") as blob, open(d / "index.jsonl", "w") as idx:
        for c in cands:
            raw = c.patch.astype("<f4").tobytes(order="C")
            rec = {
                "candidate_id": c.candidate_id,
                "family_id": c.family_id,
                "patient_id": c.patient_id,
                "centroid": list(c.centroid),
                "label": c.label,
                "rotation_index": c.rotation_index,
                "source": c.source,
                "degenerate_channels": list(c.degenerate_channels),
                "offset": offset,
                "shape": list(c.patch.shape),
            }
            blob.write(raw)
            idx.write(json.dumps(rec, sort_keys=True) + "\n")
            offset += len(raw)


def read_candidates(directory) -> list[Candidate]:
    d = Path(directory)
    raw = (d / "patches.bin").read_bytes()
    out = []
    with open(d / "index.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            shape = tuple(rec["shape"])
            n = int(np.prod(shape)) * 4
            o = rec["offset"]
            if o + n > len(raw):
                raise CandidateError(f"{rec['candidate_id']}: patch blob truncated")
            patch = np.frombuffer(raw[o:o + n], dtype="<f4").astype(np.float32).reshape(shape)
            out.append(Candidate(rec["patient_id"], tuple(rec["centroid"]), rec["label"],
                                 rec["rotation_index"], patch, rec["source"],
                                 tuple(rec["degenerate_channels"])))
    return out


def candidate_counts(cands: list[Candidate]) -> dict:
    orig = [c for c in cands if c.rotation_index == 0]
    return {
        "cancerous": sum(c.is_cancerous for c in orig),
        "healthy": sum(not c.is_cancerous for c in orig),
        "cancerous_augmented": sum(c.is_cancerous for c in cands),
        "healthy_augmented": sum(not c.is_cancerous for c in cands),
    }
