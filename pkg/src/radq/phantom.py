"""Synthetic multi-parametric prostate MRI cohorts with known ground truth."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from math import erfc, sqrt
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import mri_model
from .mri_model import BValueSchedule, CDIConfig
from .volume_io import CohortManifest, PatientCase, Volume, save_cohort

AGE_RANGE = (53, 83)
D_CLIP_SIGMAS = 2.5
# (z, y, x) smoothing of the healthy diffusivity texture, in voxels
HEALTHY_D_CORRELATION = (0.5, 2.0, 2.0)


@dataclass(frozen=True)
class PhantomConfig:
    n_patients: int = 20
    dims: tuple[int, int, int] = (128, 128, 8)
    voxel_size_mm: tuple[float, float, float] = (1.56, 1.56, 3.0)
    b_values: tuple[float, ...] = (0.0, 100.0, 400.0, 1000.0)
    healthy_d_mean: float = 1.6e-3
    healthy_d_std: float = 0.15e-3
    tumour_d_mean: float = 0.9e-3
    tumour_d_std: float = 0.10e-3
    background_d: float = 2.2e-3
    tumours_per_patient: tuple[int, int] = (1, 3)
    tumour_radius_mm: tuple[float, float] = (4.0, 10.0)
    prostate_semi_axes_mm: tuple[float, float, float] = (40.0, 32.0, 12.0)
    s0_prostate: float = 1000.0
    s0_background: float = 600.0
    s0_variation: float = 0.04
    t2w_tumour_factor: float = 0.85
    noise_sigma: float = 0.0
    chb_b_target: float = 2000.0
    cdi_window_radius: int = 1
    seed: int = 7

    def __post_init__(self):
        for name in ("dims", "voxel_size_mm", "b_values", "tumours_per_patient",
                     "tumour_radius_mm", "prostate_semi_axes_mm"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        validate_config(self)

    @property
    def schedule(self) -> BValueSchedule:
        return BValueSchedule(self.b_values)


def validate_config(cfg: PhantomConfig) -> None:
    def bad(field_name, msg):
        raise ValueError(f"PhantomConfig.{field_name}: {msg}")

    if int(cfg.n_patients) < 1:
        bad("n_patients", f"must be a positive integer, got {cfg.n_patients}")
    if len(cfg.dims) != 3 or any(int(d) < 1 for d in cfg.dims):
        bad("dims", f"must be three positive integers, got {cfg.dims}")
    if any(v <= 0 for v in cfg.voxel_size_mm):
        bad("voxel_size_mm", "must be strictly positive")
    try:
        BValueSchedule(cfg.b_values)
    except ValueError as exc:
        bad("b_values", str(exc))
    if not cfg.tumour_d_mean < cfg.healthy_d_mean:
        bad("tumour_d_mean", "must be below healthy_d_mean")
    if not cfg.healthy_d_std < cfg.healthy_d_mean / 3:
        bad("healthy_d_std", "must be below healthy_d_mean / 3")
    if not cfg.tumour_d_std < cfg.tumour_d_mean / 3:
        bad("tumour_d_std", "must be below tumour_d_mean / 3")
    if min(cfg.healthy_d_std, cfg.tumour_d_std) < 0:
        bad("healthy_d_std", "standard deviations must be nonnegative")
    lo, hi = cfg.tumours_per_patient
    if not 1 <= lo <= hi:
        bad("tumours_per_patient", f"need 1 <= min <= max, got {cfg.tumours_per_patient}")
    rlo, rhi = cfg.tumour_radius_mm
    if not 0 < rlo <= rhi:
        bad("tumour_radius_mm", f"need 0 < min <= max, got {cfg.tumour_radius_mm}")
    if cfg.noise_sigma < 0:
        bad("noise_sigma", "must be nonnegative")
    if not cfg.chb_b_target > max(cfg.b_values):
        bad("chb_b_target", "must exceed the largest acquired b-value")
    for axis, (n, vox, semi) in enumerate(zip(cfg.dims, cfg.voxel_size_mm, cfg.prostate_semi_axes_mm)):
        if semi <= 0:
            bad("prostate_semi_axes_mm", "must be positive")
        # in-plane needs a margin for patch extraction; z only needs to hold the ellipsoid centre
        need = 2 * semi / vox + (4 if axis < 2 else 0)
        if axis < 2 and n < need:
            bad("dims", f"axis {axis} has {n} voxels, prostate ellipsoid needs at least {need:.0f}")


@dataclass(frozen=True)
class TumourComponent:
    center_vox: tuple[float, float, float]  # (x, y, z), voxel units
    radius_mm: float
    mean_d: float


@dataclass
class GroundTruth:
    tumours: dict[str, list[TumourComponent]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {pid: [asdict(t) for t in comps] for pid, comps in self.tumours.items()}

    @classmethod
    def from_json(cls, doc) -> "GroundTruth":
        return cls({pid: [TumourComponent(tuple(t["center_vox"]), t["radius_mm"], t["mean_d"])
                          for t in comps] for pid, comps in doc.items()})


def _grid_mm(cfg: PhantomConfig):
    nx, ny, nz = cfg.dims
    dx, dy, dz = cfg.voxel_size_mm
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    return x * dx, y * dy, z * dz


def _prostate_center(cfg: PhantomConfig) -> np.ndarray:
    return np.array([(n - 1) / 2 for n in cfg.dims])


def prostate_ellipsoid(cfg: PhantomConfig) -> np.ndarray:
    """Boolean (nz, ny, nx) ellipsoid mask."""
    xm, ym, zm = _grid_mm(cfg)
    c = _prostate_center(cfg) * np.array(cfg.voxel_size_mm)
    a = np.array(cfg.prostate_semi_axes_mm)
    r2 = ((xm - c[0]) / a[0]) ** 2 + ((ym - c[1]) / a[1]) ** 2 + ((zm - c[2]) / a[2]) ** 2
    return r2 <= 1.0


def tumour_weight_map(cfg: PhantomConfig, tumours) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-voxel tumour weight in [0, 1], index of the dominating tumour, and the hard mask.

    Weight is exactly 1 at least half an in-plane voxel inside the sphere,
    exactly 0 half a voxel outside, and follows a narrow Gaussian CDF ramp
    in between.
    """
    xm, ym, zm = _grid_mm(cfg)
    vox = cfg.voxel_size_mm[0]
    alpha = np.zeros(xm.shape)
    owner = np.full(xm.shape, -1, dtype=int)
    hard = np.zeros(xm.shape, dtype=bool)
    ramp = np.vectorize(lambda s: 0.5 * erfc(s / (0.25 * sqrt(2.0))))
    for k, t in enumerate(tumours):
        c = np.array(t.center_vox) * np.array(cfg.voxel_size_mm)
        r = np.sqrt((xm - c[0]) ** 2 + (ym - c[1]) ** 2 + (zm - c[2]) ** 2)
        s = (r - t.radius_mm) / vox
        a = np.where(s <= -0.5, 1.0, 0.0)
        mid = (s > -0.5) & (s < 0.5)
        if mid.any():
            a[mid] = ramp(s[mid])
        better = a > alpha
        alpha = np.where(better, a, alpha)
        owner = np.where(better, k, owner)
        hard |= s <= 0
    return alpha, owner, hard


def _smooth_field(rng, shape, sigma=(1.0, 6.0, 6.0)) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="reflect")
    f -= f.mean()
    sd = f.std()
    return f / sd if sd > 0 else f


def _truncated_normal(rng, mean, std, size=None):
    z = np.clip(rng.standard_normal(size), -D_CLIP_SIGMAS, D_CLIP_SIGMAS)
    return mean + std * z


def _draw_tumours(rng, cfg: PhantomConfig, prostate: np.ndarray) -> list[TumourComponent]:
    lo, hi = cfg.tumours_per_patient
    n = int(rng.integers(lo, hi + 1))
    center = _prostate_center(cfg)
    semi_vox = np.array(cfg.prostate_semi_axes_mm) / np.array(cfg.voxel_size_mm)
    out = []
    while len(out) < n:
        radius = float(rng.uniform(*cfg.tumour_radius_mm))
        # centre inside the inner 60% of the ellipsoid, on a voxel of the mask
        u = rng.uniform(-1, 1, size=3)
        if np.sum(u ** 2) > 1:
            continue
        c = center + 0.6 * u * semi_vox
        c[2] = np.clip(np.round(c[2]), 0, cfg.dims[2] - 1)
        ix, iy, iz = (int(round(c[0])), int(round(c[1])), int(c[2]))
        if not prostate[iz, iy, ix]:
            continue
        mean_d = float(_truncated_normal(rng, cfg.tumour_d_mean, cfg.tumour_d_std))
        out.append(TumourComponent((float(c[0]), float(c[1]), float(c[2])), radius, mean_d))
    return out


def generate_case(cfg: PhantomConfig, index: int) -> tuple[PatientCase, list[TumourComponent]]:
    rng = np.random.default_rng([int(cfg.seed) & 0xFFFFFFFFFFFFFFFF, index])
    shape = cfg.dims[::-1]
    prostate = prostate_ellipsoid(cfg)
    tumours = _draw_tumours(rng, cfg, prostate)
    alpha, owner, hard = tumour_weight_map(cfg, tumours)
    alpha = np.where(prostate, alpha, 0.0)
    tumour_mask = hard & prostate

    s0_tex = _smooth_field(rng, shape)
    s0 = np.where(prostate, cfg.s0_prostate, cfg.s0_background) * (1 + cfg.s0_variation * np.clip(s0_tex, -3, 3))

    healthy_d = cfg.healthy_d_mean + cfg.healthy_d_std * np.clip(
        _smooth_field(rng, shape, sigma=HEALTHY_D_CORRELATION), -D_CLIP_SIGMAS, D_CLIP_SIGMAS)
    background_d = cfg.background_d * (1 + 0.05 * np.clip(_smooth_field(rng, shape), -3, 3))
    tumour_d = np.zeros(shape)
    intra = np.clip(_smooth_field(rng, shape, sigma=(0.5, 2.0, 2.0)), -1.0, 1.0)
    for k, t in enumerate(tumours):
        # keep the voxel values inside the same truncation band as the per-tumour mean
        lo = cfg.tumour_d_mean - D_CLIP_SIGMAS * cfg.tumour_d_std
        hi = cfg.tumour_d_mean + D_CLIP_SIGMAS * cfg.tumour_d_std
        vals = np.clip(t.mean_d + 0.3 * cfg.tumour_d_std * intra, lo, hi)
        tumour_d = np.where(owner == k, vals, tumour_d)
    d = np.where(prostate, (1 - alpha) * healthy_d + alpha * tumour_d, background_d)

    vox = cfg.voxel_size_mm
    dwi = {}
    for b in cfg.b_values:
        sig = s0 * np.exp(-b * d)
        if cfg.noise_sigma > 0:
            sig = np.maximum(sig + rng.normal(0.0, cfg.noise_sigma, shape), 0.0)
        dwi[float(b)] = Volume.from_array(f"dwi_b{int(b)}", sig, vox, meta={"b": float(b)})
    t2 = s0 * (1 - (1 - cfg.t2w_tumour_factor) * alpha)
    if cfg.noise_sigma > 0:
        t2 = np.maximum(t2 + rng.normal(0.0, cfg.noise_sigma, shape), 0.0)

    fit = mri_model.fit_adc_map(dwi)
    chb = mri_model.compute_chb_dwi(fit.adc, fit.s0, cfg.chb_b_target, max(cfg.b_values))
    cdi = mri_model.compute_cdi(dwi, CDIConfig(window_radius=cfg.cdi_window_radius))
    age = int(rng.integers(AGE_RANGE[0], AGE_RANGE[1] + 1))
    case = PatientCase(
        patient_id=f"P{index + 1:03d}",
        age_years=age,
        t2w=Volume.from_array("t2w", t2, vox),
        dwi_by_b=dwi,
        adc=fit.adc,
        chb_dwi=chb,
        cdi=cdi,
        prostate_mask=Volume.from_array("prostate_mask", prostate.astype(np.float32), vox, is_mask=True),
        tumour_mask=Volume.from_array("tumour_mask", tumour_mask.astype(np.float32), vox, is_mask=True),
    )
    return case, tumours


def generate_cohort(cfg: PhantomConfig) -> tuple[CohortManifest, list[PatientCase], GroundTruth]:
    cases, gt = [], GroundTruth()
    for i in range(int(cfg.n_patients)):
        case, tumours = generate_case(cfg, i)
        cases.append(case)
        gt.tumours[case.patient_id] = tumours
    manifest = CohortManifest(tuple((c.patient_id, c.patient_id) for c in cases), int(cfg.seed))
    return manifest, cases, gt


def cohort_summary(cases, cfg: PhantomConfig | None = None) -> dict:
    out = []
    for c in cases:
        vox_mm3 = float(np.prod(c.t2w.voxel_size_mm))
        n_t = int(c.tumour_mask.data.sum())
        ranges = {name: [float(v.data.min()), float(v.data.max())]
                  for name, v in c.volumes().items() if not v.is_mask}
        out.append({
            "patient_id": c.patient_id,
            "age_years": c.age_years,
            "prostate_voxels": int(c.prostate_mask.data.sum()),
            "tumour_voxels": n_t,
            "tumour_volume_mm3": n_t * vox_mm3,
            "intensity_ranges": ranges,
            "adc_qa_nonpositive": int(c.adc.meta.get("qa_nonpositive", 0)),
        })
    doc = {"patients": out}
    if cfg is not None:
        doc["config"] = asdict(cfg)
    return doc


def write_cohort(cfg: PhantomConfig, directory) -> tuple[CohortManifest, list[PatientCase], GroundTruth]:
    """Generate and write ``cohort/``, ``ground_truth.json`` and ``cohort_summary.json``."""
    d = Path(directory)
    manifest, cases, gt = generate_cohort(cfg)
    manifest = save_cohort(cases, cfg.seed, d / "cohort")
    (d / "ground_truth.json").write_text(json.dumps(gt.to_json(), indent=2, sort_keys=True))
    (d / "cohort_summary.json").write_text(json.dumps(cohort_summary(cases, cfg), indent=2, sort_keys=True))
    return manifest, cases, gt
