"""Sequencer discovery: fit the per-layer scalars and a temporary softmax
head by scaled conjugate gradient on mean cross-entropy.

The base noise stays fixed, so realized weights are a differentiable
function of psi (through the smoothing kernel) and of the gains.  psi is
optimised through a logistic map onto ``[PSI_MIN, PSI_MAX]`` so every
iterate is a valid model.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..candidates import CANCEROUS, Candidate, family_priority
from ..learn.scg import ScgConfig, ScgError, scg_minimize
from . import fields, ops
from .model import LayerPlan, SequencerModel, _as_batch, _noise_bank, backward_batch, forward_batch, realize

log = logging.getLogger(__name__)

_SPAN = fields.PSI_MAX - fields.PSI_MIN


class DiscoveryError(RuntimeError):
    pass


@dataclass(frozen=True)
class DiscoveryConfig:
    max_iter: int = 10
    max_patches: int = 48  # discovery subset size, half cancerous
    psi_init: float = 1.0
    global_psi: bool = False
    calibrate: bool = True  # rescale gains so every pre-activation has unit RMS before training
    chunk: int = 8
    scg: ScgConfig = field(default_factory=lambda: ScgConfig(max_iter=10))

    def __post_init__(self):
        fields.check_psi(self.psi_init)
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")
        if self.max_patches < 2:
            raise ValueError("max_patches must be at least 2")
        if self.chunk < 1:
            raise ValueError("chunk must be positive")


@dataclass
class DiscoveryLog:
    losses: list[float]
    successes: list[bool]
    grad_norms: list[float]
    lambdas: list[float]
    initial_loss: float
    converged: bool
    message: str
    n_patches: int
    candidate_ids: list[str]

    def to_json(self) -> dict:
        return {
            "losses": self.losses, "successes": self.successes, "grad_norms": self.grad_norms,
            "lambdas": self.lambdas, "initial_loss": self.initial_loss, "converged": self.converged,
            "message": self.message, "n_patches": self.n_patches, "candidate_ids": self.candidate_ids,
        }


def discovery_subset(cands: list[Candidate], seed: int, max_patches: int) -> list[Candidate]:
    """Balanced, seeded subset of (possibly augmented) candidates, sorted by id."""
    key = lambda c: (family_priority(seed, c.candidate_id), c.candidate_id)
    canc = sorted((c for c in cands if c.is_cancerous), key=key)
    healthy = sorted((c for c in cands if not c.is_cancerous), key=key)
    n = min(len(canc), len(healthy), max_patches // 2)
    if n == 0:
        raise DiscoveryError("discovery needs at least one candidate of each class")
    return sorted(canc[:n] + healthy[:n], key=lambda c: c.candidate_id)


def calibrate_gains(model: SequencerModel, patches) -> SequencerModel:
    """Layer-sequential gain calibration.

    Walks the network once with zero biases and sets each gain so the layer's
    pre-activation has unit RMS over ``patches``.  Without it the activation
    scale compounds over 19 layers.
    """
    plan = model.plan
    conv_noise, fc_noise = _noise_bank(int(model.seed), plan)
    gains = []
    x = _as_batch(patches)
    for l, noise in enumerate(conv_noise):
        w, _ = fields.realize_fields(noise, model.psi[l], 1.0)
        z = ops.conv2d(x, w)
        rms = float(np.sqrt(np.mean(z ** 2)))
        g = 1.0 / rms if rms > 0 else 1.0
        gains.append(g)
        x = ops.median_pool(ops.avreu(z * g))
    h = x.mean(axis=(1, 2))
    for noise in fc_noise:
        z = h @ (noise / np.sqrt(noise.shape[1])).T
        rms = float(np.sqrt(np.mean(z ** 2)))
        g = 1.0 / rms if rms > 0 else 1.0
        gains.append(g)
        h = ops.avreu(z * g)
    return replace(model, gains=tuple(gains), biases=(0.0,) * plan.n_layers)


def loss_and_grads(model: SequencerModel, patches, labels, chunk: int = 8):
    """Mean cross-entropy of the head over the batch, and gradients for every scalar class.

    Chunks are reduced in input order, so the result is independent of how
    the caller schedules work.
    """
    if model.head_w is None:
        raise DiscoveryError("model has no discovery head")
    y = np.asarray(labels, dtype=np.int64)
    patches = np.asarray(patches)
    n = len(y)
    if n == 0:
        raise DiscoveryError("empty training set")
    real = realize(model)
    W, b = model.head_w, model.head_b
    total = 0.0
    g = {"psi": np.zeros(model.plan.n_conv), "gains": np.zeros(model.plan.n_layers),
         "biases": np.zeros(model.plan.n_layers), "head_w": np.zeros_like(W), "head_b": np.zeros_like(b)}
    for s in range(0, n, chunk):
        seq, tape = forward_batch(real, patches[s:s + chunk], keep_tape=True)
        logits = seq @ W.T + b
        logits -= logits.max(axis=1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        yy = y[s:s + chunk]
        total += -float(logp[np.arange(len(yy)), yy].sum())
        dlogits = np.exp(logp)
        dlogits[np.arange(len(yy)), yy] -= 1.0
        dlogits /= n
        g["head_w"] += dlogits.T @ seq
        g["head_b"] += dlogits.sum(axis=0)
        part = backward_batch(real, tape, dlogits @ W)
        for k in ("psi", "gains", "biases"):
            g[k] += part[k]
    return total / n, g


def _psi_to_z(psi):
    u = (np.asarray(psi, dtype=np.float64) - fields.PSI_MIN) / _SPAN
    u = np.clip(u, 1e-12, 1 - 1e-12)
    return np.log(u / (1 - u))


def _z_to_psi(z):
    u = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z)))  # logistic, overflow-free
    return np.clip(fields.PSI_MIN + _SPAN * u, fields.PSI_MIN, fields.PSI_MAX), _SPAN * u * (1 - u)


class _Packing:
    def __init__(self, model: SequencerModel):
        self.model = model
        plan = model.plan
        self.n_psi = 1 if model.global_psi else plan.n_conv
        self.sizes = [self.n_psi, plan.n_layers, plan.n_layers, model.head_w.size, model.head_b.size]

    def pack(self, model: SequencerModel) -> np.ndarray:
        psi = np.asarray(model.psi[:self.n_psi])
        return np.concatenate([_psi_to_z(psi), model.gains, model.biases,
                               model.head_w.ravel(), model.head_b])

    def unpack(self, theta):
        z, gains, biases, hw, hb = np.split(theta, np.cumsum(self.sizes)[:-1])
        psi, dpsi_dz = _z_to_psi(z)
        if self.model.global_psi:
            psi = np.repeat(psi, self.model.plan.n_conv)
        m = replace(self.model, psi=tuple(psi), gains=tuple(gains), biases=tuple(biases),
                    head_w=hw.reshape(self.model.head_w.shape).copy(), head_b=hb.copy())
        return m, dpsi_dz

    def grad_vector(self, g, dpsi_dz) -> np.ndarray:
        dpsi = g["psi"].sum(keepdims=True) if self.model.global_psi else g["psi"]
        return np.concatenate([dpsi * dpsi_dz, g["gains"], g["biases"], g["head_w"].ravel(), g["head_b"]])


def discover(train: list[Candidate], plan: LayerPlan, seed: int,
             config: DiscoveryConfig = DiscoveryConfig()) -> tuple[SequencerModel, DiscoveryLog]:
    """Fit a sequencer on labelled candidates; returns the headless model and the training log."""
    if not train:
        raise DiscoveryError("empty training set")
    subset = discovery_subset(train, seed, config.max_patches)
    patches = np.stack([c.patch for c in subset]).astype(np.float64)
    labels = np.array([1 if c.label == CANCEROUS else 0 for c in subset])
    model = SequencerModel.initial(plan, seed, psi=config.psi_init, global_psi=config.global_psi,
                                   with_head=True)
    if config.calibrate:
        model = calibrate_gains(model, patches)
    pk = _Packing(model)

    def objective(theta):
        m, dpsi_dz = pk.unpack(theta)
        loss, g = loss_and_grads(m, patches, labels, config.chunk)
        if not np.isfinite(loss):
            raise DiscoveryError(f"non-finite discovery loss ({loss}) at psi={m.psi}, gains={m.gains}")
        return loss, pk.grad_vector(g, dpsi_dz)

    scg_cfg = replace(config.scg, max_iter=config.max_iter)
    try:
        res = scg_minimize(objective, pk.pack(model), scg_cfg,
                           callback=lambda s: log.info("discover iter %d loss=%.6f |g|=%.3g ok=%s",
                                                       s.iteration, s.value, s.grad_norm, s.success))
    except ScgError as exc:
        raise DiscoveryError(f"discovery aborted: {exc}; last losses "
                             f"{[round(s.value, 6) for s in exc.trace[-3:]]}") from exc
    final, _ = pk.unpack(res.x)
    trace = res.trace
    dlog = DiscoveryLog(
        losses=[s.value for s in trace], successes=[s.success for s in trace],
        grad_norms=[s.grad_norm for s in trace], lambdas=[s.lam for s in trace],
        initial_loss=trace[0].value, converged=res.converged, message=res.message,
        n_patches=len(subset), candidate_ids=[c.candidate_id for c in subset],
    )
    return final.without_head(), dlog
