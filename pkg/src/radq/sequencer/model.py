"""Very deep stochastic convolutional radiomic sequencer.

Every conv layer is: same-size convolution with realized fields, plus a
scalar layer bias, absolute-value rectification, and 3x3 median pooling.
After the last conv layer the maps are averaged over space and passed
through two fully connected layers whose weights are also fixed noise
scaled by a learned gain.  The learned state is three scalars per layer
(psi, gain, bias; FC layers have no psi) plus an optional 500->2 softmax
head used only during discovery.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import fields, ops

MODEL_FORMAT = "radq-sequencer-1"
PAPER_CONV_WIDTHS = (64, 64, 128, 128, 256, 256, 256, 256) + (512,) * 8 + (2000,)
PAPER_FC_WIDTHS = (1000, 500)


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LayerPlan:
    conv_widths: tuple[int, ...]
    fc_widths: tuple[int, ...] = PAPER_FC_WIDTHS
    field_size: int = 5
    in_channels: int = 4
    profile: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "conv_widths", tuple(int(w) for w in self.conv_widths))
        object.__setattr__(self, "fc_widths", tuple(int(w) for w in self.fc_widths))
        if not self.conv_widths or min(self.conv_widths) < 1:
            raise ValueError("conv_widths must be a non-empty list of positive widths")
        if not self.fc_widths or min(self.fc_widths) < 1:
            raise ValueError("fc_widths must be a non-empty list of positive widths")
        if self.field_size < 1 or self.field_size % 2 == 0:
            raise ValueError("field_size must be odd")

    @classmethod
    def paper(cls) -> "LayerPlan":
        return cls(PAPER_CONV_WIDTHS, PAPER_FC_WIDTHS, profile="paper")

    @classmethod
    def desk(cls, factor: int = 8) -> "LayerPlan":
        return cls(tuple(max(1, w // factor) for w in PAPER_CONV_WIDTHS), PAPER_FC_WIDTHS,
                   profile=f"desk/{factor}")

    @property
    def n_conv(self) -> int:
        return len(self.conv_widths)

    @property
    def n_layers(self) -> int:
        return self.n_conv + len(self.fc_widths)

    @property
    def sequence_length(self) -> int:
        return self.fc_widths[-1]

    def conv_shapes(self) -> list[tuple[int, int, int, int]]:
        k = self.field_size
        ins = (self.in_channels,) + self.conv_widths[:-1]
        return [(o, i, k, k) for o, i in zip(self.conv_widths, ins)]

    def fc_shapes(self) -> list[tuple[int, int]]:
        ins = (self.conv_widths[-1],) + self.fc_widths[:-1]
        return list(zip(self.fc_widths, ins))

    def to_json(self) -> dict:
        return {"conv_widths": list(self.conv_widths), "fc_widths": list(self.fc_widths),
                "field_size": self.field_size, "in_channels": self.in_channels, "profile": self.profile}


@dataclass(frozen=True, eq=False)
class SequencerModel:
    plan: LayerPlan
    seed: int
    psi: tuple[float, ...]
    gains: tuple[float, ...]
    biases: tuple[float, ...]
    global_psi: bool = False
    head_w: np.ndarray | None = field(default=None, repr=False)
    head_b: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("psi", "gains", "biases"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if len(self.psi) != self.plan.n_conv:
            raise ModelFormatError(f"expected {self.plan.n_conv} psi values, got {len(self.psi)}")
        if len(self.gains) != self.plan.n_layers or len(self.biases) != self.plan.n_layers:
            raise ModelFormatError(f"expected {self.plan.n_layers} gains and biases")
        for p in self.psi:
            fields.check_psi(p)
        if self.global_psi and len(set(self.psi)) > 1:
            raise ModelFormatError("global_psi models need one shared psi value")
        if not all(np.isfinite(self.gains)) or not all(np.isfinite(self.biases)):
            raise ModelFormatError("gains and biases must be finite")

    @classmethod
    def initial(cls, plan: LayerPlan, seed: int, psi: float = 1.0, gain: float = 1.0,
                bias: float = 0.0, global_psi: bool = False, with_head: bool = False) -> "SequencerModel":
        head_w = np.zeros((2, plan.sequence_length)) if with_head else None
        head_b = np.zeros(2) if with_head else None
        return cls(plan, int(seed), (psi,) * plan.n_conv, (gain,) * plan.n_layers,
                   (bias,) * plan.n_layers, global_psi, head_w, head_b)

    def without_head(self) -> "SequencerModel":
        return replace(self, head_w=None, head_b=None)

    def n_trained_scalars(self) -> int:
        """Learned sequencer scalars, excluding the discovery head."""
        n_psi = 1 if self.global_psi else self.plan.n_conv
        return n_psi + len(self.gains) + len(self.biases)

    def n_head_scalars(self) -> int:
        return 0 if self.head_w is None else self.head_w.size + self.head_b.size

    def n_realized_weights(self) -> int:
        return (sum(int(np.prod(s)) for s in self.plan.conv_shapes())
                + sum(o * i for o, i in self.plan.fc_shapes()))

    def to_json(self) -> dict:
        doc = {
            "format_version": MODEL_FORMAT,
            "plan": self.plan.to_json(),
            "seed": int(self.seed),
            "psi": list(self.psi),
            "gains": list(self.gains),
            "biases": list(self.biases),
            "global_psi": bool(self.global_psi),
        }
        if self.head_w is not None:
            doc["head"] = {"w": self.head_w.tolist(), "b": self.head_b.tolist()}
        return doc

    def model_hash(self) -> str:
        doc = self.without_head().to_json()
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RadiomicSequence:
    values: np.ndarray
    model_hash: str
    candidate_id: str = ""


@lru_cache(maxsize=4)
def _noise_bank(seed: int, plan: LayerPlan):
    conv = [fields.field_noise(seed, l, s[0], s[1:]) for l, s in enumerate(plan.conv_shapes())]
    fc = [fields.field_noise(seed, plan.n_conv + m, o, (i,)) for m, (o, i) in enumerate(plan.fc_shapes())]
    for a in conv + fc:
        a.flags.writeable = False
    return conv, fc


@dataclass
class Realization:
    model: SequencerModel
    conv_w: list
    conv_cache: list
    fc_w: list
    fc_scale: list


def realize(model: SequencerModel) -> Realization:
    conv_noise, fc_noise = _noise_bank(int(model.seed), model.plan)
    conv_w, conv_cache = [], []
    for l, noise in enumerate(conv_noise):
        w, cache = fields.realize_fields(noise, model.psi[l], model.gains[l])
        conv_w.append(w)
        conv_cache.append(cache)
    fc_w, fc_scale = [], []
    for m, noise in enumerate(fc_noise):
        scale = 1.0 / np.sqrt(noise.shape[1])
        fc_w.append(model.gains[model.plan.n_conv + m] * scale * noise)
        fc_scale.append(scale)
    return Realization(model, conv_w, conv_cache, fc_w, fc_scale)


def _as_batch(patches, dtype=np.float64) -> np.ndarray:
    x = np.asarray(patches, dtype=dtype)
    if x.ndim == 3:
        x = x[None]
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))  # (B, C, H, W) -> (B, H, W, C)


def forward_batch(real: Realization, patches, keep_tape: bool = False, dtype=np.float64):
    """Sequences ``(B, L)`` for patches ``(B, C, H, W)``; optionally the activation tape.

    ``dtype`` sets the arithmetic precision; backward needs float64.
    """
    model = real.model
    dtype = np.dtype(dtype).type
    x = _as_batch(patches, dtype)
    if x.shape[-1] != model.plan.in_channels:
        raise ValueError(f"expected {model.plan.in_channels} channels, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("patch contains non-finite values")
    tape = {"conv_in": [], "conv_z": [], "conv_out": []}
    for l, w in enumerate(real.conv_w):
        z = ops.conv2d(x, w.astype(dtype, copy=False)) + dtype(model.biases[l])
        out = ops.median_pool(ops.avreu(z))
        if keep_tape:
            tape["conv_in"].append(x)
            tape["conv_z"].append(z)
            tape["conv_out"].append(out)
        x = out
    h = x.mean(axis=(1, 2))
    tape["fc_in"], tape["fc_z"] = [], []
    for m, w in enumerate(real.fc_w):
        z = h @ w.astype(dtype, copy=False).T + dtype(model.biases[model.plan.n_conv + m])
        if keep_tape:
            tape["fc_in"].append(h)
            tape["fc_z"].append(z)
        h = ops.avreu(z)
    return (h, tape) if keep_tape else h


def backward_batch(real: Realization, tape, dseq: np.ndarray) -> dict:
    """Gradients of ``sum(dseq * seq)`` with respect to psi, gains and biases."""
    model, plan = real.model, real.model.plan
    n_conv = plan.n_conv
    dgain = np.zeros(plan.n_layers)
    dbias = np.zeros(plan.n_layers)
    dpsi = np.zeros(n_conv)
    conv_noise, fc_noise = _noise_bank(int(model.seed), plan)
    dh = dseq
    for m in range(len(real.fc_w) - 1, -1, -1):
        dz = ops.avreu_grad(tape["fc_z"][m], dh)
        dbias[n_conv + m] = dz.sum()
        dw = dz.T @ tape["fc_in"][m]
        dgain[n_conv + m] = real.fc_scale[m] * float(np.sum(dw * fc_noise[m]))
        dh = dz @ real.fc_w[m]
    last = tape["conv_out"][-1]
    H, W = last.shape[1:3]
    dx = np.broadcast_to(dh[:, None, None, :] / (H * W), last.shape)
    for l in range(n_conv - 1, -1, -1):
        z = tape["conv_z"][l]
        a = ops.avreu(z)
        da = ops.median_pool_backward(a, tape["conv_out"][l], dx)
        dz = ops.avreu_grad(z, da)
        dbias[l] = dz.sum()
        dxin, dw = ops.conv2d_backward(tape["conv_in"][l], real.conv_w[l], dz, need_dx=l > 0)
        dpsi[l], dgain[l] = fields.field_param_grads(dw, conv_noise[l], model.psi[l], model.gains[l],
                                                     real.conv_cache[l])
        dx = dxin
    return {"psi": dpsi, "gains": dgain, "biases": dbias}


def forward(model: SequencerModel, patch, candidate_id: str = "") -> RadiomicSequence:
    seq = forward_batch(realize(model), np.asarray(patch)[None])[0]
    if seq.shape[0] != model.plan.sequence_length or not np.all(np.isfinite(seq)):
        raise FloatingPointError("sequencer produced a non-finite or mis-sized sequence")
    return RadiomicSequence(seq, model.model_hash(), candidate_id)


def sequence_batch(model: SequencerModel, candidates, threads: int = 1, chunk: int = 8,
                   dtype=np.float64) -> list[RadiomicSequence]:
    """Sequence candidates in order.

    Work is cut into fixed-size chunks independent of ``threads`` so every
    candidate goes through the same arithmetic whatever the worker count.
    """
    real = realize(model)
    mh = model.model_hash()
    cands = list(candidates)
    chunks = [cands[i:i + chunk] for i in range(0, len(cands), chunk)]

    def run(part):
        return forward_batch(real, np.stack([c.patch for c in part]), dtype=dtype).astype(np.float64)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(p) for p in chunks]
    out = []
    for part, seqs in zip(chunks, results):
        for c, s in zip(part, seqs):
            if not np.all(np.isfinite(s)):
                raise FloatingPointError(f"{c.candidate_id}: non-finite sequence")
            out.append(RadiomicSequence(s, mh, c.candidate_id))
    return out


def save_model(model: SequencerModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_json(), indent=2, sort_keys=True))


def load_model(path) -> SequencerModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != MODEL_FORMAT:
        raise ModelFormatError(f"{path}: unknown sequencer format version {doc.get('format_version')!r}")
    try:
        p = doc["plan"]
        plan = LayerPlan(tuple(p["conv_widths"]), tuple(p["fc_widths"]), int(p["field_size"]),
                         int(p["in_channels"]), p.get("profile", "custom"))
        head = doc.get("head")
        return SequencerModel(
            plan, int(doc["seed"]), tuple(doc["psi"]), tuple(doc["gains"]), tuple(doc["biases"]),
            bool(doc.get("global_psi", False)),
            None if head is None else np.asarray(head["w"], dtype=np.float64),
            None if head is None else np.asarray(head["b"], dtype=np.float64),
        )
    except fields.PsiBoundsError as exc:
        raise ModelFormatError(f"{path}: {exc}") from None
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: malformed model document ({exc})") from None
