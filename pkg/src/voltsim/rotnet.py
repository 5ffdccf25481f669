"""Offline Hadamard weight rotation for transformer residual streams.

The rotation re-expresses the residual stream in a rotated basis: writer
weights (attention output, MLP down, embeddings) are right-multiplied by H,
reader weights (Q/K/V, gate/up, head) are left-multiplied by H transpose.
RMS normalization commutes because orthonormal rotations preserve the row
L2 norm, so the full-precision function is unchanged while per-channel
activation outliers spread across the whole width.

Norm gain vectors must be absorbed into the adjacent weights first; a model
using LayerNorm in rotated positions cannot be folded (the mean subtraction
and bias do not commute with rotation) and is rejected.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tinynn.models import ControllerModel, PlannerModel, _TransformerCore

__all__ = [
    "HadamardMatrix",
    "RotationPlan",
    "OutlierProfile",
    "UnsupportedModelError",
    "RotationStateError",
    "DegenerateInputError",
    "hadamard",
    "fold_norm_gains",
    "make_plan",
    "apply_rotation",
    "outlier_profile",
    "residual_profiles",
]


class UnsupportedModelError(ValueError):
    pass


class RotationStateError(RuntimeError):
    pass


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class HadamardMatrix:
    order: int
    entries: np.ndarray


@dataclass(frozen=True)
class RotationPlan:
    """Per-layer fold targets; reader weights take H^T on the left, writer
    weights take H on the right."""

    hidden_dim: int
    gain_folded: bool
    targets: tuple


@dataclass(frozen=True)
class OutlierProfile:
    max_abs: float
    median_abs: float

    @property
    def ratio(self) -> float:
        return self.max_abs / self.median_abs


def hadamard(order: int) -> HadamardMatrix:
    """Sylvester construction: H_{2k} = H_2 (x) H_k, entries +-1/sqrt(order)."""
    if order < 2 or order & (order - 1):
        raise ValueError(f"order must be a power of two >= 2, got {order}")
    h2 = np.array([[1.0, 1.0], [1.0, -1.0]]) / math.sqrt(2.0)
    h = np.array([[1.0]])
    while h.shape[0] < order:
        h = np.kron(h2, h)
    return HadamardMatrix(order, h)


def _copy_model(model):
    params = {k: v.copy() for k, v in model.params.items()}
    if isinstance(model, ControllerModel):
        clone = ControllerModel(model.spec, params, model.n_actions)
    elif isinstance(model, PlannerModel):
        clone = PlannerModel(model.spec, params)
    else:
        raise UnsupportedModelError(f"cannot rotate a {type(model).__name__}")
    clone.flags = dict(model.flags)
    clone.bounds = dict(model.bounds)
    return clone


def fold_norm_gains(model):
    """Absorb per-channel norm gains into the following weights; gains -> 1.

    Returns a copy; the original is untouched. Only RMS-normalized models
    fold: LayerNorm's bias and mean subtraction block the absorption.
    """
    if not isinstance(model, _TransformerCore):
        raise UnsupportedModelError(f"cannot fold a {type(model).__name__}")
    if model.spec.norm != "rms":
        raise UnsupportedModelError(
            f"{model.spec.norm} normalization cannot be gain-folded"
        )
    out = _copy_model(model)
    p = out.params
    for i in range(out.spec.n_layers):
        pre = f"l{i}."
        g1 = p[pre + "ln1.g"]
        for leaf in ("q", "k", "v"):
            p[pre + leaf] = g1[:, None] * p[pre + leaf]
        p[pre + "ln1.g"] = np.ones_like(g1)
        g2 = p[pre + "ln2.g"]
        for leaf in ("gate", "up"):
            p[pre + leaf] = g2[:, None] * p[pre + leaf]
        p[pre + "ln2.g"] = np.ones_like(g2)
    gf = p["final.g"]
    p["head"] = gf[:, None] * p["head"]
    p["final.g"] = np.ones_like(gf)
    out.flags["gain_folded"] = True
    out.invalidate_qweights()
    return out


def make_plan(model) -> RotationPlan:
    targets = []
    for i in range(model.spec.n_layers):
        pre = f"l{i}."
        targets += [
            (pre + "q", "left"), (pre + "k", "left"), (pre + "v", "left"),
            (pre + "o", "right"),
            (pre + "gate", "left"), (pre + "up", "left"),
            (pre + "down", "right"),
        ]
    # residual writers and readers outside the block stack
    targets += [("embed", "right"), ("pos", "right"), ("head", "left")]
    return RotationPlan(
        hidden_dim=model.spec.hidden_dim,
        gain_folded=bool(model.flags.get("gain_folded")),
        targets=tuple(targets),
    )


def apply_rotation(model, plan: RotationPlan):
    """Rotate the residual stream basis offline. Returns a copy.

    Calibrated anomaly bounds are dropped: output distributions change, so
    the rotated model must be re-calibrated.
    """
    if not plan.gain_folded or not model.flags.get("gain_folded"):
        raise RotationStateError("norm gains must be folded before rotation")
    if model.flags.get("rotated"):
        raise RotationStateError("rotation already applied to this model")
    if model.spec.norm != "rms":
        raise UnsupportedModelError(
            f"{model.spec.norm} normalization does not commute with rotation"
        )
    if plan.hidden_dim != model.spec.hidden_dim:
        raise ValueError("plan hidden_dim does not match the model")
    out = _copy_model(model)
    h = hadamard(model.spec.hidden_dim).entries
    p = out.params
    for name, side in plan.targets:
        if name not in p:
            raise ValueError(f"plan targets unknown weight {name!r}")
        p[name] = h.T @ p[name] if side == "left" else p[name] @ h
    out.flags["rotated"] = True
    out.bounds = {}
    out.invalidate_qweights()
    return out


def outlier_profile(activations: np.ndarray) -> OutlierProfile:
    """Max and median magnitude of a tensor; median over nonzero entries."""
    a = np.abs(np.asarray(activations, dtype=np.float64)).ravel()
    if a.size == 0:
        raise DegenerateInputError("empty activation tensor")
    nz = a[a > 0]
    if nz.size == 0:
        raise DegenerateInputError("all-zero activation tensor")
    return OutlierProfile(float(np.max(a)), float(np.median(nz)))


def residual_profiles(model: PlannerModel, prompts) -> dict:
    """OutlierProfile of each pre-norm residual tensor over a prompt corpus.

    Full-precision walk of the block stack, recording the residual stream
    right before every normalization (the tensors Fig-style skew analysis
    and bound calibration care about).
    """
    from .tinynn import ops

    grabbed: dict = {}

    def grab(site, x):
        grabbed.setdefault(site, []).append(x.copy())

    p, spec = model.params, model.spec

    def norm(x, key):
        if spec.norm == "rms":
            return ops.rmsnorm_fwd(x, p[key + ".g"])[0]
        return ops.layernorm_fwd(x, p[key + ".g"], p[key + ".b"])[0]

    for ids in prompts:
        ids = np.asarray(ids, dtype=np.int64)
        x = (p["embed"][ids] + p["pos"][: len(ids)])[None]
        for i in range(spec.n_layers):
            pre = f"l{i}."
            grab(pre + "ln1", x)
            hcur = norm(x, pre + "ln1")
            q, _ = ops.linear_fwd(hcur, p[pre + "q"])
            k, _ = ops.linear_fwd(hcur, p[pre + "k"])
            v, _ = ops.linear_fwd(hcur, p[pre + "v"])
            a, _ = ops.attention_fwd(q, k, v, spec.n_heads, spec.causal)
            o, _ = ops.linear_fwd(a, p[pre + "o"])
            x = x + o
            grab(pre + "ln2", x)
            h2 = norm(x, pre + "ln2")
            gt, _ = ops.linear_fwd(h2, p[pre + "gate"])
            up, _ = ops.linear_fwd(h2, p[pre + "up"])
            s, _ = ops.silu_fwd(gt)
            d, _ = ops.linear_fwd(s * up, p[pre + "down"])
            x = x + d
        grab("final", x)
    return {
        site: outlier_profile(np.concatenate([t.ravel() for t in tensors]))
        for site, tensors in grabbed.items()
    }
