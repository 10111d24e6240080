"""Multi-exit class activation maps, exit weighting and inverted-CAM masking.

Exits are keyed by their stage number throughout. Every exit uses the class
predicted at the final exit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .data import bilinear_resize
from .errors import ShapeError
from .model import ExitOutputs, Model, forward
from .tensor import softmax_np

FLAT_TOL = 1e-6


@dataclass
class CamBundle:
    predicted_class: int
    exit_mask: tuple[int, ...]
    cams: dict[int, np.ndarray]  # selected exits only, H_e x W_e in [0, 1]
    weights: dict[int, float]  # every configured exit; zero outside the mask
    aggregated: np.ndarray  # H x W in [0, 1]
    upsampled: dict[int, np.ndarray] = field(default_factory=dict)


def class_probability_map(activation_map: np.ndarray, predicted: int) -> np.ndarray:
    """Per-pixel softmax across classes, channel ``predicted``. Input C x H x W (or 1 x C x H x W)."""
    m = np.asarray(activation_map, dtype=np.float64)
    if m.ndim == 4:
        if m.shape[0] != 1:
            raise ShapeError(f"expected a single activation map, got {m.shape}")
        m = m[0]
    if m.ndim != 3:
        raise ShapeError(f"activation map must be C x H x W, got {m.shape}")
    if m.shape[0] < 2:
        raise ValueError("class softmax needs at least two classes")
    if not 0 <= predicted < m.shape[0]:
        raise ValueError(f"class {predicted} outside [0, {m.shape[0]})")
    return softmax_np(m, axis=0)[predicted]


def minmax_rescale(m: np.ndarray) -> np.ndarray:
    """Stretch to [0, 1]; maps flatter than ``FLAT_TOL`` become all zeros."""
    lo, hi = m.min(), m.max()
    if hi - lo <= FLAT_TOL:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def exit_cam(activation_map: np.ndarray, predicted: int) -> np.ndarray:
    return minmax_rescale(class_probability_map(activation_map, predicted))


def exit_weights(logits: Mapping[int, np.ndarray], predicted: int, exit_mask: Iterable[int]) -> dict[int, float]:
    """Softmax over the selected exits of their predicted-class logit."""
    mask = sorted(set(exit_mask))
    if not mask:
        raise ValueError("exit mask is empty")
    unknown = [e for e in mask if e not in logits]
    if unknown:
        raise ValueError(f"exit mask refers to unknown exits {unknown}; available {sorted(logits)}")
    z = np.array([float(np.asarray(logits[e]).reshape(-1)[predicted]) for e in mask])
    w = softmax_np(z)
    out = {e: 0.0 for e in logits}
    out.update({e: float(wi) for e, wi in zip(mask, w)})
    return out


def upsample_bilinear(m: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got {m.shape}")
    if size[0] < m.shape[0] or size[1] < m.shape[1]:
        raise ValueError(f"cannot upsample {m.shape} to smaller size {size}")
    if tuple(size) == m.shape:
        return m.copy()
    return bilinear_resize(m, size)


def aggregate(
    cams: Mapping[int, np.ndarray], weights: Mapping[int, float], size: tuple[int, int]
) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Weighted sum of upsampled CAMs; returns the map and the upsampled inputs."""
    total = sum(weights[e] for e in cams)
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"exit weights must sum to 1, got {total}")
    up = {e: upsample_bilinear(c, size) for e, c in cams.items()}
    agg = np.zeros(size)
    for e, u in up.items():
        if weights[e] != 0.0:
            agg += weights[e] * u
    return np.clip(agg, 0.0, 1.0), up


def mask_image(x: np.ndarray, mhat: np.ndarray) -> np.ndarray:
    """``x * (1 - mhat)`` with the mask broadcast over channels (and batch)."""
    x = np.asarray(x, dtype=np.float32)
    mhat = np.asarray(mhat)
    if x.shape[-2:] != mhat.shape:
        raise ShapeError(f"mask {mhat.shape} does not match image {x.shape}")
    return (x * (1.0 - mhat).astype(np.float32)).astype(np.float32)


def bundle_from_outputs(
    outputs: ExitOutputs, index: int, size: tuple[int, int], exit_mask: Iterable[int] | None = None
) -> CamBundle:
    """CAM bundle for sample ``index`` of a (possibly batched) forward result."""
    mask = tuple(sorted(set(outputs.exits if exit_mask is None else exit_mask)))
    logits = outputs.logits_by_exit(index)
    maps = outputs.maps_by_exit(index)
    predicted = int(np.argmax(logits[outputs.exits[-1]]))
    weights = exit_weights(logits, predicted, mask)
    cams = {e: exit_cam(maps[e], predicted) for e in mask}
    agg, up = aggregate(cams, weights, size)
    return CamBundle(predicted, mask, cams, weights, agg, up)


def cam_pipeline(model: Model, x: np.ndarray, exit_mask: Iterable[int] | None = None) -> tuple[CamBundle, np.ndarray]:
    """forward -> predicted class -> per-exit CAMs -> weights -> aggregate -> masked image."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    outputs = forward(model, x)
    bundle = bundle_from_outputs(outputs, 0, x.shape[-2:], exit_mask)
    return bundle, mask_image(x, bundle.aggregated)
