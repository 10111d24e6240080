"""OOD scores, threshold calibration and the ID/OOD decision rule.

Every scorer is oriented so that a higher score means "more in-distribution";
``classify`` therefore works for all of them.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cam import bundle_from_outputs, mask_image
from .errors import ConfigError, DataError
from .model import ExitOutputs, Model, forward
from .tensor import logsumexp_np, softmax_np

SCORERS = ("mecam", "msp", "energy", "mood_energy")
_ALIASES = {"mood": "mood_energy"}
CHUNK = 64


def canonical_scorer(name: str) -> str:
    name = _ALIASES.get(name.strip(), name.strip())
    if name not in SCORERS:
        raise ConfigError(f"unknown scorer {name!r}; choose from {', '.join(SCORERS)}")
    return name


def mask_label(exit_mask: Sequence[int], all_exits: Sequence[int]) -> str:
    """Scorer label for a mecam run: ``mecam`` for the full mask, else ``mecam@1+3``."""
    mask = tuple(sorted(set(exit_mask)))
    if mask == tuple(sorted(all_exits)):
        return "mecam"
    return "mecam@" + "+".join(str(e) for e in mask)


# --- scores --------------------------------------------------------------------


def feature_shift(v: np.ndarray, v_masked: np.ndarray) -> float:
    """Mean squared difference between two embeddings."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    w = np.asarray(v_masked, dtype=np.float64).reshape(-1)
    if v.shape != w.shape:
        raise ValueError(f"embedding shapes differ: {v.shape} vs {w.shape}")
    return float(np.mean((v - w) ** 2))


def mecam_score(model: Model, x: np.ndarray, exit_mask: Iterable[int] | None = None) -> float:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    out = forward(model, x)
    bundle = bundle_from_outputs(out, 0, x.shape[-2:], exit_mask)
    masked = mask_image(x, bundle.aggregated)
    return feature_shift(out.embedding.data[0], forward(model, masked).embedding.data[0])


def msp_score(logits: np.ndarray) -> float:
    return float(softmax_np(np.asarray(logits).reshape(-1)).max())


def energy_score(logits: np.ndarray) -> float:
    """``logsumexp(logits)``; larger for confident (ID-like) inputs."""
    return float(logsumexp_np(np.asarray(logits).reshape(-1)))


def mood_energy_score(exit_logits: Mapping[int, np.ndarray], exit_index: int | None = None) -> float:
    """Energy of one chosen exit (default: the final exit)."""
    if exit_index is None:
        exit_index = max(exit_logits)
    if exit_index not in exit_logits:
        raise ValueError(f"exit {exit_index} not available; exits are {sorted(exit_logits)}")
    return energy_score(exit_logits[exit_index])


# --- batched scoring --------------------------------------------------------------


@dataclass
class BatchScores:
    predicted: np.ndarray
    scores: dict[str, np.ndarray]


def _score_chunk(model, images, scorers, exit_masks, mood_exit) -> BatchScores:
    out: ExitOutputs = forward(model, images)
    n = len(images)
    final = out.final_logits.data
    res: dict[str, np.ndarray] = {}
    for name in scorers:
        if name == "msp":
            res[name] = np.array([msp_score(final[i]) for i in range(n)])
        elif name == "energy":
            res[name] = np.array([energy_score(final[i]) for i in range(n)])
        elif name == "mood_energy":
            res[name] = np.array([mood_energy_score(out.logits_by_exit(i), mood_exit) for i in range(n)])
        elif name == "mecam":
            size = images.shape[-2:]
            for mask in exit_masks:
                masked = np.stack(
                    [mask_image(images[i], bundle_from_outputs(out, i, size, mask).aggregated) for i in range(n)]
                )
                v2 = forward(model, masked).embedding.data
                res[mask_label(mask, out.exits)] = np.array(
                    [feature_shift(out.embedding.data[i], v2[i]) for i in range(n)]
                )
    return BatchScores(np.argmax(final, axis=1), res)


def score_images(
    model: Model,
    images: np.ndarray,
    scorers: Sequence[str] = SCORERS,
    exit_masks: Sequence[Sequence[int]] | None = None,
    mood_exit: int | None = None,
    workers: int = 1,
) -> BatchScores:
    """Score a stack of images with every requested scorer.

    Images are processed in fixed chunks so results are independent of
    ``workers``. mecam yields one score column per exit mask.
    """
    scorers = list(dict.fromkeys(canonical_scorer(s) for s in scorers))
    exits = model.config.exit_stages
    masks = [tuple(exits)] if not exit_masks else [tuple(sorted(set(m))) for m in exit_masks]
    for m in masks:
        bad = [e for e in m if e not in exits]
        if not m or bad:
            raise ConfigError(f"exit mask {m} invalid for exits {exits}")
    if mood_exit is not None and mood_exit not in exits:
        raise ConfigError(f"mood exit {mood_exit} not among exits {exits}")
    images = np.asarray(images, dtype=np.float32)
    chunks = [images[i:i + CHUNK] for i in range(0, len(images), CHUNK)]

    def run(chunk):
        return _score_chunk(model, chunk, scorers, masks, mood_exit)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    if not parts:
        return BatchScores(np.zeros(0, dtype=np.int64), {})
    keys = parts[0].scores.keys()
    return BatchScores(
        np.concatenate([p.predicted for p in parts]),
        {k: np.concatenate([p.scores[k] for p in parts]) for k in keys},
    )


# --- threshold and decision ----------------------------------------------------


@dataclass(frozen=True)
class Threshold:
    scorer: str
    tau: float
    target_tpr: float
    n_calibration: int


def required_passes(n: int, target_tpr: float) -> int:
    # round() guards against 0.95 * n landing a hair above an integer
    return math.ceil(round(target_tpr * n, 9))


def calibrate_threshold(id_scores: Sequence[float], target_tpr: float = 0.95, scorer: str = "") -> Threshold:
    """Largest tau such that at least ``ceil(target_tpr * n)`` ID scores are >= tau."""
    s = np.sort(np.asarray(id_scores, dtype=np.float64))
    n = len(s)
    if n == 0:
        raise ValueError("cannot calibrate on an empty score list")
    if not 0.0 < target_tpr <= 1.0:
        raise ValueError(f"target_tpr must be in (0, 1], got {target_tpr}")
    k = n - required_passes(n, target_tpr)
    return Threshold(scorer, float(s[k]), float(target_tpr), n)


def classify(score: float, threshold: Threshold | float) -> str:
    tau = threshold.tau if isinstance(threshold, Threshold) else float(threshold)
    return "ID" if score >= tau else "OOD"


# --- score dumps -----------------------------------------------------------------

DUMP_HEADER = ("sample_id", "scorer", "score", "label", "pred_class")


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    scorer: str
    score: float
    label: str  # "ID" or "OOD"
    pred_class: int


def make_records(ids: Sequence[str], label: str, batch: BatchScores) -> list[ScoreRecord]:
    recs = []
    for name, values in batch.scores.items():
        for sid, v, p in zip(ids, values, batch.predicted):
            if not math.isfinite(v):
                raise DataError(f"non-finite {name} score for {sid}")
            recs.append(ScoreRecord(sid, name, float(v), label, int(p)))
    return recs


def write_score_dump(path, records: Iterable[ScoreRecord]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DUMP_HEADER)
    for r in sorted(records, key=lambda r: (r.sample_id, r.scorer)):
        w.writerow([r.sample_id, r.scorer, repr(r.score), r.label, r.pred_class])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_score_dump(path) -> list[ScoreRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != DUMP_HEADER:
            raise DataError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            ScoreRecord(r["sample_id"], r["scorer"], float(r["score"]), r["label"], int(r["pred_class"]))
            for r in reader
        ]
