"""Datasets: manifests, image loading, the synthetic shapes corpus, augmentation.

A manifest is a CSV with header ``path,label,split``. Paths are relative to the
dataset root, ``label`` is a class index or ``-`` for OOD rows and ``split`` is
one of train, calib, test. Ground-truth object masks written by the generator
live at ``masks/<path>``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import netpbm
from .errors import DataError, LabelRangeError, ManifestError, MissingFileError
from .rng import SplitMix64

MANIFEST_HEADER = ("path", "label", "split")
SPLITS = ("train", "calib", "test")
OOD_FAMILIES = ("noise", "stripes", "rings")
ID_CLASSES = ("disk", "square")
NOISE_SIGMA = 0.05


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: int | None
    split: str


@dataclass
class Dataset:
    ids: list[str]
    images: np.ndarray  # N x C x H x W float32 in [0, 1]
    labels: np.ndarray  # int64, -1 where absent
    masks: np.ndarray | None = None  # N x H x W bool

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            [self.ids[i] for i in index],
            self.images[index],
            self.labels[index],
            None if self.masks is None else self.masks[index],
        )


# --- manifests -----------------------------------------------------------------


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    reader = csv.reader(io.StringIO(path.read_text(encoding="utf-8")))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError(f"{path}: empty manifest") from None
    if tuple(header) != MANIFEST_HEADER:
        raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {','.join(header)}")
    rows, seen = [], set()
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(rec)}")
        p, label, split = rec
        if p in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate path {p}")
        if split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
        if label == "-":
            lab = None
        else:
            try:
                lab = int(label)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: bad label {label!r}") from None
        seen.add(p)
        rows.append(ManifestRow(p, lab, split))
    return rows


def write_manifest(path, rows: Iterable[ManifestRow]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for r in rows:
        w.writerow([r.path, "-" if r.label is None else r.label, r.split])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# --- resampling ----------------------------------------------------------------


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the align-corners-false linear interpolation weights of output i."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] += 1.0 - frac
    m[np.arange(n_out), i1] += frac
    return m


def bilinear_resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling (align-corners false) of the last two axes, in float64."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    ry = _interp_matrix(h, size[0])
    rx = _interp_matrix(w, size[1])
    return ry @ image @ rx.T


# --- loading -------------------------------------------------------------------


def load_dataset(
    root,
    manifest,
    splits: str | Sequence[str] | None = None,
    input_size: int | None = None,
    channels: int | None = None,
    num_classes: int | None = None,
    with_masks: bool = False,
) -> Dataset:
    """Decode every manifest row (optionally restricted to ``splits``)."""
    root = Path(root)
    rows = read_manifest(manifest if Path(manifest).is_absolute() else root / manifest)
    if splits is not None:
        wanted = {splits} if isinstance(splits, str) else set(splits)
        rows = [r for r in rows if r.split in wanted]
    ids, images, labels, masks = [], [], [], []
    for r in rows:
        if r.label is not None and num_classes is not None and not 0 <= r.label < num_classes:
            raise LabelRangeError(f"{r.path}: label {r.label} outside [0, {num_classes})")
        img = netpbm.read_image(root / r.path)
        if channels is not None and img.shape[0] != channels:
            raise DataError(f"{r.path}: expected {channels} channels, file has {img.shape[0]}")
        if input_size is not None and img.shape[1:] != (input_size, input_size):
            img = np.clip(bilinear_resize(img, (input_size, input_size)), 0.0, 1.0).astype(np.float32)
        ids.append(r.path)
        images.append(img)
        labels.append(-1 if r.label is None else r.label)
        if with_masks:
            m = netpbm.read_image(root / "masks" / r.path)[0]
            if input_size is not None and m.shape != (input_size, input_size):
                m = bilinear_resize(m, (input_size, input_size))
            masks.append(m >= 0.5)
    if images:
        arr = np.stack(images).astype(np.float32)
    else:
        arr = np.zeros((0, channels or 1, input_size or 0, input_size or 0), dtype=np.float32)
    return Dataset(ids, arr, np.asarray(labels, dtype=np.int64), np.stack(masks) if masks else None)


# --- synthetic corpus ----------------------------------------------------------


def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    return yy, xx


def _finish(rng: SplitMix64, base: np.ndarray, sigma: float = NOISE_SIGMA) -> np.ndarray:
    return np.clip(base + sigma * rng.normal(base.shape), 0.0, 1.0)


def _shape_image(rng: SplitMix64, size: int, kind: str):
    yy, xx = _grid(size)
    level = rng.uniform(0.1, 0.3)
    contrast = rng.uniform(0.4, 0.7)
    if kind == "disk":
        r = rng.uniform(0.15, 0.28) * size
        cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:
        h = rng.uniform(0.125, 0.25) * size
        cy, cx = rng.uniform(h + 1, size - h - 1, size=2)
        mask = (np.abs(yy - cy) <= h) & (np.abs(xx - cx) <= h)
    return _finish(rng, level + contrast * mask), mask


def _ood_image(rng: SplitMix64, size: int, family: str):
    yy, xx = _grid(size)
    if family == "noise":
        # same background range as ID, no object, heavier noise
        level = rng.uniform(0.1, 0.3)
        sigma = rng.uniform(0.05, 0.15)
        return _finish(rng, np.full((size, size), level), sigma), np.zeros((size, size), dtype=bool)
    level = rng.uniform(0.1, 0.3)
    contrast = rng.uniform(0.4, 0.7)
    if family == "stripes":
        period = rng.uniform(4.0, 10.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        mask = np.sin(2 * np.pi * yy / period + phase) > 0
    elif family == "rings":
        outer = rng.uniform(0.2, 0.4) * size
        width = rng.uniform(1.5, 3.0)
        cy, cx = rng.uniform(outer + 1, size - outer - 1, size=2)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        mask = (d <= outer) & (d >= outer - width)
    else:
        raise ValueError(f"unknown OOD family {family!r}")
    return _finish(rng, level + contrast * mask), mask


def _write_sample(out: Path, rel: str, image: np.ndarray, mask: np.ndarray) -> None:
    for target, arr in ((out / rel, image), (out / "masks" / rel, mask.astype(np.float64))):
        target.parent.mkdir(parents=True, exist_ok=True)
        netpbm.write_image(target, arr)


def synth_generate(out_dir, seed: int, n_per_class: int, image_size: int = 32) -> dict[str, Path]:
    """Write the synthetic ID/OOD corpus and its manifests; return manifest paths.

    ID classes are a filled disk (0) and a filled square (1), split 70/10/20 per
    class into train/calib/test. Each OOD family (noise, stripes, rings) has as
    many test images as the ID test split. Output is a pure function of the
    arguments.
    """
    if n_per_class < 10:
        raise DataError(f"n_per_class must be >= 10, got {n_per_class}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    root_rng = SplitMix64(seed)
    n_train = int(round(0.7 * n_per_class))
    n_calib = int(round(0.1 * n_per_class))
    id_rows: list[ManifestRow] = []
    for label, kind in enumerate(ID_CLASSES):
        order = root_rng.spawn(0, label).permutation(n_per_class)
        split_of = np.empty(n_per_class, dtype=object)
        split_of[order[:n_train]] = "train"
        split_of[order[n_train:n_train + n_calib]] = "calib"
        split_of[order[n_train + n_calib:]] = "test"
        for i in range(n_per_class):
            image, mask = _shape_image(root_rng.spawn(1, label, i), image_size, kind)
            rel = f"id/{kind}/{i:04d}.pgm"
            _write_sample(out, rel, image, mask)
            id_rows.append(ManifestRow(rel, label, str(split_of[i])))
    manifests = {"id": out / "id.csv"}
    write_manifest(manifests["id"], id_rows)
    for split in SPLITS:
        manifests[f"id_{split}"] = out / f"id_{split}.csv"
        write_manifest(manifests[f"id_{split}"], [r for r in id_rows if r.split == split])
    n_ood = sum(r.split == "test" for r in id_rows)
    for f, family in enumerate(OOD_FAMILIES):
        rows = []
        for i in range(n_ood):
            image, mask = _ood_image(root_rng.spawn(2, f, i), image_size, family)
            rel = f"ood/{family}/{i:04d}.pgm"
            _write_sample(out, rel, image, mask)
            rows.append(ManifestRow(rel, None, "test"))
        manifests[f"ood_{family}"] = out / f"ood_{family}.csv"
        write_manifest(manifests[f"ood_{family}"], rows)
    return manifests


# --- augmentation --------------------------------------------------------------


def apply_augment(image: np.ndarray, flip: bool, brightness: float) -> np.ndarray:
    out = image[..., ::-1] if flip else image
    if brightness != 1.0:
        out = np.clip(out * np.float32(brightness), 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32)


def augment_image(
    image: np.ndarray,
    rng: SplitMix64,
    flip_prob: float = 0.5,
    brightness: tuple[float, float] = (0.9, 1.1),
) -> np.ndarray:
    """Random horizontal flip and brightness scaling, clamped to [0, 1]."""
    flip = rng.uniform() < flip_prob
    scale = rng.uniform(*brightness)
    return apply_augment(image, flip, scale)
