"""Synthetic multi-annotator segmentation task with a known mode distribution.

Each sample is a noisy filled-ellipse image.  Every annotator independently
draws a mask mode (e.g. the base ellipse or a dilated version) from a fixed
categorical distribution and jitters the contour, so the ground-truth label
measure is known exactly and recovered frequencies can be scored against it.

On disk a dataset is a directory holding manifest.json plus one binary PGM
(P5, maxval 255) per image and per mask; mask pixels are 0 or 255.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

MANIFEST_NAME = "manifest.json"
_SPLIT_FRACTIONS = (0.75, 0.125, 0.125)  # train / val / test, by generation order


class DatasetError(ValueError):
    """Malformed on-disk dataset (manifest, file, or shape problems)."""


@dataclass
class TaskSpec:
    image_size: int = 32
    modes: list[tuple[str, float]] = field(
        default_factory=lambda: [("base", 0.7), ("dilate2", 0.3)])
    noise: float = 0.5          # contour jitter std, pixels
    annotators: int = 2

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError(f"TaskSpec: image_size must be >= 8, got {self.image_size}")
        if self.annotators < 2:
            raise ValueError(f"TaskSpec: need K >= 2 annotators, got {self.annotators}")
        if len(self.modes) < 1:
            raise ValueError("TaskSpec: at least one mode required")
        probs = [p for _, p in self.modes]
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError(f"TaskSpec: mode probabilities must be nonnegative and sum to 1, got {probs}")
        for name, _ in self.modes:
            _parse_mode(name)  # validates descriptor

    @property
    def mode_probs(self) -> list[float]:
        return [p for _, p in self.modes]


@dataclass
class MaskSet:
    """One sample: image, its K annotator masks, and generator metadata."""

    id: str
    image: np.ndarray                 # (H, W) float in [0, 1]
    masks: list[np.ndarray]           # K binary (H, W) uint8 masks
    mode_ids: list[int]
    mode_probs: list[float]
    split: str = "train"
    mode_masks: list[np.ndarray] | None = None  # noise-free mask per mode; in-memory oracle only

    def __post_init__(self):
        for m in self.masks:
            if m.shape != self.image.shape:
                raise DatasetError(f"sample {self.id}: mask shape {m.shape} "
                                   f"does not match image shape {self.image.shape}")


@dataclass
class Dataset:
    spec: TaskSpec
    samples: list[MaskSet]

    def split(self, name: str) -> list[MaskSet]:
        return [s for s in self.samples if s.split == name]


def _parse_mode(name: str):
    """Mode descriptor -> mask transform.  'base' or 'dilate<r>' / 'erode<r>'."""
    if name == "base":
        return lambda mask: mask
    for prefix, sign in (("dilate", 1), ("erode", -1)):
        if name.startswith(prefix) and name[len(prefix):].isdigit():
            r = int(name[len(prefix):])
            if sign > 0:
                return lambda mask: _dilate(mask, r)
            return lambda mask: _erode(mask, r)
    raise ValueError(f"unknown mode descriptor {name!r}")


def _disk_offsets(radius: int) -> list[tuple[int, int]]:
    return [(di, dj) for di in range(-radius, radius + 1)
            for dj in range(-radius, radius + 1)
            if di * di + dj * dj <= radius * radius]


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    for di, dj in _disk_offsets(radius):
        src = mask[max(0, -di):h - max(0, di), max(0, -dj):w - max(0, dj)]
        out[max(0, di):h - max(0, -di), max(0, dj):w - max(0, -dj)] |= src
    return out


def _erode(mask: np.ndarray, radius: int) -> np.ndarray:
    return 1 - _dilate(1 - mask, radius)


def _ellipse_mask(size: int, cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    return inside.astype(np.uint8)


def generate(spec: TaskSpec, count: int, seed: int) -> Dataset:
    """Deterministically generate `count` samples; splits follow generation order."""
    if count < 1:
        raise ValueError(f"generate: count must be >= 1, got {count}")
    transforms = [_parse_mode(name) for name, _ in spec.modes]
    probs = np.asarray(spec.mode_probs)
    size = spec.image_size
    n_train = int(round(count * _SPLIT_FRACTIONS[0]))
    n_val = int(round(count * _SPLIT_FRACTIONS[1]))

    streams = np.random.SeedSequence(seed).spawn(count)
    samples = []
    pad = len(str(max(count - 1, 1)))
    for idx in range(count):
        rng = np.random.default_rng(streams[idx])
        cx, cy = rng.uniform(0.35 * size, 0.65 * size, size=2)
        rx, ry = rng.uniform(0.16 * size, 0.30 * size, size=2)
        base = _ellipse_mask(size, cx, cy, rx, ry)
        image = 0.15 + 0.65 * base + 0.08 * rng.standard_normal((size, size))
        image = np.clip(image, 0.0, 1.0)
        image = np.round(image * 255.0) / 255.0  # quantize so save/load round-trips exactly

        mode_ids = [int(rng.choice(len(probs), p=probs)) for _ in range(spec.annotators)]
        masks = []
        for mode in mode_ids:
            jcx, jcy, jrx, jry = (cx, cy, rx, ry) + spec.noise * rng.standard_normal(4)
            jittered = _ellipse_mask(size, jcx, jcy, max(jrx, 1.0), max(jry, 1.0))
            masks.append(transforms[mode](jittered))

        if idx < n_train:
            split = "train"
        elif idx < n_train + n_val:
            split = "val"
        else:
            split = "test"
        samples.append(MaskSet(
            id=f"s{idx:0{pad}d}", image=image, masks=masks, mode_ids=mode_ids,
            mode_probs=list(probs), split=split,
            mode_masks=[t(base) for t in transforms]))
    return Dataset(spec=spec, samples=samples)


# -- PGM I/O ------------------------------------------------------------------


def _write_pgm(path: str, grid: np.ndarray) -> None:
    data = grid.astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_pgm(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    try:
        header, rest = blob.split(b"\n", 1)
        if header != b"P5":
            raise ValueError("not a binary PGM")
        dims, rest = rest.split(b"\n", 1)
        w, h = (int(t) for t in dims.split())
        maxval, pixels = rest.split(b"\n", 1)
        if int(maxval) != 255:
            raise ValueError(f"unsupported maxval {int(maxval)}")
    except ValueError as exc:
        raise DatasetError(f"malformed PGM {path}: {exc}") from exc
    if len(pixels) != w * h:
        raise DatasetError(f"truncated PGM {path}: expected {w * h} pixels, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def save(dataset: Dataset, path: str) -> str:
    """Write manifest.json plus per-sample PGM files; returns the manifest path."""
    os.makedirs(path, exist_ok=True)
    records = []
    for s in dataset.samples:
        image_rel = f"{s.id}_image.pgm"
        _write_pgm(os.path.join(path, image_rel), np.round(s.image * 255.0))
        mask_rels = []
        for k, mask in enumerate(s.masks):
            rel = f"{s.id}_mask{k}.pgm"
            _write_pgm(os.path.join(path, rel), mask * 255)
            mask_rels.append(rel)
        records.append({"id": s.id, "image": image_rel, "masks": mask_rels,
                        "mode_ids": [int(m) for m in s.mode_ids], "split": s.split})
    manifest = {
        "version": 1,
        "image_size": dataset.spec.image_size,
        "modes": [{"name": name, "prob": prob} for name, prob in dataset.spec.modes],
        "samples": records,
    }
    manifest_path = os.path.join(path, MANIFEST_NAME)
    tmp = manifest_path + ".tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, manifest_path)
    return manifest_path


def load(path: str) -> Dataset:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(manifest_path, "r", encoding="ascii") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {manifest_path}: {exc}") from exc

    for key in ("version", "image_size", "modes", "samples"):
        if key not in manifest:
            raise DatasetError(f"manifest missing required field {key!r}")
    if manifest["version"] != 1:
        raise DatasetError(f"unsupported manifest version {manifest['version']!r}")

    modes = [(m["name"], float(m["prob"])) for m in manifest["modes"]]
    probs = [p for _, p in modes]
    size = int(manifest["image_size"])
    samples = []
    annotators = None
    for rec in manifest["samples"]:
        sid = rec.get("id", "<missing id>")
        image_path = os.path.join(path, rec["image"])
        if not os.path.exists(image_path):
            raise DatasetError(f"sample {sid}: manifest references missing file {rec['image']}")
        try:
            image = _read_pgm(image_path).astype(np.float64) / 255.0
        except DatasetError as exc:
            raise DatasetError(f"sample {sid}: {exc}") from exc
        masks = []
        for rel in rec["masks"]:
            mask_path = os.path.join(path, rel)
            if not os.path.exists(mask_path):
                raise DatasetError(f"sample {sid}: manifest references missing file {rel}")
            try:
                raw = _read_pgm(mask_path)
            except DatasetError as exc:
                raise DatasetError(f"sample {sid}: {exc}") from exc
            if raw.shape != image.shape:
                raise DatasetError(f"sample {sid}: mask shape {raw.shape} does not "
                                   f"match image shape {image.shape}")
            masks.append((raw > 127).astype(np.uint8))
        if image.shape != (size, size):
            raise DatasetError(f"sample {sid}: image shape {image.shape} does not "
                               f"match manifest image_size {size}")
        annotators = len(masks) if annotators is None else annotators
        samples.append(MaskSet(id=rec["id"], image=image, masks=masks,
                               mode_ids=[int(m) for m in rec["mode_ids"]],
                               mode_probs=probs, split=rec["split"]))
    spec = TaskSpec(image_size=size, modes=modes,
                    annotators=max(annotators or 2, 2))
    return Dataset(spec=spec, samples=samples)
