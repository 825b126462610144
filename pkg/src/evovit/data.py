"""Datasets: a synthetic oriented-stripe classification task and an IDX
(big-endian MNIST-style) loader."""

from __future__ import annotations

import struct

import numpy as np

from .errors import ConfigError, FormatError
from .params import RngState

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def make_synthetic(classes: int, samples: int, side: int, seed: int,
                   noise: float = 0.35):
    """Labeled oriented sinusoidal gratings with additive noise.

    Class c has orientation pi*c/classes; values roughly in [0, 1].
    Returns (images, labels) with images of shape (side, side, 1).
    """
    rng = RngState(seed)
    ys, xs = np.mgrid[0:side, 0:side] / side
    images, labels = [], []
    for i in range(samples):
        c = i % classes
        theta = np.pi * c / classes
        freq = 3.0
        phase = rng.uniform(()) * 2 * np.pi
        pattern = np.sin(
            2 * np.pi * freq * (xs * np.cos(theta) + ys * np.sin(theta))
            + phase)
        img = 0.5 + 0.5 * pattern + noise * rng.normal(1.0, (side, side))
        images.append(img[:, :, None])
        labels.append(c)
    return images, np.array(labels, dtype=np.int64)


def load_dataset(spec: dict) -> dict:
    """Build {train,eval}_{images,labels} from a dataset spec.

    spec is {"synthetic": {classes, samples, side, seed}} or
    {"idx": {"images": path, "labels": path}} (IDX data is used for both
    splits; callers slice as needed).
    """
    if "synthetic" in spec:
        s = spec["synthetic"]
        tr_img, tr_lab = make_synthetic(
            s["classes"], s["samples"], s["side"], s["seed"])
        # held-out split from a disjoint seed
        ev_img, ev_lab = make_synthetic(
            s["classes"], max(s["classes"], s["samples"] // 2),
            s["side"], s["seed"] + 10_000)
        return {"train_images": tr_img, "train_labels": tr_lab,
                "eval_images": ev_img, "eval_labels": ev_lab,
                "classes": s["classes"]}
    if "idx" in spec:
        images = load_idx_images(spec["idx"]["images"])
        labels = load_idx_labels(spec["idx"]["labels"])
        if len(images) != len(labels):
            raise FormatError(
                f"IDX image/label count mismatch: {len(images)} vs "
                f"{len(labels)}")
        split = max(1, int(0.8 * len(images)))
        return {"train_images": images[:split],
                "train_labels": labels[:split],
                "eval_images": images[split:] or images[:split],
                "eval_labels": labels[split:] if split < len(images)
                else labels[:split],
                "classes": int(labels.max()) + 1}
    raise ConfigError("dataset spec needs a 'synthetic' or 'idx' key")


def load_idx_images(path) -> list[np.ndarray]:
    """Parse an IDX image file (magic 0x00000803, big-endian)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16:
        raise FormatError(f"IDX file too short: {len(data)} bytes")
    magic, count, rows, cols = struct.unpack_from(">IIII", data, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(
            f"bad IDX image magic 0x{magic:08x} at offset 0, expected "
            f"0x{IDX_IMAGES_MAGIC:08x}")
    expected = 16 + count * rows * cols
    if len(data) != expected:
        raise FormatError(
            f"truncated IDX image file: expected {expected} bytes, "
            f"got {len(data)}")
    raw = np.frombuffer(data, dtype=np.uint8, offset=16)
    arr = raw.reshape(count, rows, cols).astype(np.float64) / 255.0
    return [img[:, :, None] for img in arr]


def load_idx_labels(path) -> np.ndarray:
    """Parse an IDX label file (magic 0x00000801, big-endian)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise FormatError(f"IDX file too short: {len(data)} bytes")
    magic, count = struct.unpack_from(">II", data, 0)
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(
            f"bad IDX label magic 0x{magic:08x} at offset 0, expected "
            f"0x{IDX_LABELS_MAGIC:08x}")
    expected = 8 + count
    if len(data) != expected:
        raise FormatError(
            f"truncated IDX label file: expected {expected} bytes, "
            f"got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, offset=8).astype(np.int64)
