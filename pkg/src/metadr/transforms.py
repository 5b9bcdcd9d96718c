"""Image transformation engine: basic kernels with magnitude grids, the
standard transform sets, N-fold composition, and seeded sampling.

Images are arrays shaped (H, W, C) with C in {1, 3} and pixel values in
[0, 255]. Kernels compute in float64 and clamp to [0, 255]. Batches in
model layout (n, C, H, W) go through ``randomize_batch``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "BasicTransform",
    "TransformSet",
    "ComposedTransform",
    "build_set",
    "load_set",
    "sample_transform",
    "apply_transform",
    "randomize_batch",
    "apply_enhance",
    "apply_solarize",
    "apply_invert",
    "apply_grayscale",
    "apply_rotate",
    "apply_gaussian_noise",
    "apply_rgb_rand",
    "apply_blur",
    "STANDARD_SETS",
]

def _clamp(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 255.0)


def _luma(img: np.ndarray) -> np.ndarray:
    if img.shape[2] == 1:
        return img[:, :, 0]
    # explicit weighted sum: fixed left-to-right order, reproducible by a
    # scalar per-pixel reference
    return img[:, :, 0] * 0.299 + img[:, :, 1] * 0.587 + img[:, :, 2] * 0.114


# ---------------------------------------------------------------------------
# kernels


def apply_enhance(kind: str, factor: float, img: np.ndarray) -> np.ndarray:
    """Linear interpolation toward a per-kind degenerate image:
    brightness -> black, contrast -> constant mean-luma, color -> grayscale.
    factor 1.0 is the identity for every kind."""
    if not 0.2 <= factor <= 1.8:
        raise ValueError(f"enhance factor out of range: {factor}")
    if kind == "brightness":
        degenerate = np.zeros_like(img)
    elif kind == "contrast":
        degenerate = np.full_like(img, _luma(img).mean())
    elif kind == "color":
        degenerate = np.repeat(_luma(img)[:, :, None], img.shape[2], axis=2)
    else:
        raise ValueError(f"unknown enhance kind: {kind!r}")
    return _clamp(degenerate + factor * (img - degenerate))


def apply_solarize(threshold: float, img: np.ndarray) -> np.ndarray:
    """Pixels at or above the threshold are inverted."""
    return np.where(img >= threshold, 255.0 - img, img)


def apply_invert(img: np.ndarray) -> np.ndarray:
    return 255.0 - img


def apply_grayscale(img: np.ndarray) -> np.ndarray:
    return _clamp(np.repeat(_luma(img)[:, :, None], img.shape[2], axis=2))


@lru_cache(maxsize=256)
def _rotate_index(h: int, w: int, degrees: float):
    """Inverse-mapped nearest-neighbor sampling indices for a rotation
    about the image center; -1 marks out-of-bounds (filled with 0)."""
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # inverse rotation of output coords into source coords
    sy = np.cos(theta) * (yy - cy) - np.sin(theta) * (xx - cx) + cy
    sx = np.sin(theta) * (yy - cy) + np.cos(theta) * (xx - cx) + cx
    ry = np.rint(sy).astype(np.int64)
    rx = np.rint(sx).astype(np.int64)
    valid = (ry >= 0) & (ry < h) & (rx >= 0) & (rx < w)
    flat = np.where(valid, ry * w + rx, 0)
    return flat, valid


def apply_rotate(degrees: float, img: np.ndarray) -> np.ndarray:
    if not -60 <= degrees <= 60:
        raise ValueError(f"rotation out of range: {degrees}")
    h, w, c = img.shape
    flat, valid = _rotate_index(h, w, float(degrees))
    out = img.reshape(h * w, c)[flat.ravel()].reshape(h, w, c)
    out[~valid] = 0.0
    return out


def apply_gaussian_noise(sigma: float, img: np.ndarray, rng) -> np.ndarray:
    if not 0 <= sigma <= 30:
        raise ValueError(f"noise sigma out of range: {sigma}")
    if sigma == 0:
        return img.copy()
    return _clamp(img + rng.normal(0.0, sigma, size=img.shape))


def apply_rgb_rand(level: float, img: np.ndarray, rng) -> np.ndarray:
    """One uniform [-level, level] offset per channel, shared by all
    pixels of the image (a global color cast)."""
    if not 1 <= level <= 120:
        raise ValueError(f"rgb_rand level out of range: {level}")
    offsets = rng.uniform(-level, level, size=img.shape[2])
    return _clamp(img + offsets[None, None, :])


def apply_blur(img: np.ndarray) -> np.ndarray:
    """3x3 box filter with edge replication."""
    p = np.pad(img, [(1, 1), (1, 1), (0, 0)], mode="edge")
    acc = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            acc += p[dy : dy + img.shape[0], dx : dx + img.shape[1]]
    return _clamp(acc / 9.0)


# ---------------------------------------------------------------------------
# transform sets


@dataclass(frozen=True)
class BasicTransform:
    kind: str
    levels: tuple  # magnitude grid; single None entry for level-free kinds
    uses_rng: bool = False


def _grid(lo: float, hi: float, n: int) -> tuple:
    return tuple(np.linspace(lo, hi, n))


_BASIC = {
    "brightness": BasicTransform("brightness", _grid(0.2, 1.8, 90)),
    "color": BasicTransform("color", _grid(0.2, 1.8, 90)),
    "contrast": BasicTransform("contrast", _grid(0.2, 1.8, 90)),
    "rgb_rand": BasicTransform("rgb_rand", _grid(1, 120, 90), uses_rng=True),
    "solarize": BasicTransform("solarize", _grid(255, 75, 90)),
    "grayscale": BasicTransform("grayscale", (None,)),
    "invert": BasicTransform("invert", (None,)),
    "rotate": BasicTransform("rotate", _grid(-60, 60, 30)),
    "gaussian_noise": BasicTransform("gaussian_noise", _grid(0.0, 30.0, 30), uses_rng=True),
    "blur": BasicTransform("blur", (None,)),
}

_PSI1 = ("brightness", "color", "contrast", "solarize", "grayscale", "invert")
STANDARD_SETS = {
    "psi1": _PSI1,
    "psi2": _PSI1 + ("rotate",),
    "psi3": _PSI1 + ("rotate", "gaussian_noise", "blur"),
    "psi4": ("brightness", "color", "contrast", "rgb_rand"),
}


@dataclass(frozen=True)
class TransformSet:
    name: str
    members: tuple  # of BasicTransform
    n_compose: int = 2

    @property
    def kinds(self) -> tuple:
        return tuple(m.kind for m in self.members)


def build_set(set_id: str) -> TransformSet:
    kinds = STANDARD_SETS.get(set_id.lower())
    if kinds is None:
        raise ValueError(f"unknown transform set id: {set_id!r}")
    return TransformSet(set_id.lower(), tuple(_BASIC[k] for k in kinds))


def load_set(source) -> TransformSet:
    """Build a custom set from a JSON document (path, file obj, or dict):
    {"name": ..., "n_compose": 2,
     "members": [{"kind": "brightness", "range": [0.2, 1.8], "levels": 90}, ...]}
    Level-free kinds omit range/levels. Kinds outside the built-in kernel
    catalog are rejected."""
    if isinstance(source, dict):
        doc = source
    elif hasattr(source, "read"):
        doc = json.load(source)
    else:
        with open(source) as f:
            doc = json.load(f)
    members = []
    for m in doc["members"]:
        kind = m["kind"]
        if kind not in _BASIC:
            raise ValueError(f"unknown transform kind: {kind!r}")
        proto = _BASIC[kind]
        if "range" in m:
            lo, hi = m["range"]
            members.append(
                BasicTransform(kind, _grid(lo, hi, int(m["levels"])), proto.uses_rng)
            )
        else:
            members.append(proto)
    return TransformSet(
        doc.get("name", "custom"), tuple(members), int(doc.get("n_compose", 2))
    )


# ---------------------------------------------------------------------------
# sampling and application


@dataclass(frozen=True)
class ComposedTransform:
    """An ordered list of (kind, level, rng seed) entries; applied in order."""

    entries: tuple

    def describe(self) -> list:
        return [
            {"kind": k, "level": None if lv is None else float(lv)}
            for k, lv, _ in self.entries
        ]


def sample_transform(tset: TransformSet, rng: np.random.Generator) -> ComposedTransform:
    """Sample N entries: kind uniform over member kinds, then level uniform
    over that kind's grid. Kinds may repeat."""
    if not tset.members:
        raise ValueError("cannot sample from an empty transform set")
    entries = []
    for _ in range(tset.n_compose):
        bt = tset.members[int(rng.integers(len(tset.members)))]
        level = bt.levels[int(rng.integers(len(bt.levels)))]
        seed = int(rng.integers(2**32)) if bt.uses_rng else None
        entries.append((bt.kind, level, seed))
    return ComposedTransform(tuple(entries))


def apply_transform(ct: ComposedTransform, img: np.ndarray) -> np.ndarray:
    """Apply the composed transform to one (H, W, C) image in [0, 255]."""
    out = np.asarray(img, dtype=np.float64)
    for kind, level, seed in ct.entries:
        if kind in ("brightness", "color", "contrast"):
            out = apply_enhance(kind, level, out)
        elif kind == "solarize":
            out = apply_solarize(level, out)
        elif kind == "grayscale":
            out = apply_grayscale(out)
        elif kind == "invert":
            out = apply_invert(out)
        elif kind == "rotate":
            out = apply_rotate(level, out)
        elif kind == "gaussian_noise":
            out = apply_gaussian_noise(level, out, np.random.default_rng(seed))
        elif kind == "rgb_rand":
            out = apply_rgb_rand(level, out, np.random.default_rng(seed))
        elif kind == "blur":
            out = apply_blur(out)
        else:
            raise ValueError(f"unknown transform kind: {kind!r}")
    return out


def apply_transform_batch(ct: ComposedTransform, images: np.ndarray) -> np.ndarray:
    """Apply one composed transform to every image of a (n, C, H, W)
    batch. Stochastic kinds redraw per image from streams derived from the
    transform's stored seed, so the result is a pure function of (ct,
    images)."""
    out = np.empty_like(images, dtype=images.dtype)
    for i in range(images.shape[0]):
        entries = tuple(
            (k, lv, None if s is None else (s, i)) for k, lv, s in ct.entries
        )
        hwc = images[i].transpose(1, 2, 0)
        out[i] = apply_transform(ComposedTransform(entries), hwc).transpose(2, 0, 1)
    return out


def randomize_batch(
    tset: TransformSet, images: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Transform each image of a (n, C, H, W) batch with its own
    independently sampled composed transform."""
    out = np.empty_like(images, dtype=images.dtype)
    for i in range(images.shape[0]):
        ct = sample_transform(tset, rng)
        hwc = images[i].transpose(1, 2, 0)
        out[i] = apply_transform(ct, hwc).transpose(2, 0, 1)
    return out
