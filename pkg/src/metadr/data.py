"""Datasets, synthetic domains, and protocol sequencing.

Images are stored as uint8 arrays in model layout (m, C, H, W), pixel
values [0, 255]; batches are materialized as float32. All derivations and
splits are pure functions of their inputs and a seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .transforms import apply_rotate, build_set, randomize_batch

__all__ = [
    "LabeledDataset",
    "DomainSpec",
    "Protocol",
    "load_idx",
    "synth_digits",
    "derive_domain",
    "split_dataset",
    "batches",
    "realize_protocol",
]

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    images: np.ndarray  # (m, C, H, W) uint8
    labels: np.ndarray  # (m,) int
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{self.name}: {len(self.images)} images vs {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.images)

    def take(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.name)


def load_idx(images_path, labels_path, name: str = "", rgb: bool = True) -> LabeledDataset:
    """Read an IDX image/label file pair (big-endian, unsigned bytes).
    Grayscale images are replicated to 3 channels when rgb=True."""
    with open(images_path, "rb") as f:
        head = f.read(16)
        if len(head) < 16:
            raise ValueError("truncated IDX image file")
        magic, n, h, w = struct.unpack(">IIII", head)
        if magic != _IDX_IMAGES_MAGIC:
            raise ValueError(f"bad magic in image file: 0x{magic:08x}")
        buf = f.read(n * h * w)
        if len(buf) != n * h * w:
            raise ValueError("truncated IDX image file")
        images = np.frombuffer(buf, dtype=np.uint8).reshape(n, 1, h, w)
    with open(labels_path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise ValueError("truncated IDX label file")
        magic, nl = struct.unpack(">II", head)
        if magic != _IDX_LABELS_MAGIC:
            raise ValueError(f"bad magic in label file: 0x{magic:08x}")
        buf = f.read(nl)
        if len(buf) != nl:
            raise ValueError("truncated IDX label file")
        labels = np.frombuffer(buf, dtype=np.uint8).astype(np.int64)
    if n != nl:
        raise ValueError(f"count mismatch: {n} images vs {nl} labels")
    if rgb:
        images = np.repeat(images, 3, axis=1)
    return LabeledDataset(images.copy(), labels, name or "idx")


# ---------------------------------------------------------------------------
# synthetic digits: jittered seven-segment glyphs, 28x28 RGB, 10 classes

_SEGMENTS = {
    0: "abcdef",
    1: "bc",
    2: "abged",
    3: "abgcd",
    4: "fgbc",
    5: "afgcd",
    6: "afgedc",
    7: "abc",
    8: "abcdefg",
    9: "abcfgd",
}


def _render_digit(digit: int, rng: np.random.Generator) -> np.ndarray:
    img = np.zeros((28, 28), dtype=np.float64)
    dx = int(rng.integers(-2, 3))
    dy = int(rng.integers(-2, 3))
    t = int(rng.integers(2, 4))  # stroke thickness
    xl, xr = 9 + dx, 19 + dx
    yt, ym, yb = 4 + dy, 13 + dy, 22 + dy

    def rect(r0, r1, c0, c1):
        img[max(r0, 0) : min(r1, 28), max(c0, 0) : min(c1, 28)] = 1.0

    segs = _SEGMENTS[digit]
    if "a" in segs:
        rect(yt, yt + t, xl, xr)
    if "g" in segs:
        rect(ym, ym + t, xl, xr)
    if "d" in segs:
        rect(yb, yb + t, xl, xr)
    if "f" in segs:
        rect(yt, ym + t, xl, xl + t)
    if "b" in segs:
        rect(yt, ym + t, xr - t, xr)
    if "e" in segs:
        rect(ym, yb + t, xl, xl + t)
    if "c" in segs:
        rect(ym, yb + t, xr - t, xr)

    fg = rng.uniform(170, 255, size=3)
    bg = rng.uniform(0, 40)
    rgb = bg + img[:, :, None] * (fg[None, None, :] - bg)
    rgb = rgb + rng.normal(0, 6.0, size=rgb.shape)
    return np.clip(rgb, 0, 255)


def synth_digits(seed: int, count: int, name: str = "synth") -> LabeledDataset:
    """Procedurally rendered digit dataset with balanced labels: each class
    gets count//10 samples; the remainder goes to the lowest classes."""
    if count < 10:
        raise ValueError("count must be >= 10")
    rng = np.random.default_rng(seed)
    labels = np.concatenate(
        [np.full(count // 10 + (1 if c < count % 10 else 0), c) for c in range(10)]
    )
    labels = labels[rng.permutation(count)]
    images = np.empty((count, 3, 28, 28), dtype=np.uint8)
    for i, lab in enumerate(labels):
        images[i] = np.rint(_render_digit(int(lab), rng)).transpose(2, 0, 1)
    return LabeledDataset(images, labels.astype(np.int64), name)


# ---------------------------------------------------------------------------
# domain shifts


def _recipe_params(recipe):
    if isinstance(recipe, str):
        return recipe, {}
    recipe = dict(recipe)
    return recipe.pop("name"), recipe


def derive_domain(
    base: LabeledDataset, recipe, seed: int, name: str = ""
) -> LabeledDataset:
    """Deterministic shifted copy of a dataset. Recipes: colorize,
    invert_noise, rotate_fixed (param: degrees), cast (param: offset).
    A list of recipes is applied in sequence."""
    if isinstance(recipe, (list, tuple)):
        ds = base
        for j, step in enumerate(recipe):
            ds = derive_domain(ds, step, seed + j, name=name)
        return LabeledDataset(ds.images, ds.labels, name or ds.name)
    kind, kw = _recipe_params(recipe)
    rng = np.random.default_rng(seed)
    imgs = base.images.astype(np.float64)
    m, c, h, w = imgs.shape
    if kind == "colorize":
        # blend each image against a random low-frequency color background
        out = np.empty_like(imgs)
        for i in range(m):
            patch = rng.uniform(0, 255, size=(4, 4, c))
            bg = np.kron(patch, np.ones((7, 7, 1)))[:h, :w]
            out[i] = np.abs(imgs[i].transpose(1, 2, 0) - bg).transpose(2, 0, 1)
    elif kind == "invert_noise":
        sigma = float(kw.get("sigma", 20.0))
        out = 255.0 - imgs + rng.normal(0, sigma, size=imgs.shape)
    elif kind == "rotate_fixed":
        degrees = float(kw.get("degrees", 30.0))
        out = np.empty_like(imgs)
        for i in range(m):
            out[i] = apply_rotate(degrees, imgs[i].transpose(1, 2, 0)).transpose(2, 0, 1)
    elif kind == "randomize":
        tset = build_set(kw.get("set", "psi3"))
        out = randomize_batch(tset, imgs, rng)
    elif kind == "cast":
        offset = np.asarray(kw.get("offset", (0.0, 0.0, 0.0)), dtype=np.float64)
        out = imgs + offset[None, :, None, None]
    else:
        raise ValueError(f"unknown shift recipe: {kind!r}")
    return LabeledDataset(
        np.rint(np.clip(out, 0, 255)).astype(np.uint8),
        base.labels.copy(),
        name or f"{base.name}+{kind}",
    )


# ---------------------------------------------------------------------------
# splits and batching


def split_dataset(ds: LabeledDataset, fractions, seed: int):
    """Seeded shuffle then partition into len(fractions) disjoint,
    exhaustive pieces."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    m = len(ds)
    perm = np.random.default_rng(seed).permutation(m)
    bounds = np.rint(np.cumsum(fractions) * m).astype(int)
    pieces = []
    start = 0
    for b in bounds:
        pieces.append(ds.take(perm[start:b]))
        start = b
    return tuple(pieces)


def batches(ds: LabeledDataset, batch_size: int, steps: int, rng: np.random.Generator):
    """Yield `steps` batches sampled uniformly with replacement, images as
    float32 in [0, 255]."""
    m = len(ds)
    for _ in range(steps):
        idx = rng.integers(0, m, size=batch_size)
        yield ds.images[idx].astype(np.float32), ds.labels[idx]


# ---------------------------------------------------------------------------
# protocols


@dataclass(frozen=True)
class DomainSpec:
    name: str
    source: dict  # {"kind": "synthetic"|"idx_files"|"derived", ...}
    fractions: tuple = (0.7, 0.15, 0.15)


@dataclass(frozen=True)
class Protocol:
    domains: tuple  # of DomainSpec
    sample_cap: int = 10000
    seed: int = 0

    def __post_init__(self):
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ValueError("domain names must be unique")
        if len(names) < 1:
            raise ValueError("protocol needs at least one domain")


def _domain_seed(protocol_seed: int, index: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=protocol_seed, spawn_key=(index, purpose))
    )


def realize_protocol(protocol: Protocol):
    """Build every domain and its splits. Returns a list of dicts with
    keys name/train/val/test, in protocol order."""
    full: dict[str, LabeledDataset] = {}
    out = []
    for i, spec in enumerate(protocol.domains):
        src = dict(spec.source)
        kind = src.pop("kind")
        seed_build = int(_domain_seed(protocol.seed, i, 0).integers(2**32))
        if kind == "synthetic":
            count = int(src.get("count", protocol.sample_cap))
            ds = synth_digits(
                src.get("seed", seed_build), count, name=spec.name
            )
        elif kind == "idx_files":
            ds = load_idx(src["images"], src["labels"], name=spec.name)
        elif kind == "derived":
            base = full.get(src["base"])
            if base is None:
                raise ValueError(f"derived domain {spec.name}: unknown base {src['base']!r}")
            count = src.get("count")
            if count is not None and int(count) < len(base):
                pick = _domain_seed(protocol.seed, i, 3).choice(
                    len(base), size=int(count), replace=False
                )
                base = base.take(np.sort(pick))
            ds = derive_domain(
                base, src["recipe"], src.get("seed", seed_build), name=spec.name
            )
        else:
            raise ValueError(f"unknown domain source kind: {kind!r}")
        if len(ds) > protocol.sample_cap:
            pick = _domain_seed(protocol.seed, i, 1).choice(
                len(ds), size=protocol.sample_cap, replace=False
            )
            ds = ds.take(np.sort(pick))
        full[spec.name] = ds
        train, val, test = split_dataset(
            ds, spec.fractions, int(_domain_seed(protocol.seed, i, 2).integers(2**32))
        )
        if len(train) == 0 or len(test) == 0:
            raise ValueError(f"domain {spec.name}: empty train or test split")
        out.append({"name": spec.name, "train": train, "val": val, "test": test})
    return out


def desk_protocol(seed: int = 0, count: int = 10000) -> Protocol:
    """Default desk protocol: clean synthetic digits, then a colorized
    shift, then an inverted+noisy shift (easy to hard)."""
    return Protocol(
        domains=(
            DomainSpec("clean", {"kind": "synthetic", "count": count}),
            DomainSpec("colorized", {"kind": "derived", "base": "clean", "recipe": "colorize"}),
            DomainSpec(
                "inverted_noisy",
                {"kind": "derived", "base": "clean", "recipe": "invert_noise"},
            ),
        ),
        sample_cap=count,
        seed=seed,
    )
