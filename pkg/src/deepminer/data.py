"""Datasets of identity images, augmentation and P x K batch sampling."""
from __future__ import annotations

import logging
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, InvalidCount, NoValidFiles, TooFewIdentities

logger = logging.getLogger(__name__)

FILENAME_RE = re.compile(r"^(-?\d+)_c(\d+)")
DEFAULT_HEIGHT, DEFAULT_WIDTH = 48, 16


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    identity: int
    camera: int
    source_path: str | None = None


@dataclass
class Dataset:
    samples: list[Sample]
    id_index: dict[int, list[int]] = field(default_factory=dict)
    decode_errors: list[str] = field(default_factory=list)

    def __post_init__(self):
        index: dict[int, list[int]] = {}
        for i, s in enumerate(self.samples):
            index.setdefault(s.identity, []).append(i)
        self.id_index = dict(sorted(index.items()))

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def images(self, indices=None) -> np.ndarray:
        picked = self.samples if indices is None else [self.samples[i] for i in indices]
        if not picked:
            return np.zeros((0, 3, 0, 0))
        return np.stack([s.image for s in picked])

    def identities(self, indices=None) -> np.ndarray:
        picked = self.samples if indices is None else [self.samples[i] for i in indices]
        return np.array([s.identity for s in picked], dtype=np.int64)

    def cameras(self, indices=None) -> np.ndarray:
        picked = self.samples if indices is None else [self.samples[i] for i in indices]
        return np.array([s.camera for s in picked], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices])

    @property
    def num_identities(self) -> int:
        return len(self.id_index)


def seed_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (``"augment"``, ``"sampler"``, ...)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


# -- synthetic identities -----------------------------------------------------

def _signature(identity: int, signature_seed: int, h: int, w: int) -> list[tuple]:
    """Three coloured rectangles, one per vertical third (head / torso / legs)."""
    rng = np.random.default_rng([signature_seed, identity])
    rects = []
    band = h / 3
    for k in range(3):
        rh = max(1, int(round(band * rng.uniform(0.5, 0.9))))
        rw = max(1, int(round(w * rng.uniform(0.4, 0.9))))
        top = int(k * band + rng.uniform(0, band - rh + 1e-9))
        left = int(rng.uniform(0, w - rw + 1e-9))
        color = rng.uniform(0.0, 1.0, size=3)
        rects.append((top, left, rh, rw, color))
    return rects


def synth_dataset(num_ids: int, per_id: int, num_cams: int = 2, h: int = DEFAULT_HEIGHT,
                  w: int = DEFAULT_WIDTH, seed: int = 0, signature_seed: int = 0) -> Dataset:
    """Deterministic toy re-ID data.

    Identity appearance depends only on ``(signature_seed, identity)``; the
    per-sample nuisance (background noise, brightness, jitter) comes from
    ``seed``.  Two datasets with different ``seed`` therefore show the same
    people under different conditions.
    """
    if min(num_ids, per_id, num_cams, h, w) < 1:
        raise InvalidCount("num_ids, per_id, num_cams, h and w must all be >= 1")
    rng = np.random.default_rng(seed)
    samples = []
    for identity in range(num_ids):
        rects = _signature(identity, signature_seed, h, w)
        for k in range(per_id):
            img = rng.uniform(0.0, 0.2, size=(3, h, w))
            brightness = rng.uniform(0.8, 1.2)
            dy = int(round(rng.uniform(-0.1, 0.1) * h))
            dx = int(round(rng.uniform(-0.1, 0.1) * w))
            for top, left, rh, rw, color in rects:
                r0, c0 = max(0, top + dy), max(0, left + dx)
                r1, c1 = min(h, top + dy + rh), min(w, left + dx + rw)
                if r1 > r0 and c1 > c0:
                    img[:, r0:r1, c0:c1] = (color * brightness)[:, None, None]
            samples.append(Sample(np.clip(img, 0.0, 1.0), identity, k % num_cams + 1))
    return Dataset(samples)


def dump_ppm(ds: Dataset, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counters: dict[tuple[int, int], int] = {}
    paths = []
    for s in ds.samples:
        n = counters.get((s.identity, s.camera), 0)
        counters[(s.identity, s.camera)] = n + 1
        path = out / f"{s.identity:04d}_c{s.camera}_{n}.ppm"
        write_image(s.image, path)
        paths.append(path)
    return paths


def write_image(image: np.ndarray, path) -> None:
    """Write a (3, H, W) float image in [0, 1] (format chosen by suffix)."""
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


# -- directory ingestion --------------------------------------------------------

def parse_name(name: str) -> tuple[int, int] | None:
    m = FILENAME_RE.match(name)
    if not m:
        return None
    return int(m.group(1)), int(m.group(2))


def resize_nearest(image: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize of a (C, H, W) array."""
    src_h, src_w = image.shape[1:]
    rows = np.minimum((np.arange(h) * src_h) // h, src_h - 1)
    cols = np.minimum((np.arange(w) * src_w) // w, src_w - 1)
    return image[:, rows][:, :, cols]


def read_image(path, h: int = DEFAULT_HEIGHT, w: int = DEFAULT_WIDTH) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"{path}: {exc}") from None
    return resize_nearest(arr.transpose(2, 0, 1), h, w)


def load_dir(path, h: int = DEFAULT_HEIGHT, w: int = DEFAULT_WIDTH) -> Dataset:
    """Read every ``<id>_c<cam>...`` image under ``path`` (sorted, non-recursive).

    Identity -1 marks junk images and is skipped.  Undecodable files are logged
    and skipped unless none decode at all.
    """
    root = Path(path)
    if not root.is_dir():
        raise NoValidFiles(f"{root} is not a directory")
    samples, failures = [], []
    for entry in sorted(root.iterdir()):
        parsed = parse_name(entry.name) if entry.is_file() else None
        if parsed is None or parsed[0] < 0:
            continue
        identity, camera = parsed
        try:
            image = read_image(entry, h, w)
        except DecodeError as exc:
            failures.append(str(exc))
            logger.warning("skipping undecodable file %s", exc)
            continue
        samples.append(Sample(image, identity, camera, str(entry)))
    if not samples:
        if failures:
            raise DecodeError(f"no file in {root} could be decoded: " + "; ".join(failures))
        raise NoValidFiles(f"no files named <id>_c<cam>... in {root}")
    return Dataset(samples, decode_errors=failures)


# -- augmentation ----------------------------------------------------------------

def augment(image: np.ndarray, flip_p: float, erase_p: float, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip, then random erasing with uniform noise.

    Erased rectangles cover 2%-20% of the image with aspect ratio drawn
    log-uniformly from [0.3, 3.3].
    """
    out = np.array(image, dtype=np.float64)
    if rng.random() < flip_p:
        out = out[:, :, ::-1].copy()
    if rng.random() < erase_p:
        _, h, w = out.shape
        area = h * w * rng.uniform(0.02, 0.2)
        aspect = np.exp(rng.uniform(np.log(0.3), np.log(3.3)))
        eh = int(np.clip(round(np.sqrt(area * aspect)), 1, h))
        ew = int(np.clip(round(np.sqrt(area / aspect)), 1, w))
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        out[:, top:top + eh, left:left + ew] = rng.uniform(0.0, 1.0, size=(out.shape[0], eh, ew))
    return out


# -- sampling ----------------------------------------------------------------------

class PKSampler:
    """Batches of P distinct identities with K samples each.

    Each pass over the sampler is one epoch: identities are shuffled and cut
    into groups of P (the last group is topped up with other identities), so
    every identity appears at least once.  Identities with fewer than K images
    are sampled with replacement.
    """

    def __init__(self, ds: Dataset, P: int, K: int, seed: int = 0):
        if P < 2 or K < 2:
            raise TooFewIdentities("P x K sampling needs P >= 2 and K >= 2")
        if ds.num_identities < P:
            raise TooFewIdentities(f"dataset has {ds.num_identities} identities, P = {P}")
        self.ds = ds
        self.P = P
        self.K = K
        self.rng = seed_stream(seed, "sampler")
        self.ids = np.array(list(ds.id_index))

    def __len__(self) -> int:
        return -(-len(self.ids) // self.P)

    def _pick(self, identity: int) -> list[int]:
        pool = self.ds.id_index[int(identity)]
        replace = len(pool) < self.K
        return [pool[i] for i in self.rng.choice(len(pool), size=self.K, replace=replace)]

    def __iter__(self):
        order = self.rng.permutation(self.ids)
        for start in range(0, len(order), self.P):
            group = list(order[start:start + self.P])
            if len(group) < self.P:
                rest = np.array([i for i in self.ids if i not in group])
                group += list(self.rng.choice(rest, size=self.P - len(group), replace=False))
            yield np.array([idx for identity in group for idx in self._pick(identity)])


def pk_sampler(ds: Dataset, P: int, K: int, seed: int = 0) -> PKSampler:
    return PKSampler(ds, P, K, seed)
