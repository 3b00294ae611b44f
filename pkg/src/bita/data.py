"""Image-text pairs: synthetic shape scenes, JSONL manifests, augmentation, batching."""
from __future__ import annotations

import base64
import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .vocab import Vocabulary

__all__ = [
    "SHAPES",
    "COLORS",
    "COUNT_WORDS",
    "SyntheticSpec",
    "Scene",
    "ImageTextPair",
    "Batch",
    "render_scene",
    "scene_captions",
    "scene_object_words",
    "generate_synthetic_dataset",
    "load_manifest",
    "save_manifest",
    "read_raw_image",
    "write_raw_image",
    "augment",
    "make_batches",
]

SHAPES = ("square", "circle", "triangle")
PLURALS = {"square": "squares", "circle": "circles", "triangle": "triangles"}
COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.2),
    "blue": (0.15, 0.25, 0.9),
    "yellow": (0.95, 0.85, 0.1),
}
COUNT_WORDS = {1: "a", 2: "two", 3: "three"}
BACKGROUND = 0.5
MAX_CAPTIONS = 5

TEMPLATES = (
    "{objs}",
    "there {be} {objs}",
    "an image of {objs}",
    "a picture showing {objs}",
    "this image contains {objs}",
)


@dataclass(frozen=True)
class SyntheticSpec:
    grid_size: int = 32
    cells: int = 4
    shapes: tuple = SHAPES
    colors: tuple = tuple(COLORS)
    max_count: int = 3
    max_groups: int = 2
    captions_per_image: int = 5

    def cell_size(self) -> int:
        return self.grid_size // self.cells


@dataclass(frozen=True)
class Scene:
    """Groups of identical objects: ((count, color, shape), ...) plus per-object cells."""

    groups: tuple
    cells: tuple
    grid_size: int = 32
    n_cells: int = 4

    def to_json(self) -> dict:
        return {
            "grid_size": self.grid_size,
            "cells": self.n_cells,
            "groups": [list(g) for g in self.groups],
            "positions": [list(c) for c in self.cells],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        return cls(
            groups=tuple((int(c), str(col), str(s)) for c, col, s in d["groups"]),
            cells=tuple((int(r), int(c)) for r, c in d["positions"]),
            grid_size=int(d["grid_size"]),
            n_cells=int(d["cells"]),
        )

    def encode(self) -> str:
        raw = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()
        return base64.b64encode(raw).decode("ascii")

    @classmethod
    def decode(cls, payload: str) -> "Scene":
        return cls.from_json(json.loads(base64.b64decode(payload.encode("ascii"))))


@dataclass
class ImageTextPair:
    id: str
    image: np.ndarray
    captions: list[str]
    scene: Scene | None = None
    source: str | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.captions:
            raise ValueError(f"pair {self.id!r} has no captions")
        if len(self.captions) > MAX_CAPTIONS:
            raise ValueError(f"pair {self.id!r} has {len(self.captions)} captions; at most {MAX_CAPTIONS}")
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"pair {self.id!r}: image must be [H, W, 3], got {img.shape}")
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise ValueError(f"pair {self.id!r}: image values outside [0, 1]")
        self.image = img

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ImageTextPair)
            and self.id == other.id
            and self.captions == other.captions
            and self.scene == other.scene
            and np.array_equal(self.image, other.image)
        )


# ----------------------------------------------------------------- rendering


def _shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        r = size / 2
        return (yy - r) ** 2 + (xx - r) ** 2 <= r * r
    if shape == "triangle":
        # apex at top centre, base along the bottom row
        half_width = xx - size / 2
        return np.abs(half_width) <= yy / 2
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(scene: Scene) -> np.ndarray:
    img = np.full((scene.grid_size, scene.grid_size, 3), BACKGROUND)
    cell = scene.grid_size // scene.n_cells
    margin = max(1, cell // 8)
    size = cell - 2 * margin
    k = 0
    for count, color, shape in scene.groups:
        mask = _shape_mask(shape, size)
        for _ in range(count):
            r, c = scene.cells[k]
            k += 1
            y0, x0 = r * cell + margin, c * cell + margin
            patch = img[y0:y0 + size, x0:x0 + size]
            patch[mask] = COLORS[color]
    return img


def _phrase(group) -> str:
    count, color, shape = group
    noun = shape if count == 1 else PLURALS[shape]
    return f"{COUNT_WORDS[count]} {color} {noun}"


def scene_captions(scene: Scene, limit: int = 5) -> list[str]:
    """Distinct template captions, every one a truthful description of the scene."""
    groups = list(scene.groups)
    # groups are always named in canonical inventory order
    objs = " and ".join(_phrase(g) for g in groups)
    be = "is" if groups[0][0] == 1 else "are"
    out: list[str] = []
    for template in TEMPLATES:
        text = template.format(objs=objs, be=be)
        if text not in out:
            out.append(text)
    return out[:limit]


def scene_object_words(scene: Scene) -> list[str]:
    """Ground-truth content words: count word, colour and (plural) shape per group."""
    words = []
    for count, color, shape in scene.groups:
        words += [COUNT_WORDS[count], color, shape if count == 1 else PLURALS[shape]]
    return words


def _all_group_sets(spec: SyntheticSpec) -> list[tuple]:
    kinds = [(col, s) for col in spec.colors for s in spec.shapes]
    counts = range(1, spec.max_count + 1)
    out = []
    for n_groups in range(1, spec.max_groups + 1):
        for chosen in itertools.combinations(kinds, n_groups):
            for cs in itertools.product(counts, repeat=n_groups):
                out.append(tuple((c, col, s) for c, (col, s) in zip(cs, chosen)))
    return out


def generate_synthetic_dataset(spec: SyntheticSpec, n_pairs: int, seed: int,
                               id_prefix: str = "syn") -> list[ImageTextPair]:
    """Deterministic dataset of distinct scenes, so captions never repeat."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    pool = _all_group_sets(spec)
    if n_pairs > len(pool):
        raise ValueError(f"inventory supports at most {len(pool)} distinct scenes, asked for {n_pairs}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(pool), size=n_pairs, replace=False)
    pairs = []
    for i, idx in enumerate(chosen):
        groups = tuple(pool[int(idx)])
        # randomise which group is described first
        order = rng.permutation(len(groups))
        groups = tuple(groups[j] for j in order)
        n_obj = sum(g[0] for g in groups)
        cells = rng.choice(spec.cells * spec.cells, size=n_obj, replace=False)
        scene = Scene(groups=groups,
                      cells=tuple((int(c) // spec.cells, int(c) % spec.cells) for c in cells),
                      grid_size=spec.grid_size, n_cells=spec.cells)
        pairs.append(ImageTextPair(
            id=f"{id_prefix}-{i:05d}",
            image=render_scene(scene),
            captions=scene_captions(scene, spec.captions_per_image),
            scene=scene,
            source="synthetic:" + scene.encode(),
        ))
    return pairs


# ------------------------------------------------------------ raw images


def write_raw_image(path, image: np.ndarray) -> None:
    """Flat little-endian f32 RGB with a 12-byte (H, W, 3) u32 header."""
    img = np.asarray(image, dtype="<f4")
    h, w, c = img.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", h, w, c))
        fh.write(img.tobytes())


def read_raw_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise ValueError(f"{path}: truncated raw image header")
    h, w, c = struct.unpack("<III", data[:12])
    if c != 3 or len(data) != 12 + 4 * h * w * c:
        raise ValueError(f"{path}: raw image payload does not match header {h}x{w}x{c}")
    return np.frombuffer(data[12:], dtype="<f4").reshape(h, w, c).astype(np.float64)


# --------------------------------------------------------------- manifests


def save_manifest(path, pairs: Sequence[ImageTextPair], raw_dir=None) -> None:
    """Write one JSON record per line.  Pairs without a synthetic source are
    stored as raw f32 files under ``raw_dir`` (default: next to the manifest)."""
    path = Path(path)
    raw_dir = Path(raw_dir) if raw_dir is not None else path.parent
    lines = []
    for pair in pairs:
        if pair.scene is not None:
            image_ref = "synthetic:" + pair.scene.encode()
        elif pair.source and pair.source.startswith("raw:"):
            image_ref = pair.source
        else:
            raw_dir.mkdir(parents=True, exist_ok=True)
            raw_path = raw_dir / f"{pair.id}.f32"
            write_raw_image(raw_path, pair.image)
            image_ref = f"raw:{raw_path}"
        lines.append(json.dumps({"id": pair.id, "image": image_ref, "captions": list(pair.captions)}))
    path.write_text("".join(line + "\n" for line in lines))


def load_manifest(path) -> list[ImageTextPair]:
    path = Path(path)
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(rec, dict) or "id" not in rec:
            raise ValueError(f"{path}:{lineno}: record needs an 'id'")
        pid = str(rec["id"])
        ref = rec.get("image")
        if not ref or not isinstance(ref, str):
            raise ValueError(f"{path}:{lineno}: record {pid!r} has no image payload")
        captions = rec.get("captions")
        if not isinstance(captions, list) or not captions:
            raise ValueError(f"{path}:{lineno}: record {pid!r} has no captions")
        if ref.startswith("synthetic:"):
            try:
                scene = Scene.decode(ref[len("synthetic:"):])
            except Exception as exc:
                raise ValueError(f"{path}:{lineno}: record {pid!r} has a bad synthetic payload") from exc
            image = render_scene(scene)
        elif ref.startswith("raw:"):
            scene = None
            raw_path = Path(ref[len("raw:"):])
            if not raw_path.is_absolute():
                raw_path = path.parent / raw_path
            if not raw_path.exists():
                raise ValueError(f"{path}:{lineno}: record {pid!r} image file {raw_path} missing")
            image = read_raw_image(raw_path)
        else:
            raise ValueError(f"{path}:{lineno}: record {pid!r} has unknown image payload {ref[:20]!r}")
        pairs.append(ImageTextPair(pid, image, [str(c) for c in captions], scene, ref))
    return pairs


# ------------------------------------------------------------ augmentation


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w, _ = img.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def augment(image: np.ndarray, seed, out_size: int | None = None, crop: bool = True,
            flip: bool = True, scale=(0.6, 1.0)) -> np.ndarray:
    """Random resized crop (area fraction uniform in ``scale``, square aspect)
    resized bilinearly to ``out_size``, then a horizontal flip with p = 0.5."""
    rng = np.random.default_rng(seed)
    img = np.asarray(image, dtype=np.float64)
    h, w, _ = img.shape
    out_size = out_size or h
    s = rng.uniform(*scale)
    do_flip = rng.random() < 0.5
    if crop:
        ch = max(1, int(round(h * np.sqrt(s))))
        cw = max(1, int(round(w * np.sqrt(s))))
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        img = img[y0:y0 + ch, x0:x0 + cw]
    if img.shape[0] != out_size or img.shape[1] != out_size:
        img = _resize_bilinear(img, out_size, out_size)
    if flip and do_flip:
        img = img[:, ::-1]
    return np.clip(np.ascontiguousarray(img), 0.0, 1.0)


# ----------------------------------------------------------------- batching


@dataclass
class Batch:
    ids: list[str]
    images: np.ndarray          # [B, H, W, 3]
    captions: list[str]
    text_ids: np.ndarray        # [B, text_len]: [CLS] w.. pad
    text_mask: np.ndarray       # True on real tokens
    lm_input: np.ndarray        # [B, T]: bos w.. pad
    lm_target: np.ndarray       # [B, T]: w.. eos pad
    lm_mask: np.ndarray


def collate(pairs: Sequence[ImageTextPair], captions: Sequence[str], vocab: Vocabulary,
            text_len: int, images: np.ndarray | None = None) -> Batch:
    text_ids = np.array([vocab.text_branch_ids(c, text_len) for c in captions], dtype=np.int64)
    lm = [vocab.lm_ids(c) for c in captions]
    t = max(len(inp) for inp, _ in lm)
    lm_input = np.zeros((len(lm), t), dtype=np.int64)
    lm_target = np.zeros((len(lm), t), dtype=np.int64)
    for i, (inp, tgt) in enumerate(lm):
        lm_input[i, :len(inp)] = inp
        lm_target[i, :len(tgt)] = tgt
    if images is None:
        images = np.stack([p.image for p in pairs])
    return Batch(
        ids=[p.id for p in pairs],
        images=images,
        captions=list(captions),
        text_ids=text_ids,
        text_mask=text_ids != 0,
        lm_input=lm_input,
        lm_target=lm_target,
        lm_mask=lm_target != 0,
    )


def make_batches(dataset: Sequence[ImageTextPair], batch_size: int, epoch_seed: int,
                 vocab: Vocabulary, text_len: int, augment_mode: str = "none",
                 image_size: int | None = None) -> Iterator[Batch]:
    """One epoch of shuffled batches, one sampled caption per image.

    The short final batch is dropped.  ``augment_mode`` is ``none``, ``flip``
    or ``full`` (crop + flip).
    """
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2 for the contrastive loss")
    if len(dataset) < batch_size:
        raise ValueError(f"dataset of {len(dataset)} pairs is smaller than batch_size {batch_size}")
    if augment_mode not in ("none", "flip", "full"):
        raise ValueError(f"unknown augment mode {augment_mode!r}")
    rng = np.random.default_rng([epoch_seed, 0x5EED])
    order = rng.permutation(len(dataset))
    picks = [int(rng.integers(len(dataset[int(i)].captions))) for i in order]
    aug_seeds = rng.integers(0, 2**32, size=len(order))
    for start in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        pairs = [dataset[int(i)] for i in idx]
        caps = [p.captions[picks[start + j]] for j, p in enumerate(pairs)]
        imgs = np.stack([p.image for p in pairs])
        if augment_mode != "none":
            imgs = np.stack([
                augment(p.image, int(aug_seeds[start + j]), image_size,
                        crop=augment_mode == "full", flip=True)
                for j, p in enumerate(pairs)
            ])
        yield collate(pairs, caps, vocab, text_len, imgs)
