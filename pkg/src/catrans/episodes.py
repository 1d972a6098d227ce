"""Synthetic episodic few-shot segmentation benchmark.

Twelve shape classes, each with its own hue and texture law, rendered over
cluttered backgrounds with distractors from other classes. Four folds hold
out three classes each.
"""
from __future__ import annotations

import colorsys
import contextlib
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SHAPE_FAMILIES = (
    "circle", "square", "triangle", "ring", "cross", "bar",
    "ellipse", "diamond", "star", "L", "T", "U",
)
TEXTURES = ("solid", "stripes", "checker", "dots")
N_CLASSES = len(SHAPE_FAMILIES)
N_FOLDS = 4
PHASES = ("train", "test", "val")
FG_MIN, FG_MAX = 0.01, 0.60


class QueryMaskAccessError(RuntimeError):
    """Raised when the query ground truth is read while masks are poisoned."""


_POISON = False


@contextlib.contextmanager
def poison_query_masks():
    """Any read of ``Episode.query_mask`` inside this block raises."""
    global _POISON
    prev, _POISON = _POISON, True
    try:
        yield
    finally:
        _POISON = prev


@dataclass(frozen=True)
class ShapeClass:
    id: int
    family: str
    hue: float
    texture: str
    texture_freq: float


def shape_class(cid: int) -> ShapeClass:
    if not 0 <= cid < N_CLASSES:
        raise ValueError(f"class id {cid} out of range")
    # hue order interleaves families so neighbouring hues differ in shape
    return ShapeClass(cid, SHAPE_FAMILIES[cid], hue=(cid * 30.0) % 360.0,
                      texture=TEXTURES[cid % 4], texture_freq=0.35 + 0.05 * (cid % 3))


@dataclass(frozen=True)
class DatasetSplit:
    fold: int
    n_train: int = 0
    n_test: int = 0

    def __post_init__(self):
        if not 0 <= self.fold < N_FOLDS:
            raise ValueError(f"fold must be in 0..{N_FOLDS - 1}")

    @property
    def test_classes(self) -> tuple[int, ...]:
        return tuple(self.fold + N_FOLDS * i for i in range(N_CLASSES // N_FOLDS))

    @property
    def train_classes(self) -> tuple[int, ...]:
        held = set(self.test_classes)
        return tuple(c for c in range(N_CLASSES) if c not in held)

    def classes(self, phase: str) -> tuple[int, ...]:
        if phase in ("train", "val"):
            return self.train_classes
        if phase == "test":
            return self.test_classes
        raise ValueError(f"unknown phase {phase!r}")


@dataclass
class Episode:
    support_images: list[np.ndarray]
    support_masks: list[np.ndarray]
    query_image: np.ndarray
    _query_mask: np.ndarray = field(repr=False)
    class_id: int
    seed: int
    phase: str = "train"
    fold: int = 0

    @property
    def shots(self) -> int:
        return len(self.support_images)

    @property
    def query_mask(self) -> np.ndarray:
        if _POISON:
            raise QueryMaskAccessError("query mask read while poisoned")
        return self._query_mask

    def replace_query_mask(self, mask: np.ndarray) -> "Episode":
        return Episode(self.support_images, self.support_masks, self.query_image, mask,
                       self.class_id, self.seed, self.phase, self.fold)

    def flipped(self, rng: np.random.Generator) -> "Episode":
        """Horizontal flip of each image/mask pair independently with probability 1/2."""
        def maybe(img, m):
            if rng.random() < 0.5:
                return img[:, ::-1].copy(), m[:, ::-1].copy()
            return img, m

        pairs = [maybe(i, m) for i, m in zip(self.support_images, self.support_masks)]
        qi, qm = maybe(self.query_image, self._query_mask)
        return Episode([p[0] for p in pairs], [p[1] for p in pairs], qi, qm,
                       self.class_id, self.seed, self.phase, self.fold)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (*self.support_images, *self.support_masks, self.query_image, self._query_mask):
            h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
        h.update(f"{self.class_id},{self.seed},{self.phase},{self.fold}".encode())
        return h.hexdigest()


# ---------------------------------------------------------------- rendering

def _shape_mask(family: str, size: int, cx: float, cy: float, s: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    c, si = math.cos(theta), math.sin(theta)
    x = (c * dx + si * dy) / s
    y = (-si * dx + c * dy) / s
    r = np.hypot(x, y)
    ax, ay = np.abs(x), np.abs(y)
    if family == "circle":
        return r < 1.0
    if family == "square":
        return np.maximum(ax, ay) < 0.85
    if family == "triangle":
        inside = np.ones_like(x, dtype=bool)
        for k in range(3):
            phi = math.pi / 2 + k * 2 * math.pi / 3
            inside &= x * math.cos(phi) + y * math.sin(phi) < 0.5
        return inside
    if family == "ring":
        return (r < 1.0) & (r > 0.55)
    if family == "cross":
        return ((ax < 0.3) & (ay < 1.0)) | ((ay < 0.3) & (ax < 1.0))
    if family == "bar":
        return (ax < 1.1) & (ay < 0.35)
    if family == "ellipse":
        return x ** 2 + (y / 0.55) ** 2 < 1.0
    if family == "diamond":
        return ax + ay < 1.0
    if family == "star":
        phi = np.arctan2(y, x)
        return r < 0.5 + 0.5 * np.abs(np.cos(2.5 * phi))
    if family == "L":
        return ((x > -1) & (x < -0.35) & (ay < 1)) | ((y > 0.35) & (y < 1) & (ax < 1))
    if family == "T":
        return ((y > -1) & (y < -0.4) & (ax < 1)) | ((ax < 0.3) & (ay < 1))
    if family == "U":
        return (((ax > 0.4) & (ax < 1)) | ((y > 0.4) & (y < 1) & (ax < 1))) & (ay < 1)
    raise ValueError(f"unknown shape family {family!r}")


def _hsv(h_deg: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb((h_deg % 360.0) / 360.0, min(max(s, 0), 1), min(max(v, 0), 1)))


def _texture(cls: ShapeClass, size: int, theta: float, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = math.cos(theta) * xx + math.sin(theta) * yy
    w = -math.sin(theta) * xx + math.cos(theta) * yy
    f = cls.texture_freq * 2.0
    if cls.texture == "solid":
        return np.zeros((size, size))
    if cls.texture == "stripes":
        return np.sin(f * u + phase)
    if cls.texture == "checker":
        return np.sign(np.sin(f * u + phase) * np.sin(f * w + phase))
    return np.where(np.sin(f * u + phase) * np.sin(f * w + phase) > 0.6, 1.0, -0.3)


def _background(rng: np.random.Generator, size: int, cfg) -> np.ndarray:
    base = _hsv(rng.uniform(0, 360), rng.uniform(0.05, 0.25), rng.uniform(0.3, 0.7))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.broadcast_to(base, (size, size, 3)).copy()
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 3.0, size=2)
        ph = rng.uniform(0, 2 * math.pi)
        wave = np.sin(2 * math.pi * (fx * xx + fy * yy) + ph)
        tint = rng.uniform(-1, 1, size=3)
        img += cfg.data_bg_smooth_amp / 3 * wave[..., None] * tint
    return img


def _paint(img: np.ndarray, mask: np.ndarray, cls: ShapeClass, rng: np.random.Generator, cfg) -> None:
    hue = cls.hue + rng.uniform(-cfg.data_hue_jitter, cfg.data_hue_jitter)
    color = _hsv(hue, rng.uniform(0.65, 0.9), rng.uniform(0.7, 0.95))
    tex = _texture(cls, img.shape[0], rng.uniform(0, math.pi), rng.uniform(0, 2 * math.pi))
    shade = 1.0 + cfg.data_texture_amp * tex
    img[mask] = (color[None, :] * shade[mask][:, None])


def _place(rng, size, cfg, cls: ShapeClass, scale: float = 1.0):
    s = rng.uniform(cfg.data_size_min, cfg.data_size_max) * scale * size / 64.0
    margin = s * 0.8
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    return _shape_mask(cls.family, size, cx, cy, s, rng.uniform(0, 2 * math.pi))


def render_instance(cid: int, distractor_pool: Sequence[int], rng: np.random.Generator, size: int, cfg):
    """One image containing an instance of ``cid`` plus distractors; returns (image, mask)."""
    cls = shape_class(cid)
    others = [c for c in distractor_pool if c != cid]
    for _ in range(100):
        img = _background(rng, size, cfg)
        n_d = int(rng.integers(cfg.data_distractors_min, cfg.data_distractors_max + 1)) if others else 0
        target = _place(rng, size, cfg, cls)
        frac = target.mean()
        if not FG_MIN <= frac <= FG_MAX:
            continue
        for _ in range(n_d):
            dcls = shape_class(others[int(rng.integers(len(others)))])
            dm = _place(rng, size, cfg, dcls, scale=rng.uniform(0.7, 1.1))
            _paint(img, dm & ~target, dcls, rng, cfg)
        _paint(img, target, cls, rng, cfg)
        img += rng.normal(0.0, cfg.data_noise, size=img.shape)
        img = np.clip(img, 0.0, 1.0)
        return img.astype(np.float32), target.astype(np.float32)
    raise RuntimeError(f"could not render class {cid} within foreground bounds")


def _episode_rng(seed: int, fold: int, phase: str, k: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(fold), PHASES.index(phase), int(k)))
    return np.random.default_rng(ss)


def generate_episode(split: DatasetSplit, phase: str, k: int, seed: int, cfg=None) -> Episode:
    """Deterministic function of (fold, phase, k, seed) and the data calibration constants."""
    from .config import ModelConfig

    cfg = cfg or ModelConfig()
    if k < 1:
        raise ValueError("K must be >= 1")
    pool = split.classes(phase)
    if not pool:
        raise ValueError(f"empty class set for phase {phase!r}")
    rng = _episode_rng(seed, split.fold, phase, k)
    cid = int(pool[int(rng.integers(len(pool)))])
    size = cfg.image_size
    sup_i, sup_m = [], []
    for _ in range(k):
        i, m = render_instance(cid, pool, rng, size, cfg)
        sup_i.append(i)
        sup_m.append(m)
    qi, qm = render_instance(cid, pool, rng, size, cfg)
    return Episode(sup_i, sup_m, qi, qm, cid, int(seed), phase, split.fold)


# ---------------------------------------------------------------- metric

def miou(predictions: Sequence[np.ndarray], targets: Sequence[np.ndarray], class_ids: Sequence[int]):
    """Foreground IoU averaged per class, then over classes.

    Returns (per-class dict, mean). An episode with an empty union scores 1.
    """
    if not len(predictions) == len(targets) == len(class_ids):
        raise ValueError(f"length mismatch: {len(predictions)}, {len(targets)}, {len(class_ids)}")
    per: dict[int, list[float]] = {}
    for p, t, c in zip(predictions, targets, class_ids):
        p = np.asarray(p)
        t = np.asarray(t)
        if not (np.all((p == 0) | (p == 1)) and np.all((t == 0) | (t == 1))):
            raise ValueError("masks must be binary")
        if p.shape != t.shape:
            raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
        pb, tb = p.astype(bool), t.astype(bool)
        union = np.logical_or(pb, tb).sum()
        iou = 1.0 if union == 0 else np.logical_and(pb, tb).sum() / union
        per.setdefault(int(c), []).append(float(iou))
    per_class = {c: float(np.mean(v)) for c, v in sorted(per.items())}
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean


# ---------------------------------------------------------------- serialization

def save_episode(ep: Episode, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    h, w = ep.query_image.shape[:2]
    for k, (img, m) in enumerate(zip(ep.support_images, ep.support_masks)):
        (d / f"support_{k}_image.f32").write_bytes(np.asarray(img, dtype="<f4").tobytes())
        (d / f"support_{k}_mask.f32").write_bytes(np.asarray(m, dtype="<f4").tobytes())
    (d / "query_image.f32").write_bytes(np.asarray(ep.query_image, dtype="<f4").tobytes())
    (d / "query_mask.f32").write_bytes(np.asarray(ep._query_mask, dtype="<f4").tobytes())
    manifest = {
        "shape": f"{h},{w},{ep.query_image.shape[2]}",
        "class_id": ep.class_id,
        "seed": ep.seed,
        "K": ep.shots,
        "phase": ep.phase,
        "fold": ep.fold,
    }
    (d / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()))
    return d


def load_episode(directory) -> Episode:
    d = Path(directory)
    meta = {}
    for line in (d / "manifest.txt").read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    h, w, c = (int(x) for x in meta["shape"].split(","))

    def blob(name, shape):
        return np.frombuffer((d / name).read_bytes(), dtype="<f4").reshape(shape).astype(np.float32)

    k = int(meta["K"])
    sup_i = [blob(f"support_{i}_image.f32", (h, w, c)) for i in range(k)]
    sup_m = [blob(f"support_{i}_mask.f32", (h, w)) for i in range(k)]
    return Episode(sup_i, sup_m, blob("query_image.f32", (h, w, c)), blob("query_mask.f32", (h, w)),
                   int(meta["class_id"]), int(meta["seed"]), meta["phase"], int(meta.get("fold", 0)))
