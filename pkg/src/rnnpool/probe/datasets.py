"""Synthetic monochrome images of line segments and polygon outlines.

Images are 8-bit with uniform background noise. Strokes are 1-pixel
Bresenham lines at full intensity. Angles are measured counter-clockwise
from the horizontal with the y axis pointing up.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

ANGLES = tuple(range(0, 180, 20))
SHAPES = ("circle", "triangle", "square", "pentagon", "hexagon")
TASKS = ("lines-multiclass", "lines-multilabel", "shapes-multilabel")


@dataclass
class SynthDataset:
    images: np.ndarray      # (N, H, W, 1) uint8
    labels: np.ndarray      # (N,) class index or (N, L) multi-hot
    task: str
    names: tuple

    def __len__(self):
        return len(self.images)

    @property
    def multilabel(self) -> bool:
        return self.labels.ndim == 2

    def as_float(self) -> np.ndarray:
        """Images scaled to [0, 1]; non-8-bit images are returned as float unchanged."""
        if self.images.dtype == np.uint8:
            return self.images.astype(np.float64) / 255.0
        return self.images.astype(np.float64)

    def split(self, n_first: int):
        a = SynthDataset(self.images[:n_first], self.labels[:n_first], self.task, self.names)
        b = SynthDataset(self.images[n_first:], self.labels[n_first:], self.task, self.names)
        return a, b

    def export(self, directory) -> None:
        """Write every image as binary PGM plus a labels.csv manifest."""
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "labels.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "labels"])
            for i, img in enumerate(self.images):
                name = f"{i:06d}.pgm"
                write_pgm(os.path.join(directory, name), img[..., 0])
                lab = self.labels[i]
                if self.multilabel:
                    text = ";".join(self.names[j] for j in np.flatnonzero(lab))
                else:
                    text = self.names[int(lab)]
                w.writerow([name, text])


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Binary (P5) 8-bit PGM reader; comments are allowed in the header."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pos += 1
    return np.frombuffer(data, np.uint8, w * h, pos).reshape(h, w).copy()


def bresenham(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    pts = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        pts.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pts
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def _canvas(rng, size, noise_level):
    amp = int(round(noise_level * 255))
    if amp <= 0:
        return np.zeros((size, size), dtype=np.uint8)
    return rng.integers(0, amp + 1, size=(size, size)).astype(np.uint8)


def _draw(img, pts):
    h, w = img.shape
    for x, y in pts:
        if 0 <= x < w and 0 <= y < h:
            img[y, x] = 255


def _segment(rng, size, angle, min_len=None, max_len=None):
    """Endpoints of a random segment at `angle` that fits inside the image."""
    margin = 1
    min_len = min_len or max(size // 4, 6)
    max_len = max_len or size - 2 * margin - 1
    th = math.radians(angle)
    for _ in range(100):
        length = rng.uniform(min_len, max_len)
        dx = length * math.cos(th)
        dy = -length * math.sin(th)
        lo_x, hi_x = margin - min(dx, 0), size - 1 - margin - max(dx, 0)
        lo_y, hi_y = margin - min(dy, 0), size - 1 - margin - max(dy, 0)
        if lo_x <= hi_x and lo_y <= hi_y:
            x0, y0 = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
            return (int(round(x0)), int(round(y0)), int(round(x0 + dx)), int(round(y0 + dy)))
    raise RuntimeError("could not place segment")


def gen_lines_multiclass(count: int, size: int = 32, noise_level: float = 0.1,
                         seed=0) -> SynthDataset:
    """One segment per image; classes are the 9 angles, stratified and shuffled."""
    if size not in (32, 64):
        raise ValueError("size must be 32 or 64")
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % len(ANGLES)
    rng.shuffle(labels)
    images = np.empty((count, size, size, 1), dtype=np.uint8)
    for i, lab in enumerate(labels):
        img = _canvas(rng, size, noise_level)
        _draw(img, bresenham(*_segment(rng, size, ANGLES[lab])))
        images[i, ..., 0] = img
    return SynthDataset(images, labels, "lines-multiclass", tuple(f"{a}deg" for a in ANGLES))


def gen_lines_multilabel(count: int, size: int = 32, noise_level: float = 0.1, seed=0,
                         max_lines: int = 3) -> SynthDataset:
    """One to max_lines segments with distinct angles per image."""
    if size not in (32, 64):
        raise ValueError("size must be 32 or 64")
    rng = np.random.default_rng(seed)
    images = np.empty((count, size, size, 1), dtype=np.uint8)
    labels = np.zeros((count, len(ANGLES)), dtype=np.int64)
    for i in range(count):
        img = _canvas(rng, size, noise_level)
        k = int(rng.integers(1, max_lines + 1))
        for a in rng.choice(len(ANGLES), size=k, replace=False):
            _draw(img, bresenham(*_segment(rng, size, ANGLES[a])))
            labels[i, a] = 1
        images[i, ..., 0] = img
    return SynthDataset(images, labels, "lines-multilabel", tuple(f"{a}deg" for a in ANGLES))


def _shape_points(kind, cx, cy, radius, rot):
    if kind == "circle":
        pts = set()
        steps = max(int(8 * radius), 16)
        for t in range(steps):
            a = 2 * math.pi * t / steps
            pts.add((int(round(cx + radius * math.cos(a))), int(round(cy + radius * math.sin(a)))))
        return sorted(pts)
    n = SHAPES.index(kind) + 2
    verts = [(int(round(cx + radius * math.cos(rot + 2 * math.pi * j / n))),
              int(round(cy + radius * math.sin(rot + 2 * math.pi * j / n)))) for j in range(n)]
    pts = []
    for j in range(n):
        pts.extend(bresenham(*verts[j], *verts[(j + 1) % n]))
    return pts


def gen_shapes_multilabel(count: int, size: int = 64, noise_level: float = 0.1, seed=0,
                          max_shapes: int = 3) -> SynthDataset:
    """Outlines of a non-empty subset of the 5 shapes, placed without overlap."""
    rng = np.random.default_rng(seed)
    images = np.empty((count, size, size, 1), dtype=np.uint8)
    labels = np.zeros((count, len(SHAPES)), dtype=np.int64)
    r_min, r_max = size / 10, size / 6
    for i in range(count):
        while True:
            img = _canvas(rng, size, noise_level)
            k = int(rng.integers(1, max_shapes + 1))
            kinds = rng.choice(len(SHAPES), size=k, replace=False)
            placed = []
            ok = True
            for s in kinds:
                for _ in range(200):
                    rad = rng.uniform(r_min, r_max)
                    cx, cy = rng.uniform(rad + 1, size - rad - 2, size=2)
                    if all(math.hypot(cx - x, cy - y) > rad + r + 2 for x, y, r in placed):
                        break
                else:
                    ok = False
                    break
                placed.append((cx, cy, rad))
                _draw(img, _shape_points(SHAPES[s], cx, cy, rad, rng.uniform(0, 2 * math.pi)))
            if ok:
                break
        labels[i, kinds] = 1
        images[i, ..., 0] = img
    return SynthDataset(images, labels, "shapes-multilabel", SHAPES)


def generate(task: str, count: int, size: int, noise_level: float = 0.1, seed=0):
    fn = {"lines-multiclass": gen_lines_multiclass, "lines-multilabel": gen_lines_multilabel,
          "shapes-multilabel": gen_shapes_multilabel}.get(task)
    if fn is None:
        raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
    return fn(count, size, noise_level, seed)
