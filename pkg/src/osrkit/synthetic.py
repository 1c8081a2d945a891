"""Deterministic synthetic digit corpus in the real dataset file formats.

Renders 28x28 grayscale glyph images (10 digit classes with per-sample
affine jitter, stroke-width variation and pixel noise) and writes them as
canonical IDX files, so the whole pipeline - binary parsing included - can
run in environments where the real datasets cannot be downloaded. A helper
for CIFAR-format batch files exists for format-level testing.

Generation is a pure function of the seed.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .dataio import CIFAR_RECORD_BYTES, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC

IMG = 28
_BOX_OFFSET = 4.0
_BOX_SIZE = 20.0

# digit skeletons as polylines in a unit box (x right, y down)


def _ellipse(cx, cy, rx, ry, n=14, a0=0.0, a1=2 * np.pi):
    ang = np.linspace(a0, a1, n)
    return list(zip(cx + rx * np.cos(ang), cy + ry * np.sin(ang)))


GLYPHS: dict[int, list[list[tuple[float, float]]]] = {
    0: [_ellipse(0.5, 0.5, 0.26, 0.38)],
    1: [[(0.38, 0.3), (0.56, 0.12)], [(0.56, 0.12), (0.56, 0.88)]],
    2: [[(0.26, 0.3), (0.3, 0.16), (0.5, 0.1), (0.68, 0.17), (0.73, 0.32),
         (0.62, 0.5), (0.38, 0.68), (0.26, 0.86)],
        [(0.26, 0.86), (0.76, 0.86)]],
    3: [[(0.28, 0.18), (0.45, 0.1), (0.65, 0.16), (0.7, 0.3), (0.58, 0.44),
         (0.44, 0.48)],
        [(0.44, 0.48), (0.64, 0.53), (0.73, 0.67), (0.66, 0.83), (0.46, 0.9),
         (0.28, 0.82)]],
    4: [[(0.64, 0.14), (0.64, 0.88)], [(0.64, 0.14), (0.24, 0.6), (0.82, 0.6)]],
    5: [[(0.72, 0.12), (0.32, 0.12), (0.29, 0.45)],
        [(0.29, 0.45), (0.52, 0.4), (0.68, 0.48), (0.73, 0.64), (0.64, 0.82),
         (0.42, 0.88), (0.27, 0.79)]],
    6: [[(0.66, 0.12), (0.46, 0.26), (0.33, 0.5), (0.31, 0.72), (0.43, 0.87),
         (0.6, 0.85), (0.69, 0.71), (0.64, 0.56), (0.48, 0.52), (0.34, 0.62)]],
    7: [[(0.25, 0.14), (0.75, 0.14), (0.44, 0.88)]],
    8: [_ellipse(0.5, 0.3, 0.19, 0.17), _ellipse(0.5, 0.67, 0.23, 0.2)],
    9: [[(0.36, 0.88), (0.54, 0.74), (0.67, 0.5), (0.69, 0.28), (0.57, 0.13),
         (0.4, 0.15), (0.31, 0.29), (0.36, 0.44), (0.52, 0.48), (0.66, 0.38)]],
}

# jitter ranges chosen so classes stay recognisable but overlap enough
# that the open-set task is not trivially saturated
_ROT_RANGE = 0.36        # radians, ~21 degrees
_SCALE_RANGE = (0.60, 1.05)
_SHEAR_RANGE = 0.22
_SHIFT_RANGE = 3.2       # pixels
_STROKE_RANGE = (0.42, 1.05)
_AMPLITUDE_RANGE = (0.5, 0.95)
_NOISE_STD = 26.0
_POINT_JITTER = 0.0      # per-point glyph shape deformation (unit-box sigma)
_TAPER_RANGE = 0.0       # stroke-width taper along each segment
_SEG_AMP_MIN = 1.0       # lower bound of per-segment intensity jitter


def _glyph_geometry(digit: int) -> tuple[np.ndarray, np.ndarray]:
    """Unique polyline points (P, 2) plus segment endpoint indices (S, 2);
    segments of one polyline share their joint points, so per-point jitter
    deforms the glyph without disconnecting strokes."""
    points, seg_idx = [], []
    for line in GLYPHS[digit]:
        start = len(points)
        points.extend(line)
        seg_idx.extend((start + i, start + i + 1) for i in range(len(line) - 1))
    return np.asarray(points, dtype=np.float64), np.asarray(seg_idx, dtype=np.int64)


def corpus_fingerprint() -> str:
    """Short hash of the glyph geometry and jitter parameters; changes
    whenever generated corpora would change, so caches can key on it."""
    import hashlib
    import json

    payload = json.dumps({
        "glyphs": {str(k): v for k, v in GLYPHS.items()},
        "params": [_ROT_RANGE, _SCALE_RANGE, _SHEAR_RANGE, _SHIFT_RANGE,
                   _STROKE_RANGE, _AMPLITUDE_RANGE, _NOISE_STD,
                   _POINT_JITTER, _TAPER_RANGE, _SEG_AMP_MIN],
    }, sort_keys=True, default=float)
    return hashlib.sha256(payload.encode()).hexdigest()[:10]


def render_digits(n_per_class: int, seed: int,
                  classes: range | list[int] = range(10)) -> tuple[np.ndarray, np.ndarray]:
    """Render `n_per_class` jittered samples of each class; returns
    (images uint8 (N,28,28), labels int64 (N,)) shuffled deterministically."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:IMG, 0:IMG]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)  # (784, 2)

    all_images, all_labels = [], []
    for digit in classes:
        base_points, seg_idx = _glyph_geometry(digit)
        n = n_per_class
        theta = rng.uniform(-_ROT_RANGE, _ROT_RANGE, n)
        sx = rng.uniform(*_SCALE_RANGE, n)
        sy = rng.uniform(*_SCALE_RANGE, n)
        shear = rng.uniform(-_SHEAR_RANGE, _SHEAR_RANGE, n)
        shift = rng.uniform(-_SHIFT_RANGE, _SHIFT_RANGE, (n, 2))
        stroke = rng.uniform(*_STROKE_RANGE, n)
        amp = rng.uniform(*_AMPLITUDE_RANGE, n)
        jitter = rng.normal(0.0, _POINT_JITTER or 1e-12, (n, len(base_points), 2))
        taper = rng.uniform(-_TAPER_RANGE, _TAPER_RANGE, (n, len(seg_idx)))
        seg_amp = rng.uniform(_SEG_AMP_MIN, 1.0, (n, len(seg_idx)))

        cos_t, sin_t = np.cos(theta), np.sin(theta)
        # per-sample affine: rotate, shear, anisotropic scale (about box center)
        a11 = sx * (cos_t + shear * sin_t)
        a12 = sx * (-sin_t + shear * cos_t)
        a21 = sy * sin_t
        a22 = sy * cos_t
        mats = np.stack([np.stack([a11, a12], -1), np.stack([a21, a22], -1)], 1)  # (n,2,2)

        deformed = base_points[None] + jitter - 0.5  # rotate about the box center
        warped = np.einsum("nij,npj->npi", mats, deformed) + 0.5
        warped = warped * _BOX_SIZE + _BOX_OFFSET + shift[:, None, :]
        pts = warped[:, seg_idx, :]  # (n, S, 2, 2)

        canvas = np.zeros((n, IMG * IMG), dtype=np.float64)
        for s in range(pts.shape[1]):
            a = pts[:, s, 0, :][:, None, :]   # (n, 1, 2)
            b = pts[:, s, 1, :][:, None, :]
            v = b - a
            vv = (v * v).sum(-1)
            vv[vv == 0] = 1e-12
            t = ((pix[None] - a) * v).sum(-1) / vv
            np.clip(t, 0.0, 1.0, out=t)
            proj = a + t[..., None] * v
            d2 = ((pix[None] - proj) ** 2).sum(-1)
            sigma = stroke[:, None] * (1.0 + taper[:, s][:, None] * (t - 0.5))
            np.maximum(sigma, 0.22, out=sigma)
            contribution = seg_amp[:, s][:, None] * np.exp(-0.5 * d2 / (sigma * sigma))
            np.maximum(canvas, contribution, out=canvas)

        img = np.clip(1.55 * canvas, 0.0, 1.0) * amp[:, None] * 255.0
        img += rng.normal(0.0, _NOISE_STD, img.shape)
        all_images.append(np.clip(img, 0, 255).astype(np.uint8).reshape(n, IMG, IMG))
        all_labels.append(np.full(n, digit, dtype=np.int64))

    images = np.concatenate(all_images)
    labels = np.concatenate(all_labels)
    order = rng.permutation(len(images))
    return images[order], labels[order]


def write_idx(images: np.ndarray, labels: np.ndarray,
              images_path: str | Path, labels_path: str | Path) -> None:
    """Write an (N,H,W) uint8 stack and its labels as canonical IDX files."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    images_path.parent.mkdir(parents=True, exist_ok=True)
    n, h, w = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(labels.astype(np.uint8).tobytes())


def write_cifar10_batches(data_dir: str | Path, images: np.ndarray,
                          labels: np.ndarray, test_images: np.ndarray,
                          test_labels: np.ndarray) -> None:
    """Write (N,32,32,3) uint8 arrays as the six CIFAR-10 binary batches."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)

    def encode(imgs, labs):
        planes = imgs.transpose(0, 3, 1, 2).reshape(len(imgs), -1)
        recs = np.empty((len(imgs), CIFAR_RECORD_BYTES), dtype=np.uint8)
        recs[:, 0] = labs
        recs[:, 1:] = planes
        return recs.tobytes()

    chunks = np.array_split(np.arange(len(images)), 5)
    for i, chunk in enumerate(chunks, start=1):
        (data_dir / f"data_batch_{i}.bin").write_bytes(encode(images[chunk], labels[chunk]))
    (data_dir / "test_batch.bin").write_bytes(encode(test_images, test_labels))


def generate_corpus(data_dir: str | Path, n_train_per_class: int = 1200,
                    n_test_per_class: int = 400, seed: int = 20240601) -> Path:
    """Write a full MNIST-layout synthetic corpus (train + t10k IDX files)."""
    data_dir = Path(data_dir)
    train_images, train_labels = render_digits(n_train_per_class, seed)
    test_images, test_labels = render_digits(n_test_per_class, seed + 1)
    write_idx(train_images, train_labels,
              data_dir / "train-images-idx3-ubyte", data_dir / "train-labels-idx1-ubyte")
    write_idx(test_images, test_labels,
              data_dir / "t10k-images-idx3-ubyte", data_dir / "t10k-labels-idx1-ubyte")
    return data_dir


if __name__ == "__main__":  # pragma: no cover
    import sys

    target = sys.argv[1] if len(sys.argv) > 1 else "data/synthetic"
    generate_corpus(target)
    print(f"wrote synthetic corpus to {target}")
