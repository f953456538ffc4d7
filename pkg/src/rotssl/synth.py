"""Synthetic rotation benchmark: a wireframe rendered at known rotations, with
labeled / unlabeled / val / test splits and out-of-distribution distractors.

On-disk dataset layout (one directory per split)::

    manifest.json   human-readable: format, version, split, seed, image size,
                    count, and per-sample {id, is_ood, label}; labels are 9
                    row-major floats or null
    images.bin      8-byte magic b"RSSLIMG\\x00", then little-endian uint32
                    version, count, height, width, then count*height*width
                    little-endian float32 pixels in sample order
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from rotssl import so3

IMAGE_SIZE = 32
BLOB_MAGIC = b"RSSLIMG\x00"
FORMAT_VERSION = 1
SPLITS = ("labeled", "unlabeled", "val", "test")

# Mirror-symmetric in x (so a left-right flip is a relabeling), but without
# any rotational self-symmetry: nose towards +z, tail towards -z, roof +y.
_VERTS = {
    "bl": (-0.45, -0.50, -0.30), "br": (0.45, -0.50, -0.30),
    "tl": (-0.45, 0.40, -0.30), "tr": (0.45, 0.40, -0.30),
    "apex": (0.0, 0.78, -0.30),
    "brow": (0.0, 0.10, 0.05), "nose": (0.0, -0.10, 0.65),
    "el": (-0.22, 0.12, 0.30), "er": (0.22, 0.12, 0.30),
    "cl": (-0.25, -0.50, 0.20), "cr": (0.25, -0.50, 0.20),
    "tail": (0.0, 0.45, -0.85),
}
_EDGES = [
    ("bl", "br"), ("br", "tr"), ("tr", "tl"), ("tl", "bl"),
    ("tl", "apex"), ("tr", "apex"),
    ("brow", "nose"), ("tl", "el"), ("tr", "er"), ("el", "brow"), ("er", "brow"),
    ("cl", "cr"), ("bl", "cl"), ("br", "cr"), ("apex", "tail"),
]

LINE_HALF_WIDTH = 2.0
PROJ_SCALE = 0.45


class DatasetFormatError(ValueError):
    pass


def make_object():
    """Wireframe segments as an array of shape ``(n_segments, 2, 3)``."""
    return np.array([[_VERTS[a], _VERTS[b]] for a, b in _EDGES], dtype=float)


def render_segments(segments, size=IMAGE_SIZE):
    """Orthographic anti-aliased line drawing of 3D segments (already posed).

    Brightness and line width fall off with depth; without that cue a
    mirror-symmetric object and its depth-reversed pose project identically.
    """
    c = (size - 1) / 2.0
    k = PROJ_SCALE * size
    p0, p1 = segments[:, 0], segments[:, 1]
    a = np.stack([c + k * p0[:, 0], c - k * p0[:, 1]], axis=1)
    b = np.stack([c + k * p1[:, 0], c - k * p1[:, 1]], axis=1)
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=1), 1e-12)
    t = np.clip(((pts[:, None, :] - a[None]) * ab[None]).sum(-1) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    dist = np.linalg.norm(pts[:, None, :] - closest, axis=-1)
    depth = p0[None, :, 2] + t * (p1[None, :, 2] - p0[None, :, 2])
    near = np.clip((depth + 1.0) / 2.0, 0.0, 1.0)
    shade = 0.15 + 0.85 * near
    half_width = LINE_HALF_WIDTH * (0.5 + near)
    cover = np.clip(1.0 - dist / half_width, 0.0, 1.0) * shade
    img = cover.max(axis=1).reshape(size, size)
    # Rounded to float32 so that the on-disk blob round-trips exactly.
    return np.clip(img, 0.0, 1.0).astype(np.float32).astype(float)


def render(r, size=IMAGE_SIZE, obj=None):
    """Image of the object under rotation ``r``."""
    seg = make_object() if obj is None else obj
    posed = seg @ np.asarray(r, dtype=float).T
    return render_segments(posed, size)


@dataclass
class Sample:
    image: np.ndarray
    label: np.ndarray | None
    is_ood: bool
    id: int


@dataclass
class DataSet:
    images: np.ndarray
    labels: np.ndarray
    is_ood: np.ndarray
    ids: np.ndarray
    split: str
    seed: int

    def __len__(self):
        return len(self.ids)

    @property
    def has_label(self):
        return ~np.isnan(self.labels[:, 0, 0])

    def __getitem__(self, i):
        lab = self.labels[i] if self.has_label[i] else None
        return Sample(self.images[i], lab, bool(self.is_ood[i]), int(self.ids[i]))

    @property
    def samples(self):
        return [self[i] for i in range(len(self))]

    def subset(self, idx):
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(int)
        return DataSet(self.images[idx], self.labels[idx], self.is_ood[idx], self.ids[idx],
                       self.split, self.seed)


def _labeled_split(rng, n, split, seed, start_id):
    rots = so3.sample_uniform_rotation(rng, n) if n else np.zeros((0, 3, 3))
    imgs = np.array([render(r) for r in rots]).reshape(n, IMAGE_SIZE, IMAGE_SIZE)
    ids = np.arange(start_id, start_id + n)
    return DataSet(imgs, rots, np.zeros(n, dtype=bool), ids, split, seed)


def _distractor_wireframe(rng):
    pts = rng.uniform(-0.7, 0.7, size=(7, 3))
    n_seg = rng.integers(6, 13)
    idx = rng.integers(0, len(pts), size=(n_seg, 2))
    seg = pts[idx]
    return render_segments(seg @ so3.sample_uniform_rotation(rng).T)


def _noise_image(rng, mean, std):
    raw = ndimage.gaussian_filter(rng.standard_normal((IMAGE_SIZE, IMAGE_SIZE)), sigma=1.0)
    raw = (raw - raw.mean()) / (raw.std() + 1e-12)
    img = np.clip(mean + std * raw, 0.0, 1.0)
    return img.astype(np.float32).astype(float)


def gen_dataset(n_labeled=500, n_unlabeled=4500, ood_frac=0.25, seed=0, n_val=500, n_test=500):
    """Build all four splits deterministically from ``seed``.

    Unlabeled out-of-distribution items are half random wireframes and half
    smoothed noise matched to the in-distribution pixel mean and std.

    Returns:
        dict mapping split name to ``DataSet``.
    """
    if min(n_labeled, n_unlabeled, n_val, n_test) < 0:
        raise ValueError("split sizes must be non-negative")
    if not 0.0 <= ood_frac < 1.0:
        raise ValueError("ood_frac must lie in [0, 1)")
    ss = np.random.SeedSequence(seed)
    r_lab, r_unl, r_val, r_test, r_ood, r_perm = (np.random.default_rng(s) for s in ss.spawn(6))
    out = {"labeled": _labeled_split(r_lab, n_labeled, "labeled", seed, 0)}
    n_ood = int(round(ood_frac * n_unlabeled))
    n_id = n_unlabeled - n_ood
    unl = _labeled_split(r_unl, n_id, "unlabeled", seed, 0)
    ref = unl.images if n_id else out["labeled"].images
    mean = float(ref.mean()) if ref.size else 0.1
    std = float(ref.std()) if ref.size else 0.2
    ood = [(_distractor_wireframe(r_ood) if i % 2 == 0 else _noise_image(r_ood, mean, std))
           for i in range(n_ood)]
    images = np.concatenate([unl.images, np.array(ood).reshape(n_ood, IMAGE_SIZE, IMAGE_SIZE)])
    flags = np.concatenate([np.zeros(n_id, dtype=bool), np.ones(n_ood, dtype=bool)])
    order = r_perm.permutation(n_unlabeled)
    base = n_labeled
    out["unlabeled"] = DataSet(images[order], np.full((n_unlabeled, 3, 3), np.nan), flags[order],
                               np.arange(base, base + n_unlabeled), "unlabeled", seed)
    base += n_unlabeled
    out["val"] = _labeled_split(r_val, n_val, "val", seed, base)
    base += n_val
    out["test"] = _labeled_split(r_test, n_test, "test", seed, base)
    return out


def save_dataset(ds, path):
    """Write ``manifest.json`` and ``images.bin`` into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    n = len(ds)
    h, w = ds.images.shape[1:] if n else (IMAGE_SIZE, IMAGE_SIZE)
    has = ds.has_label
    manifest = {
        "format": "rotssl-dataset",
        "version": FORMAT_VERSION,
        "split": ds.split,
        "seed": int(ds.seed),
        "image_size": [int(h), int(w)],
        "count": n,
        "blob": "images.bin",
        "samples": [
            {"id": int(ds.ids[i]), "is_ood": bool(ds.is_ood[i]),
             "label": [float(v) for v in ds.labels[i].ravel()] if has[i] else None}
            for i in range(n)
        ],
    }
    with open(os.path.join(path, "images.bin"), "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, n, h, w))
        fh.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_dataset(path):
    """Inverse of ``save_dataset``.

    Raises:
        DatasetFormatError: on bad magic, version mismatch, or truncation.
    """
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: unreadable manifest ({exc})") from exc
    if manifest.get("format") != "rotssl-dataset" or manifest.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported manifest format/version")
    with open(os.path.join(path, manifest.get("blob", "images.bin")), "rb") as fh:
        blob = fh.read()
    if blob[:8] != BLOB_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic bytes in image blob")
    if len(blob) < 24:
        raise DatasetFormatError(f"{path}: truncated image blob header")
    version, n, h, w = struct.unpack_from("<IIII", blob, 8)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: blob version {version} != {FORMAT_VERSION}")
    if n != manifest["count"] or len(manifest["samples"]) != n:
        raise DatasetFormatError(f"{path}: manifest count does not match blob count")
    if len(blob) - 24 != 4 * n * h * w:
        raise DatasetFormatError(f"{path}: image blob truncated")
    images = np.frombuffer(blob, "<f4", n * h * w, 24).reshape(n, h, w).astype(float)
    labels = np.full((n, 3, 3), np.nan)
    for i, s in enumerate(manifest["samples"]):
        if s["label"] is not None:
            labels[i] = np.asarray(s["label"], dtype=float).reshape(3, 3)
    ids = np.array([s["id"] for s in manifest["samples"]], dtype=int)
    flags = np.array([s["is_ood"] for s in manifest["samples"]], dtype=bool)
    return DataSet(images, labels, flags, ids, manifest["split"], manifest["seed"])
