"""Identity datasets, a synthetic pedestrian generator, and anchor-based batching.

Camera A is the probe view, camera B the gallery view. Images are stored
channels-first, ``(3, 230, 80)``, with values in ``[0, 1]``.

On-disk layout::

    root/manifest.json        {"train_ids": [...], "test_ids": [...]}
    root/cam_a/<pid>_<idx>.png
    root/cam_b/<pid>_<idx>.png
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SHAPE = (3, 230, 80)
CAMERA_DIRS = ("cam_a", "cam_b")
_NAME_RE = re.compile(r"^(\d+)_(\d+)\.png$")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # (n, 3, H, W) float32
    person_ids: np.ndarray      # (n,)
    camera_ids: np.ndarray      # (n,) 0 = probe view A, 1 = gallery view B
    image_index: np.ndarray     # (n,) index within (person, camera)
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.person_ids = np.asarray(self.person_ids, dtype=np.int64)
        self.camera_ids = np.asarray(self.camera_ids, dtype=np.int64)
        self.image_index = np.asarray(self.image_index, dtype=np.int64)
        self.train_ids = [int(i) for i in self.train_ids]
        self.test_ids = [int(i) for i in self.test_ids]
        self.validate()

    def __len__(self):
        return len(self.person_ids)

    def validate(self):
        n = len(self.person_ids)
        if not (len(self.images) == len(self.camera_ids) == len(self.image_index) == n):
            raise DatasetError("images and label arrays have different lengths")
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise DatasetError(f"train/test identity sets overlap: {sorted(overlap)}")
        for ids in (self.train_ids, self.test_ids):
            if len(set(ids)) != len(ids):
                raise DatasetError("duplicate person ids in split")
        for pid in self.train_ids + self.test_ids:
            for cam in (0, 1):
                if not np.any((self.person_ids == pid) & (self.camera_ids == cam)):
                    raise DatasetError(f"identity {pid} has no image in {CAMERA_DIRS[cam]}")

    def indices(self, pids, camera: int) -> np.ndarray:
        return np.flatnonzero(np.isin(self.person_ids, list(pids)) & (self.camera_ids == camera))


def _body_template(rng, palette, height, width):
    """Identity appearance: coloured body bands with a striped texture."""
    # head, torso, legs, feet with randomised boundaries
    cuts = np.sort(rng.uniform([0.12, 0.45, 0.85], [0.2, 0.6, 0.92]))
    bounds = np.concatenate([[0], (cuts * height).astype(int), [height]])
    colors = palette[rng.integers(0, len(palette), size=4)]
    freq = rng.uniform(0.1, 0.6)
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.02, 0.08)
    img = np.empty((3, height, width))
    for k in range(4):
        img[:, bounds[k]:bounds[k + 1], :] = colors[k][:, None, None]
    rows = np.arange(height)[:, None] + 0.3 * np.arange(width)[None, :]
    return img + amp * np.sin(freq * rows + phase)[None]


def _shift_columns(img, dx):
    if dx == 0:
        return img
    out = np.roll(img, dx, axis=2)
    if dx > 0:
        out[:, :, :dx] = img[:, :, :1]
    else:
        out[:, :, dx:] = img[:, :, -1:]
    return out


def generate_synthetic(num_ids: int, images_per_view: int, seed: int = 0, test_ids: int = 0,
                       noise_sigma: float = 0.05, max_jitter: int = 4, brightness: float = 0.15,
                       clutter: float = 0.2, palette_size: int = 6, image_shape=IMAGE_SHAPE) -> Dataset:
    """Deterministic two-camera identity dataset.

    ``num_ids`` identities form the training split, ``test_ids`` further
    identities the test split. Body-band colours come from a shared palette of
    ``palette_size`` colours, so identities overlap. Every image gets fresh
    horizontal jitter and pixel noise, and a random flat background colour in
    the outer ``clutter`` fraction of columns on each side; camera-B images
    additionally get a global brightness shift.
    """
    if num_ids < 0 or num_ids + test_ids < 2:
        raise DatasetError("need at least two identities in total")
    if images_per_view < 1:
        raise DatasetError("images_per_view must be >= 1")
    rng = np.random.default_rng(seed)
    _, h, w = image_shape
    palette = rng.uniform(0.2, 0.8, size=(palette_size, 3))
    margin = int(round(w * clutter))
    total = num_ids + test_ids
    images, pids, cams, idxs = [], [], [], []
    for pid in range(total):
        template = _body_template(rng, palette, h, w)
        for cam in (0, 1):
            for k in range(images_per_view):
                dx = int(rng.integers(-max_jitter, max_jitter + 1)) if max_jitter else 0
                img = _shift_columns(template, dx)
                if margin:
                    img = img.copy()
                    img[:, :, :margin] = rng.uniform(0, 1, size=(3, 1, 1))
                    img[:, :, w - margin:] = rng.uniform(0, 1, size=(3, 1, 1))
                if cam == 1 and brightness:
                    img = img * (1.0 + rng.uniform(-brightness, brightness))
                if noise_sigma:
                    img = img + rng.normal(0.0, noise_sigma, size=img.shape)
                images.append(np.clip(img, 0.0, 1.0))
                pids.append(pid)
                cams.append(cam)
                idxs.append(k)
    return Dataset(np.asarray(images, dtype=np.float32), pids, cams, idxs,
                   train_ids=list(range(num_ids)), test_ids=list(range(num_ids, total)))


def write_dataset(dataset: Dataset, root) -> Path:
    """Materialise ``dataset`` to the directory layout described above."""
    root = Path(root)
    for d in CAMERA_DIRS:
        (root / d).mkdir(parents=True, exist_ok=True)
    for img, pid, cam, k in zip(dataset.images, dataset.person_ids, dataset.camera_ids, dataset.image_index):
        arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr, mode="RGB").save(root / CAMERA_DIRS[cam] / f"{pid}_{k}.png", optimize=False)
    manifest = {"train_ids": dataset.train_ids, "test_ids": dataset.test_ids}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return root


def _read_image(path, shape):
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (shape[2], shape[1]):
                im = im.resize((shape[2], shape[1]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def load_dataset(root, manifest=None, image_shape=IMAGE_SHAPE) -> Dataset:
    """Read a dataset directory; images are bilinearly resized and scaled to [0, 1]."""
    root = Path(root)
    manifest_path = Path(manifest) if manifest is not None else root / "manifest.json"
    try:
        meta = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {manifest_path}: {exc}") from exc
    wanted = set(meta.get("train_ids", [])) | set(meta.get("test_ids", []))
    overlap = set(meta.get("train_ids", [])) & set(meta.get("test_ids", []))
    if overlap:
        raise DatasetError(f"train/test identity sets overlap: {sorted(overlap)}")
    images, pids, cams, idxs = [], [], [], []
    for cam, d in enumerate(CAMERA_DIRS):
        folder = root / d
        if not folder.is_dir():
            raise DatasetError(f"missing camera directory {folder}")
        entries = []
        for path in folder.iterdir():
            m = _NAME_RE.match(path.name)
            if m and int(m.group(1)) in wanted:
                entries.append((int(m.group(1)), int(m.group(2)), path))
        for pid, k, path in sorted(entries):
            images.append(_read_image(path, image_shape))
            pids.append(pid)
            cams.append(cam)
            idxs.append(k)
    images = np.asarray(images, dtype=np.float32).reshape((-1,) + tuple(image_shape))
    return Dataset(images, pids, cams, idxs, meta.get("train_ids", []), meta.get("test_ids", []))


@dataclass
class PairBatch:
    """Pairs expanded from anchor units, indexing a de-duplicated image list.

    ``image_indices`` are dataset indices; ``ia``/``ib`` index into it. Pairs
    are laid out unit by unit: M positives then N negatives per anchor.
    """

    image_indices: np.ndarray
    ia: np.ndarray
    ib: np.ndarray
    y: np.ndarray
    num_positives: int
    num_negatives: int

    @property
    def num_anchors(self) -> int:
        return len(self.y) // (self.num_positives + self.num_negatives)

    def triplets(self):
        """Every (anchor, positive, negative) combination within each unit."""
        m, n = self.num_positives, self.num_negatives
        ib = self.ib.reshape(-1, m + n)
        anchors = np.repeat(self.ia[:: m + n], m * n)
        pos = np.repeat(ib[:, :m], n, axis=1).ravel()
        neg = np.tile(ib[:, m:], (1, m)).ravel()
        return anchors, pos, neg


def _choose(rng, pool, k):
    replace = len(pool) < k
    return rng.choice(pool, size=k, replace=replace)


def make_minibatch(dataset: Dataset, A: int, M: int, N: int, rng, ids=None) -> PairBatch:
    """Sample ``A`` anchor units of ``M`` positives and ``N`` negatives each."""
    if A < 1 or M < 1 or N < 1:
        raise ValueError("A, M and N must all be >= 1")
    ids = np.asarray(dataset.train_ids if ids is None else ids)
    if len(ids) < 2:
        raise DatasetError("need at least two identities to form negative pairs")
    anchor_ids = rng.choice(ids, size=A, replace=A > len(ids))
    gallery_by_id = {int(p): dataset.indices([p], 1) for p in ids}
    pairs_a, pairs_b, labels = [], [], []
    for pid in anchor_ids:
        pid = int(pid)
        anchor = int(rng.choice(dataset.indices([pid], 0)))
        positives = _choose(rng, gallery_by_id[pid], M)
        others = ids[ids != pid]
        neg_ids = _choose(rng, others, N)
        negatives = [int(rng.choice(gallery_by_id[int(q)])) for q in neg_ids]
        for b in positives:
            pairs_a.append(anchor)
            pairs_b.append(int(b))
            labels.append(1)
        for b in negatives:
            pairs_a.append(anchor)
            pairs_b.append(b)
            labels.append(-1)
    unique, inverse = np.unique(np.concatenate([pairs_a, pairs_b]), return_inverse=True)
    k = len(pairs_a)
    return PairBatch(unique, inverse[:k], inverse[k:], np.asarray(labels, dtype=np.int64), M, N)
