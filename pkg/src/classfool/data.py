"""Dataset acquisition and preparation.

Covers IDX image loading/saving, synthetic Gaussian blob generation,
train/test splitting, source/non-source pool construction with confidence
filtering, pool persistence and perturbation image export.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .container import atomic_write_bytes, load_container, save_container
from .exceptions import ConfigError, FormatError, ShapeError, ValidationError
from .validation import check_labels, check_matrix, check_value_range, check_vector

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

POOLS_KIND = "classfool-pools"
POOLS_VERSION = 1


@dataclass
class SampleBatch:
    """A batch of flattened samples with integer labels and a value range.

    ``ids`` are opaque per-sample identifiers used to assert disjointness
    between data partitions; slicing and sampling preserve them.
    """

    data: np.ndarray
    labels: np.ndarray
    value_range: tuple[float, float]
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.data = check_matrix(self.data, "data")
        self.labels = check_labels(self.labels, self.data.shape[0], name="labels")
        self.value_range = check_value_range(self.value_range)
        lo, hi = self.value_range
        if self.data.min() < lo or self.data.max() > hi:
            raise ValidationError(
                f"data values outside declared range [{lo}, {hi}]")
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        else:
            self.ids = np.asarray(self.ids, dtype=np.int64)
            if self.ids.shape != self.labels.shape:
                raise ShapeError("ids must have one entry per sample")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def take(self, indices) -> "SampleBatch":
        """Row subset (repetition allowed); identifiers follow the rows."""
        idx = np.asarray(indices, dtype=np.int64)
        return SampleBatch(self.data[idx], self.labels[idx], self.value_range,
                           self.ids[idx])


@dataclass
class TrainPools:
    """Training-side pools an attack consumes."""

    source_train: SampleBatch
    source_eval: SampleBatch
    nonsource_train: SampleBatch
    source_label: int
    confidence_floor: float


@dataclass
class PoolSet:
    """Full train/eval/test partitioning for one source class.

    All five partitions are pairwise disjoint by sample identifier;
    ``nonsource_test`` maps each non-source class to its test batch.
    """

    source_train: SampleBatch
    source_eval: SampleBatch
    source_test: SampleBatch
    nonsource_train: SampleBatch
    nonsource_test: dict[int, SampleBatch]
    source_label: int
    confidence_floor: float = field(default=0.6)

    def __post_init__(self):
        parts = [self.source_train.ids, self.source_eval.ids, self.source_test.ids,
                 self.nonsource_train.ids]
        parts.extend(b.ids for b in self.nonsource_test.values())
        allids = np.concatenate(parts)
        if np.unique(allids).size != allids.size:
            raise ValidationError("pool partitions share sample identifiers")


def _read_be_u32(buf: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(buf):
        raise FormatError(f"{path}: truncated at byte {offset} (need 4 more bytes)")
    return struct.unpack(">I", buf[offset:offset + 4])[0]


def load_idx(images_path: str, labels_path: str) -> SampleBatch:
    """Load an IDX image/label file pair into a flattened SampleBatch.

    Big-endian headers: images 0x00000803 + (count, rows, cols), labels
    0x00000801 + count, then uint8 payloads. Values get range (0, 255).
    """
    with open(images_path, "rb") as fh:
        img = fh.read()
    magic = _read_be_u32(img, 0, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(
            f"{images_path}: bad image magic 0x{magic:08x} at byte 0 "
            f"(expected 0x{IDX_IMAGE_MAGIC:08x})")
    count = _read_be_u32(img, 4, images_path)
    rows = _read_be_u32(img, 8, images_path)
    cols = _read_be_u32(img, 12, images_path)
    need = count * rows * cols
    if len(img) - 16 < need:
        raise FormatError(
            f"{images_path}: pixel payload truncated at byte {len(img)} "
            f"(expected {16 + need} bytes)")
    data = np.frombuffer(img, dtype=np.uint8, count=need, offset=16)
    data = data.astype(np.float64).reshape(count, rows * cols)

    with open(labels_path, "rb") as fh:
        lab = fh.read()
    magic = _read_be_u32(lab, 0, labels_path)
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(
            f"{labels_path}: bad label magic 0x{magic:08x} at byte 0 "
            f"(expected 0x{IDX_LABEL_MAGIC:08x})")
    lcount = _read_be_u32(lab, 4, labels_path)
    if len(lab) - 8 < lcount:
        raise FormatError(
            f"{labels_path}: label payload truncated at byte {len(lab)} "
            f"(expected {8 + lcount} bytes)")
    if lcount != count:
        raise FormatError(
            f"image/label count mismatch: {count} images vs {lcount} labels")
    labels = np.frombuffer(lab, dtype=np.uint8, count=lcount, offset=8).astype(np.int64)
    return SampleBatch(data, labels, (0.0, 255.0))


def idx_image_shape(images_path: str) -> tuple[int, int]:
    """Read (rows, cols) from an IDX image header without loading pixels."""
    with open(images_path, "rb") as fh:
        head = fh.read(16)
    magic = _read_be_u32(head, 0, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(
            f"{images_path}: bad image magic 0x{magic:08x} at byte 0 "
            f"(expected 0x{IDX_IMAGE_MAGIC:08x})")
    return _read_be_u32(head, 8, images_path), _read_be_u32(head, 12, images_path)


def save_idx(batch: SampleBatch, images_path: str, labels_path: str,
             image_shape: tuple[int, int]) -> None:
    """Write a batch as an IDX pair; exact round-trip for integer 0..255 data."""
    rows, cols = int(image_shape[0]), int(image_shape[1])
    if rows * cols != batch.dim:
        raise ShapeError(
            f"image_shape {rows}x{cols} does not match sample dim {batch.dim}")
    pixels = np.rint(np.clip(batch.data, 0, 255)).astype(np.uint8)
    img = struct.pack(">IIII", IDX_IMAGE_MAGIC, len(batch), rows, cols) + pixels.tobytes()
    lab = struct.pack(">II", IDX_LABEL_MAGIC, len(batch)) + \
        batch.labels.astype(np.uint8).tobytes()
    atomic_write_bytes(images_path, img)
    atomic_write_bytes(labels_path, lab)


def make_blobs(n_classes: int, dim: int, per_class: int, spread: float = 0.2,
               scale=0.05, value_range=(0.0, 1.0), seed: int = 0,
               centroids=None) -> tuple[SampleBatch, np.ndarray]:
    """Generate seeded isotropic Gaussian clusters, clipped into value_range.

    ``scale`` may be a scalar or one value per class. Centroids default to
    uniform draws of width ``spread`` around the range midpoint but can be
    passed explicitly for geometry-controlled experiments. Returns the batch
    and the centroid matrix.
    """
    if n_classes < 2:
        raise ValidationError("need at least 2 classes")
    lo, hi = check_value_range(value_range)
    rng = np.random.default_rng(seed)
    if centroids is None:
        mid = 0.5 * (lo + hi)
        centroids = mid + rng.uniform(-spread, spread, size=(n_classes, dim))
    else:
        centroids = check_matrix(centroids, "centroids")
        if centroids.shape != (n_classes, dim):
            raise ShapeError(
                f"centroids must be {n_classes}x{dim}, got {centroids.shape}")
    scales = np.broadcast_to(np.asarray(scale, dtype=np.float64), (n_classes,))
    if (scales <= 0).any():
        raise ValidationError("cluster scale must be > 0")
    chunks, labels = [], []
    for c in range(n_classes):
        pts = centroids[c] + rng.normal(size=(per_class, dim)) * scales[c]
        chunks.append(np.clip(pts, lo, hi))
        labels.append(np.full(per_class, c, dtype=np.int64))
    batch = SampleBatch(np.concatenate(chunks), np.concatenate(labels), (lo, hi))
    return batch, np.asarray(centroids, dtype=np.float64)


def split_test(batch: SampleBatch, test_per_class: int, seed: int = 0
               ) -> tuple[SampleBatch, SampleBatch]:
    """Carve a seeded per-class test split off a dataset, before any filtering."""
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in np.unique(batch.labels):
        idx = np.flatnonzero(batch.labels == c)
        if test_per_class < 1 or test_per_class >= idx.size:
            raise ConfigError(
                f"test_per_class={test_per_class} infeasible for class {int(c)} "
                f"with {idx.size} samples")
        test_idx.append(np.sort(rng.choice(idx, size=test_per_class, replace=False)))
    test_idx = np.concatenate(test_idx)
    mask = np.zeros(len(batch), dtype=bool)
    mask[test_idx] = True
    return batch.take(np.flatnonzero(~mask)), batch.take(test_idx)


def build_train_pools(model, batch: SampleBatch, source_label: int,
                      confidence_floor: float = 0.6, eval_subset_size: int = 512,
                      seed: int = 0) -> TrainPools:
    """Prepare the training-side pools for one source class.

    A seeded subset of up to ``eval_subset_size`` source samples (at most
    half the source pool) is held out from mini-batch sampling and used as
    the stop-criterion evaluation set. The non-source pool keeps only
    samples the model classifies correctly with true-class probability of
    at least ``confidence_floor``; the source pool is never filtered.
    """
    rng = np.random.default_rng(seed)
    src = np.flatnonzero(batch.labels == source_label)
    if src.size < 2:
        raise ConfigError(
            f"source class {source_label} needs at least 2 training samples, "
            f"has {src.size}")
    n_eval = min(int(eval_subset_size), src.size // 2)
    n_eval = max(n_eval, 1)
    eval_pick = np.sort(rng.choice(src, size=n_eval, replace=False))
    train_pick = np.setdiff1d(src, eval_pick)

    non = np.flatnonzero(batch.labels != source_label)
    if non.size == 0:
        raise ConfigError("dataset has no non-source samples")
    probs = model.predict_proba(batch.data[non])
    preds = np.argmax(probs, axis=1)
    true = batch.labels[non]
    conf = probs[np.arange(non.size), true]
    keep = non[(preds == true) & (conf >= confidence_floor)]
    if keep.size == 0:
        raise ConfigError(
            f"confidence filter at floor {confidence_floor} removed every "
            "non-source sample; lower the floor")
    return TrainPools(batch.take(train_pick), batch.take(eval_pick),
                      batch.take(keep), int(source_label), float(confidence_floor))


def build_pools(model, train_batch: SampleBatch, test_batch: SampleBatch,
                source_label: int, confidence_floor: float = 0.6,
                eval_subset_size: int = 512, seed: int = 0) -> PoolSet:
    """Assemble the full PoolSet from an already carved train/test split."""
    tp = build_train_pools(model, train_batch, source_label, confidence_floor,
                           eval_subset_size, seed)
    src_mask = test_batch.labels == source_label
    if not src_mask.any():
        raise ConfigError(f"test split has no samples of source class {source_label}")
    source_test = test_batch.take(np.flatnonzero(src_mask))
    nonsource_test = {
        int(c): test_batch.take(np.flatnonzero(test_batch.labels == c))
        for c in np.unique(test_batch.labels) if int(c) != int(source_label)
    }
    if not nonsource_test:
        raise ConfigError("test split has no non-source classes")
    return PoolSet(tp.source_train, tp.source_eval, source_test,
                   tp.nonsource_train, nonsource_test, int(source_label),
                   float(confidence_floor))


def _pack_batch(arrays: dict, prefix: str, batch: SampleBatch) -> None:
    arrays[f"{prefix}_data"] = batch.data
    arrays[f"{prefix}_labels"] = batch.labels
    arrays[f"{prefix}_ids"] = batch.ids


def _unpack_batch(arrays: dict, prefix: str, value_range) -> SampleBatch:
    return SampleBatch(arrays[f"{prefix}_data"], arrays[f"{prefix}_labels"],
                       value_range, arrays[f"{prefix}_ids"])


def save_pools(pools: PoolSet, path: str) -> None:
    arrays: dict[str, np.ndarray] = {}
    for prefix in ("source_train", "source_eval", "source_test", "nonsource_train"):
        _pack_batch(arrays, prefix, getattr(pools, prefix))
    classes = sorted(pools.nonsource_test)
    for c in classes:
        _pack_batch(arrays, f"nonsource_test_{c}", pools.nonsource_test[c])
    meta = {
        "source_label": pools.source_label,
        "confidence_floor": pools.confidence_floor,
        "value_range": list(pools.source_train.value_range),
        "nonsource_test_classes": classes,
    }
    save_container(path, POOLS_KIND, POOLS_VERSION, meta, arrays)


def load_pools(path: str) -> PoolSet:
    meta, arrays = load_container(path, POOLS_KIND, POOLS_VERSION)
    vr = tuple(meta["value_range"])
    nonsource_test = {
        int(c): _unpack_batch(arrays, f"nonsource_test_{c}", vr)
        for c in meta["nonsource_test_classes"]
    }
    return PoolSet(
        _unpack_batch(arrays, "source_train", vr),
        _unpack_batch(arrays, "source_eval", vr),
        _unpack_batch(arrays, "source_test", vr),
        _unpack_batch(arrays, "nonsource_train", vr),
        nonsource_test,
        int(meta["source_label"]),
        float(meta["confidence_floor"]),
    )


def export_perturbation_image(rho, width: int, height: int, path: str,
                              channels: int = 1) -> None:
    """Write a perturbation as a binary PGM (P5) or PPM (P6) image.

    Pixel formula: clamp(round(10 * rho + 128), 0, 255), i.e. 10x
    magnification shifted to mid-gray. Three-channel data is interpreted as
    height x width x 3 interleaved.
    """
    rho = check_vector(rho, name="rho")
    if channels not in (1, 3):
        raise ValidationError("channels must be 1 (PGM) or 3 (PPM)")
    if width * height * channels != rho.size:
        raise ShapeError(
            f"{width}x{height}x{channels} does not match perturbation size {rho.size}")
    pixels = np.clip(np.floor(10.0 * rho + 128.0 + 0.5), 0.0, 255.0).astype(np.uint8)
    kind = b"P5" if channels == 1 else b"P6"
    header = kind + f"\n{width} {height}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + pixels.tobytes())
