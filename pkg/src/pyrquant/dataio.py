"""Feature-map files, dataset manifests and the synthetic fine-grained generator.

Feature file (``.pqf``), little-endian::

    magic   b"PQFM"
    u32     version (1)
    3 x     u32 H, u32 W, u32 C        stage2, stage3, stage4
    3 x     float32[H*W*C]             row-major H x W x C payloads

Manifest (UTF-8 text)::

    #pyrquant-manifest 1
    num_classes=20
    stage2=16x16x32
    stage3=8x8x64
    stage4=4x4x128
    id<TAB>label<TAB>split<TAB>path
    s00000<TAB>3<TAB>train<TAB>features/s00000.pqf
    ...

Paths are relative to the manifest's directory. ``split`` is one of
``train``, ``query``, ``database``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .pooling import STAGES, FeatureMapSet, FocusFactors, PooledStages, gsp_pool

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"PQFM"
FEATURE_VERSION = 1
MANIFEST_HEADER = "#pyrquant-manifest 1"
SPLITS = ("train", "query", "database")


class FeatureFileError(ValueError):
    code = "feature_file"


class BadMagicError(FeatureFileError):
    code = "bad_magic"


class TruncatedFileError(FeatureFileError):
    code = "truncated"


class DimensionMismatchError(FeatureFileError):
    code = "dim_mismatch"


class NegativeActivationError(FeatureFileError):
    code = "negative_activation"


class ManifestError(ValueError):
    pass


Shape = Tuple[int, int, int]


def write_feature_set(path: Union[str, Path], fms: FeatureMapSet) -> None:
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<I", FEATURE_VERSION))
        for arr in fms.stages():
            fh.write(struct.pack("<3I", *arr.shape))
        for arr in fms.stages():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_feature_set(path: Union[str, Path], expected: Optional[Sequence[Shape]] = None,
                     label: Optional[int] = None) -> FeatureMapSet:
    """Read one feature file; ``expected`` stage shapes are checked when given."""
    data = Path(path).read_bytes()
    header = 8 + 36
    if len(data) < 8:
        raise TruncatedFileError(f"{path}: file shorter than its header")
    if data[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    if len(data) < header:
        raise TruncatedFileError(f"{path}: file shorter than its header")
    shapes = [struct.unpack_from("<3I", data, 8 + 12 * i) for i in range(3)]
    if expected is not None:
        for name, got, want in zip(STAGES, shapes, expected):
            if tuple(got) != tuple(want):
                raise DimensionMismatchError(f"{path}: {name} is {got}, manifest declares {tuple(want)}")
    sizes = [int(np.prod(s)) for s in shapes]
    if len(data) != header + 4 * sum(sizes):
        if len(data) < header + 4 * sum(sizes):
            raise TruncatedFileError(f"{path}: payload truncated")
        raise FeatureFileError(f"{path}: trailing bytes after payload")
    arrays = []
    off = header
    for s, n in zip(shapes, sizes):
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(s))
        off += 4 * n
    for name, arr in zip(STAGES, arrays):
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise NegativeActivationError(f"{path}: {name} has negative or non-finite activations")
    return FeatureMapSet(*arrays, label=label)


@dataclass
class ItemRecord:
    id: str
    label: int
    split: str
    path: str


@dataclass
class DatasetManifest:
    records: List[ItemRecord]
    num_classes: int
    stage_shapes: Tuple[Shape, Shape, Shape]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ManifestError("item ids are not unique")
        for r in self.records:
            if not 0 <= r.label < self.num_classes:
                raise ManifestError(f"item {r.id}: label {r.label} outside [0, {self.num_classes})")
            if r.split not in SPLITS:
                raise ManifestError(f"item {r.id}: unknown split {r.split!r}")

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def ids(self) -> List[str]:
        return [r.id for r in self.records]


def write_manifest(path: Union[str, Path], manifest: DatasetManifest) -> None:
    lines = [MANIFEST_HEADER, f"num_classes={manifest.num_classes}"]
    for name, shape in zip(STAGES, manifest.stage_shapes):
        lines.append(f"{name}={'x'.join(str(v) for v in shape)}")
    lines.append("id\tlabel\tsplit\tpath")
    lines += [f"{r.id}\t{r.label}\t{r.split}\t{r.path}" for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ManifestError(f"{path}: missing manifest header")
    meta: Dict[str, str] = {}
    i = 1
    while i < len(lines) and "=" in lines[i] and "\t" not in lines[i]:
        k, v = lines[i].split("=", 1)
        meta[k.strip()] = v.strip()
        i += 1
    try:
        num_classes = int(meta["num_classes"])
        shapes = tuple(tuple(int(x) for x in meta[s].split("x")) for s in STAGES)
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"{path}: bad header ({exc})") from None
    if i >= len(lines) or lines[i].split("\t") != ["id", "label", "split", "path"]:
        raise ManifestError(f"{path}: missing record header line")
    records = []
    for lineno, line in enumerate(lines[i + 1:], start=i + 2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        records.append(ItemRecord(parts[0], int(parts[1]), parts[2], parts[3]))
    return DatasetManifest(records, num_classes, shapes, path.parent)


@dataclass
class FeatureDataset:
    """Stacked stage tensors (N, H, W, C) plus per-item metadata."""

    ids: List[str]
    labels: np.ndarray
    splits: List[str]
    stage2: np.ndarray
    stage3: np.ndarray
    stage4: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.ids)

    def stages(self):
        return self.stage2, self.stage3, self.stage4

    def subset(self, idx) -> "FeatureDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureDataset([self.ids[i] for i in idx], self.labels[idx],
                              [self.splits[i] for i in idx], self.stage2[idx],
                              self.stage3[idx], self.stage4[idx], self.num_classes)

    def feature_set(self, i: int) -> FeatureMapSet:
        return FeatureMapSet(self.stage2[i], self.stage3[i], self.stage4[i], int(self.labels[i]))

    def pooled(self, rhos: FocusFactors, chunk: int = 256) -> PooledStages:
        """GSP descriptors for every item, computed in chunks to bound memory."""
        if len(self) == 0:
            return PooledStages(*(np.zeros((0, s.shape[-1])) for s in self.stages()))
        parts = []
        for arr, rho in zip(self.stages(), rhos.as_tuple()):
            parts.append(np.concatenate([gsp_pool(arr[i:i + chunk].astype(np.float64), rho)
                                         for i in range(0, len(self), chunk)]))
        return PooledStages(*parts)


def load_dataset(manifest: Union[str, Path, DatasetManifest]) -> FeatureDataset:
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    n = len(manifest.records)
    stacks = [np.empty((n,) + tuple(s), dtype=np.float32) for s in manifest.stage_shapes]
    for i, rec in enumerate(manifest.records):
        fms = read_feature_set(manifest.root / rec.path, manifest.stage_shapes)
        for stack, arr in zip(stacks, fms.stages()):
            stack[i] = arr
    return FeatureDataset(manifest.ids, manifest.labels, [r.split for r in manifest.records],
                          *stacks, manifest.num_classes)


@dataclass
class SyntheticSpec:
    num_classes: int = 20
    num_meta: int = 4
    samples_per_class: int = 60
    stage2: Shape = (16, 16, 32)
    stage3: Shape = (8, 8, 64)
    stage4: Shape = (4, 4, 128)
    patch: int = 3
    part_strength: float = 3.0
    meta_strength: float = 1.0
    noise: float = 1.0
    query_per_class: int = 10
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_classes", "num_meta", "samples_per_class", "patch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("stage2", "stage3", "stage4"):
            shape = getattr(self, name)
            if len(shape) != 3 or min(shape) < 1:
                raise ValueError(f"{name} must be three positive extents, got {shape}")
        if self.patch > min(self.stage2[:2]):
            raise ValueError(f"patch={self.patch} does not fit in stage2 {self.stage2[:2]}")
        if self.num_meta > self.num_classes:
            raise ValueError("num_meta cannot exceed num_classes")
        if self.noise < 0 or self.part_strength < 0 or self.meta_strength < 0:
            raise ValueError("noise and strengths must be nonnegative")
        if not 0 <= self.query_per_class < self.samples_per_class:
            raise ValueError("query_per_class must be smaller than samples_per_class")


@dataclass
class SyntheticDataset:
    dataset: FeatureDataset
    manifest: DatasetManifest
    part_signatures: np.ndarray    # (num_classes, C2)
    meta_signatures: np.ndarray    # (num_meta, C4)
    meta_of_class: np.ndarray      # (num_classes,)

    def oracle_embeddings(self) -> np.ndarray:
        """Noise-free signature of each item's class, (N, C2 + C4)."""
        y = self.dataset.labels
        return np.hstack([self.part_signatures[y], self.meta_signatures[self.meta_of_class[y]]])


def _signatures(rng, n, width):
    sig = np.zeros((n, width))
    active = max(1, width // 4)
    for i in range(n):
        ch = rng.choice(width, active, replace=False)
        sig[i, ch] = rng.uniform(0.5, 1.0, active)
    return sig


def generate_synthetic(spec: SyntheticSpec,
                       out_dir: Union[str, Path, None] = None) -> SyntheticDataset:
    """Fine-grained toy data with subclass evidence in small stage2 patches.

    Every sample carries a ``patch x patch`` part in stage2 whose channel
    signature identifies its subclass; stage4 carries only the meta-class
    signature spread over all positions; stage3 is pure noise. Noise is
    half-normal (a zero-mean Gaussian truncated at zero). When ``out_dir``
    is given, ``manifest.tsv`` and ``features/*.pqf`` are written there.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C2, C4 = spec.stage2[2], spec.stage4[2]
    parts = _signatures(rng, spec.num_classes, C2)
    metas = _signatures(rng, spec.num_meta, C4)
    meta_of = np.arange(spec.num_classes) % spec.num_meta
    n = spec.num_classes * spec.samples_per_class
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    stacks = [np.empty((n,) + tuple(s), dtype=np.float32)
              for s in (spec.stage2, spec.stage3, spec.stage4)]
    H2, W2 = spec.stage2[:2]
    p = spec.patch
    for i, y in enumerate(labels):
        s2 = np.abs(rng.standard_normal(spec.stage2)) * spec.noise
        r, c = rng.integers(0, H2 - p + 1), rng.integers(0, W2 - p + 1)
        jitter = 1.0 + 0.1 * rng.standard_normal(C2)
        s2[r:r + p, c:c + p, :] += np.clip(spec.part_strength * parts[y] * jitter, 0, None)
        s3 = np.abs(rng.standard_normal(spec.stage3)) * spec.noise
        s4 = np.abs(rng.standard_normal(spec.stage4)) * spec.noise
        s4 += spec.meta_strength * metas[meta_of[y]]
        for stack, arr in zip(stacks, (s2, s3, s4)):
            stack[i] = arr
    splits = np.array(["train"] * n, dtype=object)
    for cls in range(spec.num_classes):
        members = np.flatnonzero(labels == cls)
        splits[rng.permutation(members)[:spec.query_per_class]] = "query"
    ids = [f"s{i:05d}" for i in range(n)]
    records = [ItemRecord(ids[i], int(labels[i]), str(splits[i]), f"features/{ids[i]}.pqf")
               for i in range(n)]
    manifest = DatasetManifest(records, spec.num_classes,
                               (tuple(spec.stage2), tuple(spec.stage3), tuple(spec.stage4)))
    ds = FeatureDataset(ids, labels, list(splits), *stacks, spec.num_classes)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "features").mkdir(parents=True, exist_ok=True)
        for i in range(n):
            write_feature_set(out / records[i].path, ds.feature_set(i))
        write_manifest(out / "manifest.tsv", manifest)
        manifest.root = out
    return SyntheticDataset(ds, manifest, parts, metas, meta_of)


@dataclass
class DatasetSplit:
    train: np.ndarray
    query: np.ndarray
    database: np.ndarray


def split_dataset(labels: Sequence[int], splits: Sequence[str], protocol: str = "cub",
                  holdout: int = 10, seed: int = 0) -> DatasetSplit:
    """Index views for a retrieval protocol.

    ``cub``: items marked ``query`` are queries, everything else trains, and
    the database is the training set. ``dogs``: ``holdout`` items per class
    (seeded choice) become queries, the rest train and form the database.
    """
    labels = np.asarray(labels, dtype=np.int64)
    splits = np.asarray(list(splits))
    if protocol == "cub":
        query = np.flatnonzero(splits == "query")
        train = np.flatnonzero(splits != "query")
        if len(train) == 0 or len(query) == 0:
            raise ValueError("cub protocol needs both query and non-query items")
        return DatasetSplit(train, query, train.copy())
    if protocol == "dogs":
        rng = np.random.default_rng(seed)
        query = []
        for cls in np.unique(labels):
            members = np.flatnonzero(labels == cls)
            if len(members) <= holdout:
                raise ValueError(f"class {cls} has {len(members)} items, needs more than {holdout}")
            query.extend(rng.permutation(members)[:holdout].tolist())
        query = np.sort(np.array(query, dtype=np.int64))
        train = np.setdiff1d(np.arange(len(labels)), query)
        return DatasetSplit(train, query, train.copy())
    raise ValueError(f"unknown protocol {protocol!r}")
