"""Bags, feature files, manifests, task labels, patient-wise folds, synthetic bags."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkernel import Rng

FEATURE_MAGIC = b"MILF"
FEATURE_VERSION = 1
# magic, version, n, d, patch_size, slide_w, slide_h, has_coords, 7 pad bytes
_FEATURE_HEADER = struct.Struct("<4sIIIIQQB7x")

MANIFEST_COLUMNS = ["slide_id", "patient_id", "subtype", "grade", "idh", "atrx",
                    "tp53", "ki67", "feature_path"]
TASKS = ("subtype", "grade", "idh", "atrx", "tp53", "ki67")
KI67_CUTOFFS = (5, 10, 20)
SUBTYPE_CLASSES = {"gbm": 0, "glioblastoma": 0, "a": 1, "astrocytoma": 1,
                   "o": 2, "oligodendroglioma": 2}
SUBTYPE_NAMES = ("GBM", "A", "O")
MUTATION_CLASSES = {"wild": 0, "mutant": 1}


class FormatError(ValueError):
    """Malformed feature file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ManifestError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class Bag:
    slide_id: str
    patient_id: str
    features: np.ndarray  # (p, d) float64
    coords: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    label: int | None = None
    patch_size: int = 0
    slide_w: int = 0
    slide_h: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("a bag needs at least one instance")
        if len(self.coords) not in (0, len(self.features)):
            raise ValueError("coords must be empty or one per instance")

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def write_feature_file(bag: Bag, path: str | Path) -> None:
    if not np.all(np.isfinite(bag.features)):
        raise ValueError(f"bag {bag.slide_id!r} has non-finite features")
    n, d = bag.features.shape
    has_coords = len(bag.coords) > 0
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d, bag.patch_size,
                                  bag.slide_w, bag.slide_h, int(has_coords))
    with open(path, "wb") as fh:
        fh.write(header)
        if has_coords:
            fh.write(bag.coords.astype("<u4").tobytes())
        fh.write(bag.features.astype("<f4").tobytes())


def read_feature_file(path: str | Path, slide_id: str = "", patient_id: str = "") -> Bag:
    data = Path(path).read_bytes()
    return parse_feature_bytes(data, slide_id or Path(path).stem, patient_id)


def parse_feature_bytes(data: bytes, slide_id: str = "", patient_id: str = "") -> Bag:
    size = _FEATURE_HEADER.size
    if len(data) < 4 or data[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", 0)
    if len(data) < size:
        raise FormatError("truncated header", len(data))
    magic, version, n, d, patch_size, w, h, has_coords = _FEATURE_HEADER.unpack_from(data)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if n == 0:
        raise FormatError("bag declares zero instances", 8)
    if d == 0:
        raise FormatError("zero feature dimension", 12)
    if has_coords not in (0, 1):
        raise FormatError(f"has_coords flag {has_coords}", 36)
    offset = size
    coords = np.zeros((0, 2), dtype=np.int64)
    if has_coords:
        end = offset + 8 * n
        if len(data) < end:
            raise FormatError("truncated coordinate block", len(data))
        coords = np.frombuffer(data, dtype="<u4", count=2 * n, offset=offset).reshape(n, 2)
        offset = end
    end = offset + 4 * n * d
    if len(data) < end:
        raise FormatError("truncated feature block", len(data))
    if len(data) > end:
        raise FormatError("trailing bytes after feature block", end)
    feats = np.frombuffer(data, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    return Bag(slide_id=slide_id, patient_id=patient_id, features=feats.astype(np.float64),
               coords=coords.astype(np.int64), patch_size=patch_size, slide_w=w, slide_h=h)


@dataclass(frozen=True)
class TaskSpec:
    task: str
    ki67_cutoff: int | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.task == "ki67":
            if self.ki67_cutoff not in KI67_CUTOFFS:
                raise ConfigError(f"ki67 needs a cutoff in {KI67_CUTOFFS}")
        elif self.ki67_cutoff is not None:
            raise ConfigError("ki67_cutoff only applies to the ki67 task")

    @property
    def n_classes(self) -> int:
        return 3 if self.task == "subtype" else 2

    def __str__(self) -> str:
        return f"ki67@{self.ki67_cutoff}" if self.task == "ki67" else self.task


@dataclass
class ManifestRow:
    slide_id: str
    patient_id: str
    subtype: str = ""
    grade: str = ""
    idh: str = ""
    atrx: str = ""
    tp53: str = ""
    ki67: str = ""
    feature_path: str = ""


@dataclass
class Manifest:
    rows: list[ManifestRow]
    root: Path = Path(".")

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            if row.slide_id in seen:
                raise ManifestError(f"duplicate slide_id {row.slide_id!r}")
            seen.add(row.slide_id)

    def patients(self) -> list[str]:
        """Patient ids in order of first appearance."""
        return list(dict.fromkeys(row.patient_id for row in self.rows))

    def feature_path(self, row: ManifestRow) -> Path:
        p = Path(row.feature_path)
        return p if p.is_absolute() else self.root / p


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_COLUMNS:
            raise ManifestError(f"manifest header must be {','.join(MANIFEST_COLUMNS)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"line {lineno}: expected {len(MANIFEST_COLUMNS)} fields")
            rows.append(ManifestRow(*(v.strip() for v in rec)))
    return Manifest(rows, root=path.parent)


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for row in manifest.rows:
            writer.writerow([getattr(row, c) for c in MANIFEST_COLUMNS])


def derive_label(row: ManifestRow, spec: TaskSpec) -> int | None:
    """Class index of ``row`` for ``spec``, or None when the field is missing."""
    raw = getattr(row, spec.task).strip()
    if raw == "":
        return None
    where = f"slide {row.slide_id!r}, field {spec.task}"
    if spec.task == "subtype":
        try:
            return SUBTYPE_CLASSES[raw.lower()]
        except KeyError:
            raise ManifestError(f"{where}: unknown subtype {raw!r}") from None
    if spec.task == "grade":
        try:
            grade = int(raw)
        except ValueError:
            raise ManifestError(f"{where}: malformed grade {raw!r}") from None
        if grade not in (1, 2, 3, 4):
            raise ManifestError(f"{where}: grade {grade} outside 1..4")
        return 0 if grade <= 2 else 1
    if spec.task == "ki67":
        try:
            pct = float(raw)
        except ValueError:
            raise ManifestError(f"{where}: malformed Ki-67 value {raw!r}") from None
        if not 0.0 <= pct <= 100.0:
            raise ManifestError(f"{where}: Ki-67 {pct} outside 0..100")
        return int(pct >= spec.ki67_cutoff)
    try:
        return MUTATION_CLASSES[raw.lower()]
    except KeyError:
        raise ManifestError(f"{where}: expected mutant/wild, got {raw!r}") from None


def task_labels(manifest: Manifest, spec: TaskSpec) -> dict[str, int]:
    """slide_id -> label for every slide with a derivable label.

    Slides of one patient must agree on the task label.
    """
    labels: dict[str, int] = {}
    by_patient: dict[str, int] = {}
    for row in manifest.rows:
        y = derive_label(row, spec)
        if y is None:
            continue
        prev = by_patient.setdefault(row.patient_id, y)
        if prev != y:
            raise ManifestError(f"patient {row.patient_id!r} has conflicting {spec} labels")
        labels[row.slide_id] = y
    return labels


@dataclass
class Fold:
    train: list[str]
    val: list[str]
    test: list[str]


@dataclass
class FoldPlan:
    k: int
    seed: int
    folds: list[Fold]

    def role_of(self, fold: int) -> dict[str, str]:
        f = self.folds[fold]
        roles = {p: "train" for p in f.train}
        roles.update({p: "val" for p in f.val})
        roles.update({p: "test" for p in f.test})
        return roles

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["fold", "patient_id", "role"])
            for i, f in enumerate(self.folds):
                for role, ids in (("train", f.train), ("val", f.val), ("test", f.test)):
                    for pid in ids:
                        writer.writerow([i, pid, role])


def make_folds(patients: Manifest | list[str], k: int = 10, seed: int = 0) -> FoldPlan:
    """Patient-wise k-fold plan.

    Patients are shuffled with Fisher-Yates, cut into k contiguous blocks
    (the first ``n % k`` blocks one larger), and fold i tests on block i,
    validates on block i+1 (cyclically) and trains on the rest.
    """
    ids = patients.patients() if isinstance(patients, Manifest) else list(dict.fromkeys(patients))
    n = len(ids)
    if k < 3:
        raise ConfigError("need k >= 3 so that train, val and test are all non-empty")
    if k > n:
        raise ConfigError(f"k={k} folds but only {n} patients")
    order = [ids[i] for i in Rng(seed).permutation(n)]
    base, extra = divmod(n, k)
    blocks, start = [], 0
    for b in range(k):
        size = base + (1 if b < extra else 0)
        blocks.append(order[start:start + size])
        start += size
    folds = []
    for i in range(k):
        val_idx = (i + 1) % k
        train = [p for b, blk in enumerate(blocks) if b not in (i, val_idx) for p in blk]
        folds.append(Fold(train=train, val=list(blocks[val_idx]), test=list(blocks[i])))
    return FoldPlan(k=k, seed=seed, folds=folds)


@dataclass
class SyntheticSet:
    bags: list[Bag]
    witnesses: list[np.ndarray]
    class_means: np.ndarray


def generate_synthetic(n_bags: int = 500, n_classes: int = 3, d: int = 64,
                       bag_size: tuple[int, int] = (20, 100), witness_rate: float = 0.1,
                       noise_sigma: float = 1.0, seed: int = 7) -> SyntheticSet:
    """Bags whose label k is carried by ``ceil(rate * p)`` witnesses near ``2 e_k``.

    Background instances are centred at zero; every bag carries a positive
    class, drawn uniformly. Each bag is its own patient.
    """
    if n_classes < 2:
        raise ConfigError("need at least two classes")
    if not 0.0 < witness_rate <= 1.0:
        raise ConfigError("witness_rate must lie in (0, 1]")
    if d < n_classes:
        raise ConfigError("feature dimension must be at least the class count")
    lo, hi = bag_size
    if not 1 <= lo <= hi:
        raise ConfigError("bag size range must satisfy 1 <= lo <= hi")
    rng = Rng(seed)
    means = np.zeros((n_classes, d))
    means[np.arange(n_classes), np.arange(n_classes)] = 2.0
    bags, witnesses = [], []
    for b in range(n_bags):
        label = rng.randint(n_classes)
        p = lo + rng.randint(hi - lo + 1)
        n_wit = math.ceil(witness_rate * p)
        wit = np.sort(rng.permutation(p)[:n_wit])
        feats = noise_sigma * rng.normal_array(p * d).reshape(p, d)
        feats[wit] += means[label]
        sid = f"syn{b:05d}"
        bags.append(Bag(slide_id=sid, patient_id=f"P{b:05d}", features=feats, label=label))
        witnesses.append(wit)
    return SyntheticSet(bags=bags, witnesses=witnesses, class_means=means)


def synthetic_manifest(bags: list[Bag], feature_dir: str = "features") -> Manifest:
    """Manifest rows for synthetic bags.

    Classes 0/1/2 map onto GBM/A/O; the idh column carries the binary
    relabelling {0} -> wild, {1, 2} -> mutant used for transfer runs.
    """
    rows = []
    for bag in bags:
        subtype = SUBTYPE_NAMES[bag.label] if bag.label < len(SUBTYPE_NAMES) else ""
        rows.append(ManifestRow(
            slide_id=bag.slide_id, patient_id=bag.patient_id, subtype=subtype,
            idh="wild" if bag.label == 0 else "mutant",
            feature_path=f"{feature_dir}/{bag.slide_id}.milf"))
    return Manifest(rows)


def load_bags(manifest: Manifest, spec: TaskSpec, cache: dict | None = None) -> tuple[dict[str, Bag], list[str]]:
    """Read labelled bags for ``spec``. Returns (slide_id -> Bag, skipped slide ids)."""
    labels = task_labels(manifest, spec)
    bags, skipped = {}, []
    for row in manifest.rows:
        if row.slide_id not in labels:
            skipped.append(row.slide_id)
            continue
        path = manifest.feature_path(row)
        if cache is not None and path in cache:
            bag = cache[path]
        else:
            bag = read_feature_file(path, row.slide_id, row.patient_id)
            if cache is not None:
                cache[path] = bag
        bags[row.slide_id] = Bag(slide_id=row.slide_id, patient_id=row.patient_id,
                                 features=bag.features, coords=bag.coords,
                                 label=labels[row.slide_id], patch_size=bag.patch_size,
                                 slide_w=bag.slide_w, slide_h=bag.slide_h)
    return bags, skipped
