"""Manifests, patient-grouped folds, batching and the synthetic chest-film set."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import imaging
from .autodiff import EVAL, TRAIN, RngState, Tensor

NORMAL = 1
ABNORMAL = 0
MANIFEST_HEADER = ("image_path", "patient_id", "label")

_LABEL_TOKENS = {"normal": NORMAL, "1": NORMAL, "abnormal": ABNORMAL, "0": ABNORMAL}


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    image_path: str
    patient_id: str
    label: int

    def __post_init__(self):
        if self.label not in (NORMAL, ABNORMAL):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: frozenset[str]
    test_ids: frozenset[str]

    def __post_init__(self):
        if self.train_ids & self.test_ids:
            raise ValueError(f"fold {self.fold_index}: train and test patients overlap")

    def train_samples(self, samples: Sequence[Sample]) -> list[Sample]:
        return [s for s in samples if s.patient_id in self.train_ids]

    def test_samples(self, samples: Sequence[Sample]) -> list[Sample]:
        return [s for s in samples if s.patient_id in self.test_ids]


def parse_label(token: str) -> int:
    try:
        return _LABEL_TOKENS[token.strip().lower()]
    except KeyError:
        raise ManifestError(f"unknown label {token!r}") from None


def load_manifest(path) -> list[Sample]:
    """Read a manifest CSV with header ``image_path,patient_id,label``.

    Relative image paths are resolved against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    samples: list[Sample] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}: empty manifest")
        header = [h.strip() for h in header]
        missing = [c for c in MANIFEST_HEADER if c not in header]
        if missing:
            raise ManifestError(f"{path}: missing column(s) {', '.join(missing)}")
        col = {c: header.index(c) for c in MANIFEST_HEADER}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                image = row[col["image_path"]].strip()
                pid = row[col["patient_id"]].strip()
                token = row[col["label"]]
            except IndexError:
                raise ManifestError(f"{path}:{lineno}: too few fields") from None
            try:
                label = parse_label(token)
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            if not pid:
                raise ManifestError(f"{path}:{lineno}: empty patient_id")
            resolved = str(base / image) if not Path(image).is_absolute() else image
            if resolved in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate image_path {image!r}")
            seen.add(resolved)
            samples.append(Sample(resolved, pid, label))
    return samples


def write_manifest(path, rows: Sequence[tuple[str, str, int]]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for image, pid, label in rows:
            writer.writerow([image, pid, "normal" if label == NORMAL else "abnormal"])
    return path


def patient_labels(samples: Sequence[Sample]) -> dict[str, int]:
    """Majority label per patient (ties count as abnormal)."""
    votes: dict[str, list[int]] = {}
    for s in samples:
        votes.setdefault(s.patient_id, []).append(s.label)
    return {p: int(sum(v) * 2 > len(v)) for p, v in votes.items()}


def grouped_kfold(samples: Sequence[Sample], k: int = 5, rng: RngState | None = None,
                  stratify: bool = False) -> list[FoldSplit]:
    """Shuffle unique patients, then deal them round-robin into ``k`` test folds.

    With ``stratify`` the dealing runs separately over normal and abnormal
    patients (continuing the same rotation) so each fold gets a similar mix.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    rng = rng or RngState(0)
    patients = sorted({s.patient_id for s in samples})
    if len(patients) < k:
        raise ValueError(f"need at least k={k} distinct patients, got {len(patients)}")
    order = [patients[i] for i in rng.generator.permutation(len(patients))]
    if stratify:
        labels = patient_labels(samples)
        order = [p for p in order if labels[p] == NORMAL] + \
                [p for p in order if labels[p] == ABNORMAL]
    buckets: list[list[str]] = [[] for _ in range(k)]
    for i, p in enumerate(order):
        buckets[i % k].append(p)
    everyone = frozenset(patients)
    return [FoldSplit(i, everyone - frozenset(b), frozenset(b)) for i, b in enumerate(buckets)]


def folds_to_json(folds: Sequence[FoldSplit]) -> str:
    doc = {"k": len(folds),
           "folds": [{"fold": f.fold_index, "test_patients": sorted(f.test_ids)} for f in folds]}
    return json.dumps(doc, indent=2) + "\n"


def folds_from_json(text: str) -> list[FoldSplit]:
    doc = json.loads(text)
    folds = doc["folds"]
    if len(folds) != doc["k"]:
        raise ValueError(f"fold file declares k={doc['k']} but lists {len(folds)} folds")
    everyone = frozenset(p for f in folds for p in f["test_patients"])
    out = []
    for f in sorted(folds, key=lambda f: f["fold"]):
        test = frozenset(f["test_patients"])
        out.append(FoldSplit(int(f["fold"]), everyone - test, test))
    if sum(len(f.test_ids) for f in out) != len(everyone):
        raise ValueError("a patient appears in more than one test fold")
    return out


def save_folds(path, folds: Sequence[FoldSplit]) -> Path:
    path = Path(path)
    path.write_text(folds_to_json(folds))
    return path


def load_folds(path) -> list[FoldSplit]:
    return folds_from_json(Path(path).read_text())


# ---------------------------------------------------------------- batching

@dataclass
class ImagePipeline:
    """Loads and preprocesses images; deterministic stages are cached per path."""

    size: tuple[int, int] = (128, 128)
    tiles: tuple[int, int] = (8, 8)
    clip_limit: float = 2.0
    augment: bool = True
    _cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def base(self, path: str) -> np.ndarray:
        img = self._cache.get(path)
        if img is None:
            img = imaging.preprocess(imaging.read_image(path), self.size, self.tiles, self.clip_limit)
            self._cache[path] = img
        return img

    def load(self, path: str, mode: str, rng: RngState | None = None) -> np.ndarray:
        img = self.base(path)
        if mode == TRAIN and self.augment:
            img = imaging.augment(img, imaging.draw_augment_params(rng))
        return img


@dataclass
class Batch:
    images: Tensor
    labels: np.ndarray
    samples: list[Sample]


def make_batches(samples: Sequence[Sample], batch_size: int, pipeline: ImagePipeline,
                 mode: str = EVAL, seed: int = 0, epoch: int = 0,
                 dtype="float32") -> Iterator[Batch]:
    """Yield batches; train mode shuffles per epoch and augments each image.

    Every random draw comes from a stream keyed by ``(seed, epoch)`` for the
    order and ``(seed, epoch, position)`` for augmentation, so results do not
    depend on how batches are consumed.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not samples:
        raise ValueError("no samples to batch")
    order = np.arange(len(samples))
    if mode == TRAIN:
        order = RngState.derive(seed, epoch).generator.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        chosen = [samples[i] for i in idx]
        imgs = [pipeline.load(s.image_path, mode, RngState.derive(seed, epoch, int(i), 1))
                for s, i in zip(chosen, idx)]
        x = np.stack(imgs)[:, None].astype(dtype)
        y = np.array([[s.label] for s in chosen], dtype=dtype)
        yield Batch(Tensor(x), y, chosen)


# ---------------------------------------------------------------- synthetic data

def _normal_film(gen: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    # smooth low-frequency background
    bg = 0.42 + 0.04 * np.sin(np.pi * (xx * gen.uniform(0.5, 1.5) + gen.uniform(0, 1)))
    bg += 0.04 * np.cos(np.pi * (yy * gen.uniform(0.5, 1.5) + gen.uniform(0, 1)))
    # two darker lung fields
    for cx in (0.3, 0.7):
        cx += gen.uniform(-0.03, 0.03)
        lung = np.exp(-(((xx - cx) / 0.16) ** 2 + ((yy - 0.5) / 0.3) ** 2))
        bg -= 0.18 * lung
    # rib-like bands
    freq = gen.uniform(7.0, 10.0)
    phase = gen.uniform(0, 2 * np.pi)
    bg += 0.06 * np.sin(2 * np.pi * freq * yy + 2.0 * (xx - 0.5) ** 2 + phase)
    bg += gen.normal(0, 0.015, bg.shape)
    return bg


def _add_opacities(img: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    if gen.random() < 0.25:
        cx, cy = gen.uniform(0.35, 0.65, size=2)
        r = gen.uniform(0.14, 0.22)
        d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        return img + 0.5 * np.exp(-((d - r) / 0.04) ** 2)
    for _ in range(int(gen.integers(1, 4))):
        cx, cy = gen.uniform(0.2, 0.8), gen.uniform(0.25, 0.75)
        ax, ay = gen.uniform(0.08, 0.16), gen.uniform(0.08, 0.16)
        ang = gen.uniform(0, np.pi)
        u = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)
        v = -(xx - cx) * np.sin(ang) + (yy - cy) * np.cos(ang)
        img = img + gen.uniform(0.45, 0.65) * np.exp(-((u / ax) ** 2 + (v / ay) ** 2) ** 2)
    return img


def synth_image(label: int, size: int, seed: int, *keys: int) -> np.ndarray:
    gen = RngState.derive(seed, *keys).generator
    img = _normal_film(gen, size)
    if label == ABNORMAL:
        img = _add_opacities(img, gen)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def synth_dataset(out_dir, n_patients: int, size: int = 128, seed: int = 0,
                  images_per_patient: tuple[int, int] = (1, 3), image_format: str = "png") -> Path:
    """Write a deterministic synthetic normal/abnormal set; returns the manifest path.

    Normal films are a smooth background with rib-like bands; abnormal films
    add one to three bright elliptical opacities or a ring artifact. Patients
    alternate classes in a seeded order so classes are balanced to within one.
    """
    if n_patients < 5:
        raise ValueError("n_patients must be >= 5")
    lo, hi = images_per_patient
    if not 1 <= lo <= hi:
        raise ValueError("images_per_patient must satisfy 1 <= lo <= hi")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    gen = RngState.derive(seed, 0).generator
    labels = np.array([NORMAL if i % 2 == 0 else ABNORMAL for i in range(n_patients)])
    labels = labels[gen.permutation(n_patients)]
    width = max(4, len(str(n_patients)))
    rows = []
    for p in range(n_patients):
        pid = f"P{p:0{width}d}"
        count = int(gen.integers(lo, hi + 1))
        for k in range(count):
            rel = f"images/{pid}_{k}.{image_format}"
            imaging.write_image(out_dir / rel, synth_image(int(labels[p]), size, seed, 1, p, k))
            rows.append((rel, pid, int(labels[p])))
    return write_manifest(out_dir / "manifest.csv", rows)
