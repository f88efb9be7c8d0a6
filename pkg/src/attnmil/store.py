"""Embedding bags on disk: the MILB container, dataset manifests and splits.

MILB layout (all little-endian)::

    b"MILB" | u32 version=1 | u32 len + utf-8 slide_id | u32 N | u32 D
    | u8 label bitmap | labels | i32 coords[2N] | f32 features[N*D] | u32 crc32

Label bitmap bits: 0 = mir_stage (u8), 3 = mir_binary without a stage (u8),
1 = wbc (f32), 2 = t_max (f32); payloads appear in that order.
"""
from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping, Sequence

import numpy as np

from ._binio import CrcReader, CrcWriter
from .errors import InvalidBagError, ManifestError, NonFiniteError, SplitError
from .rng import Stream

MILB_MAGIC = b"MILB"
MILB_VERSION = 1

_BIT_STAGE = 0x01
_BIT_WBC = 0x02
_BIT_TMAX = 0x04
_BIT_BINARY = 0x08

SPLITS = ("train", "valid", "test")


def _f32(x: float | None) -> float | None:
    return None if x is None else float(np.float32(x))


@dataclass(frozen=True)
class LabelSet:
    """Slide-level targets.  Float labels are held at float32 precision so
    they survive a MILB round trip unchanged."""

    mir_stage: int | None = None
    mir_binary: int | None = None
    wbc: float | None = None
    t_max: float | None = None

    def __post_init__(self):
        if self.mir_stage is not None:
            if self.mir_stage not in (0, 1, 2, 3):
                raise InvalidBagError(f"mir_stage must be 0..3, got {self.mir_stage}")
            derived = int(self.mir_stage >= 2)
            if self.mir_binary is not None and self.mir_binary != derived:
                raise InvalidBagError("mir_binary disagrees with mir_stage")
            object.__setattr__(self, "mir_binary", derived)
        elif self.mir_binary is not None and self.mir_binary not in (0, 1):
            raise InvalidBagError(f"mir_binary must be 0 or 1, got {self.mir_binary}")
        for name in ("wbc", "t_max"):
            v = getattr(self, name)
            if v is not None:
                if not math.isfinite(v):
                    raise NonFiniteError(f"label {name} is not finite")
                object.__setattr__(self, name, _f32(v))

    def is_empty(self) -> bool:
        return self.mir_binary is None and self.wbc is None and self.t_max is None

    def target(self, task: str):
        """Label used by a training task: ``mir`` -> mir_binary, ``wbc``, ``tmax``."""
        key = {"mir": "mir_binary", "wbc": "wbc", "tmax": "t_max"}[task]
        return getattr(self, key)


@dataclass(eq=False)
class EmbeddingBag:
    slide_id: str
    coords: np.ndarray
    features: np.ndarray
    labels: LabelSet = field(default_factory=LabelSet)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int32).reshape(-1, 2)
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2:
            raise InvalidBagError("features must be an N x D matrix")
        self.features = feats

    @property
    def n_patches(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def validate(self) -> None:
        n, d = self.features.shape
        if n < 1 or d < 1:
            raise InvalidBagError(f"{self.slide_id}: empty bag ({n}x{d})")
        if self.coords.shape != (n, 2):
            raise InvalidBagError(f"{self.slide_id}: {len(self.coords)} coords for {n} patches")
        if (self.coords < 0).any():
            raise InvalidBagError(f"{self.slide_id}: negative tile coordinates")
        if len(np.unique(self.coords, axis=0)) != n:
            raise InvalidBagError(f"{self.slide_id}: duplicate tile coordinates")
        if not np.isfinite(self.features).all():
            raise NonFiniteError(f"{self.slide_id}: non-finite feature values")

    def __eq__(self, other):
        if not isinstance(other, EmbeddingBag):
            return NotImplemented
        return (
            self.slide_id == other.slide_id
            and self.labels == other.labels
            and self.features.shape == other.features.shape
            and self.coords.tobytes() == other.coords.tobytes()
            and self.features.tobytes() == other.features.tobytes()
        )

    def permuted(self, order: Sequence[int]) -> "EmbeddingBag":
        order = np.asarray(order)
        return EmbeddingBag(self.slide_id, self.coords[order], self.features[order], self.labels)


def write_bag(bag: EmbeddingBag, destination: BinaryIO) -> int:
    """Serialize ``bag``; returns the number of bytes written.

    All validation happens before the first byte reaches ``destination``.
    """
    bag.validate()
    lab = bag.labels
    sid = bag.slide_id.encode("utf-8")
    bitmap = 0
    if lab.mir_stage is not None:
        bitmap |= _BIT_STAGE
    elif lab.mir_binary is not None:
        bitmap |= _BIT_BINARY
    if lab.wbc is not None:
        bitmap |= _BIT_WBC
    if lab.t_max is not None:
        bitmap |= _BIT_TMAX

    buf = io.BytesIO()
    w = CrcWriter(buf)
    w.write(MILB_MAGIC)
    w.u32(MILB_VERSION)
    w.u32(len(sid))
    w.write(sid)
    w.u32(bag.n_patches)
    w.u32(bag.dim)
    w.u8(bitmap)
    if bitmap & _BIT_STAGE:
        w.u8(lab.mir_stage)
    if bitmap & _BIT_BINARY:
        w.u8(lab.mir_binary)
    if bitmap & _BIT_WBC:
        w.f32(lab.wbc)
    if bitmap & _BIT_TMAX:
        w.f32(lab.t_max)
    w.array(bag.coords, "<i4")
    w.array(bag.features, "<f4")
    n = w.finish()
    destination.write(buf.getvalue())
    return n


def read_bag(source: BinaryIO) -> EmbeddingBag:
    r = CrcReader(source, "MILB")
    r.header(MILB_MAGIC, MILB_VERSION)
    sid_len = r.u32()
    sid_raw = r.read(sid_len)
    n = r.u32()
    d = r.u32()
    bitmap = r.u8()
    stage = r.u8() if bitmap & _BIT_STAGE else None
    binary = r.u8() if bitmap & _BIT_BINARY else None
    wbc = r.f32() if bitmap & _BIT_WBC else None
    tmax = r.f32() if bitmap & _BIT_TMAX else None
    coords = r.array(2 * n, "<i4")
    feats = r.array(n * d, "<f4")
    r.verify()

    # CRC passed: anything odd below was written that way, not corrupted in transit
    if bitmap & ~(_BIT_STAGE | _BIT_WBC | _BIT_TMAX | _BIT_BINARY) or (stage is not None and binary is not None):
        raise InvalidBagError(f"MILB: invalid label bitmap {bitmap:#04x}")
    for v in (wbc, tmax):
        if v is not None and not math.isfinite(v):
            raise NonFiniteError("MILB: non-finite label")
    if not np.isfinite(feats).all():
        raise NonFiniteError("MILB: non-finite feature payload")
    try:
        sid = sid_raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InvalidBagError("MILB: slide_id is not valid UTF-8") from exc
    bag = EmbeddingBag(
        sid,
        coords.astype(np.int32).reshape(n, 2),
        feats.astype(np.float32).reshape(n, d),
        LabelSet(mir_stage=stage, mir_binary=binary, wbc=wbc, t_max=tmax),
    )
    bag.validate()
    return bag


def save_bag(bag: EmbeddingBag, path: str | os.PathLike) -> int:
    with open(path, "wb") as fh:
        return write_bag(bag, fh)


def load_bag(path: str | os.PathLike) -> EmbeddingBag:
    with open(path, "rb") as fh:
        return read_bag(fh)


def bag_to_bytes(bag: EmbeddingBag) -> bytes:
    buf = io.BytesIO()
    write_bag(bag, buf)
    return buf.getvalue()


def bag_from_bytes(data: bytes) -> EmbeddingBag:
    return read_bag(io.BytesIO(data))


# -- manifests -----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    slide_id: str
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        for e in self.entries:
            if e.split not in SPLITS:
                raise ManifestError(f"unknown split tag {e.split!r} for {e.slide_id}")
        ids = [e.slide_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ManifestError("slide ids appear more than once")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def load_split(self, name: str) -> list[EmbeddingBag]:
        entries = self.split(name)
        if not entries:
            raise ManifestError(f"manifest has no entries in split {name!r}")
        bags = []
        for e in entries:
            bag = load_bag(self.resolve(e))
            if bag.slide_id != e.slide_id:
                raise ManifestError(f"{e.path}: bag slide_id {bag.slide_id!r} != manifest {e.slide_id!r}")
            bags.append(bag)
        return bags

    def validate(self) -> None:
        for name in SPLITS:
            if self.split(name):
                self.load_split(name)

    def to_text(self) -> str:
        lines = [f"# seed={self.seed}"]
        lines += [f"{e.path}\t{e.slide_id}\t{e.split}" for e in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
        return cls.parse(text, root=path.parent)

    @classmethod
    def parse(cls, text: str, root: Path | None = None) -> "DatasetManifest":
        seed = None
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("seed="):
                    seed = int(body[5:])
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ManifestError(f"manifest line {lineno}: expected 3 tab-separated fields")
            entries.append(ManifestEntry(*parts))
        if seed is None:
            raise ManifestError("manifest is missing its '# seed=<n>' header")
        return cls(entries, seed, root if root is not None else Path())


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    quotas = [n * f for f in fractions]
    counts = [math.floor(q) for q in quotas]
    # ties go to the earlier split
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def make_split(
    slides: Iterable[tuple[str, int | None]],
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    paths: Mapping[str, str] | None = None,
) -> DatasetManifest:
    """Stratified train/valid/test partition of ``(slide_id, binary label)`` pairs.

    Each label stratum (unlabeled slides form their own) is shuffled with a
    seeded stream and cut with largest-remainder rounding, so every split's
    per-class count is within one slide of ``n_class * fraction``.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != len(SPLITS):
        raise SplitError("need exactly three fractions (train, valid, test)")
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must be positive and sum to 1, got {fractions}")

    strata: dict[int, list[str]] = {}
    seen = set()
    for sid, label in slides:
        if sid in seen:
            raise SplitError(f"duplicate slide id {sid!r}")
        seen.add(sid)
        key = 2 if label is None else int(label)
        strata.setdefault(key, []).append(sid)

    assignment: dict[str, str] = {}
    for key in sorted(strata):
        ids = sorted(strata[key])
        if len(ids) < len(SPLITS):
            what = "unlabeled" if key == 2 else f"class {key}"
            raise SplitError(f"{what} has {len(ids)} slides, fewer than {len(SPLITS)} splits")
        perm = Stream(seed, 10, key).permutation(len(ids))
        start = 0
        for name, count in zip(SPLITS, _largest_remainder(len(ids), fractions)):
            for i in perm[start : start + count]:
                assignment[ids[i]] = name
            start += count

    paths = paths or {}
    entries = [ManifestEntry(paths.get(sid, f"{sid}.milb"), sid, assignment[sid]) for sid in sorted(assignment)]
    return DatasetManifest(entries, seed)
