"""Dataset quality control: hash-based deduplication, annotation
reconciliation and class/species tallies."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from apn.imageio import to_gray

HASH_SIDE = 8

SPECIES = (
    "Fruits & Seeds",
    "Rhizome",
    "Flowers",
    "Bark",
    "Thallophyte",
    "Whole Herbs",
    "Leaves",
    "Resin",
)


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray
    source: str = "crawled"  # or "photographed"
    flags: frozenset = frozenset()  # manual inferior-image marks, e.g. {"no-herb"}

    def __post_init__(self):
        if np.asarray(self.pixels).size == 0:
            raise ValueError(f"image {self.id!r} has no pixels")


def _area_matrix(size_in: int, size_out: int) -> np.ndarray:
    """Rows average the fractional overlap of each output cell with the input."""
    scale = size_in / size_out
    mat = np.zeros((size_out, size_in))
    for i in range(size_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), size_in)):
            mat[i, j] = min(hi, j + 1) - max(lo, j)
    return mat / scale


def area_resize(gray: np.ndarray, h: int, w: int) -> np.ndarray:
    gray = np.asarray(gray, dtype=np.float64)
    if gray.shape[0] % h == 0 and gray.shape[1] % w == 0:
        bh, bw = gray.shape[0] // h, gray.shape[1] // w
        return gray.reshape(h, bh, w, bw).mean(axis=(1, 3))
    return _area_matrix(gray.shape[0], h) @ gray @ _area_matrix(gray.shape[1], w).T


def perceptual_hash(image: np.ndarray) -> int:
    """64-bit average hash.

    The greyscale image is area-averaged to 8 x 8; a cell's bit is set when it
    is brighter than the mean of the 64 cells.  Bits are packed row-major with
    the first cell in the most significant position.  Images whose pixels are
    all equal hash to 0.
    """
    gray = to_gray(image)
    if gray.ndim != 2 or gray.shape[0] < HASH_SIDE or gray.shape[1] < HASH_SIDE:
        raise ValueError(f"image must be at least {HASH_SIDE}x{HASH_SIDE}, got {gray.shape}")
    if np.all(gray == gray.flat[0]):
        return 0
    cells = area_resize(gray, HASH_SIDE, HASH_SIDE).reshape(-1)
    bits = cells > cells.mean()
    value = 0
    for bit in bits:
        value = (value << 1) | int(bit)
    return value


def hamming(a: int, b: int) -> int:
    return bin(a ^ b).count("1")


@dataclass
class DedupResult:
    kept: list[str] = field(default_factory=list)
    duplicates: list[tuple[str, str, int]] = field(default_factory=list)  # kept_id, removed_id, hamming


def dedup(hashes: Sequence[tuple[str, int]], threshold: int = 5) -> DedupResult:
    """Greedy first-wins scan over ``(id, hash)`` pairs in input order.

    A record within ``threshold`` bits of an already kept record is removed
    and reported against the closest kept record (earliest on ties).
    """
    if not 0 <= threshold <= 64:
        raise ValueError("threshold must lie in [0, 64]")
    result = DedupResult()
    kept_hashes: list[int] = []
    for rid, h in hashes:
        best: Optional[tuple[int, int]] = None
        for k, kh in enumerate(kept_hashes):
            d = hamming(h, kh)
            if d <= threshold and (best is None or d < best[1]):
                best = (k, d)
        if best is None:
            result.kept.append(rid)
            kept_hashes.append(h)
        else:
            result.duplicates.append((result.kept[best[0]], rid, best[1]))
    return result


def dedup_records(records: Iterable[ImageRecord], threshold: int = 5) -> DedupResult:
    return dedup([(r.id, perceptual_hash(r.pixels)) for r in records], threshold)


@dataclass(frozen=True)
class Outcome:
    status: str  # "accepted", "dropped" or "pending"
    label: Optional[str] = None


@dataclass
class AnnotationRecord:
    image_id: str
    labels: list[str]
    outcome: Optional[Outcome] = None


def reconcile(labels: Sequence[str]) -> Outcome:
    """Resolve two or three independent labels of one image.

    Any label with two votes is accepted.  Two disagreeing labels without a
    third give ``pending`` (a third annotator is needed); three distinct
    labels drop the image.
    """
    if not 2 <= len(labels) <= 3:
        raise ValueError(f"reconcile needs 2 or 3 labels, got {len(labels)}")
    counts = Counter(labels)
    winners = sorted(lbl for lbl, n in counts.items() if n >= 2)
    if winners:
        return Outcome("accepted", winners[0])
    return Outcome("pending") if len(labels) == 2 else Outcome("dropped")


@dataclass
class SpeciesReport:
    classes_per_species: dict[str, int]
    images_per_class: dict[str, int]
    species_of: dict[str, str]
    below_floor: list[str]

    def kept_classes(self) -> list[str]:
        low = set(self.below_floor)
        return [c for c in self.images_per_class if c not in low]


def species_report(
    rows: Iterable[tuple[str, str, str]],
    floor: int = 0,
    known_species: Sequence[str] = SPECIES,
) -> SpeciesReport:
    """Tally ``(image_id, class, species)`` rows.

    Classes with fewer than ``floor`` images are listed in ``below_floor``.
    """
    known = set(known_species)
    per_class: Counter = Counter()
    species_of: dict[str, str] = {}
    unknown = []
    for _, cls, sp in rows:
        if sp not in known:
            unknown.append(sp)
            continue
        if species_of.setdefault(cls, sp) != sp:
            raise ValueError(f"class {cls!r} is assigned to both {species_of[cls]!r} and {sp!r}")
        per_class[cls] += 1
    if unknown:
        raise ValueError(f"unknown species: {', '.join(sorted(set(unknown)))}")
    per_species: Counter = Counter(species_of.values())
    images = dict(sorted(per_class.items()))
    return SpeciesReport(
        classes_per_species={s: per_species[s] for s in known_species if per_species[s]},
        images_per_class=images,
        species_of=dict(sorted(species_of.items())),
        below_floor=[c for c, n in images.items() if n < floor],
    )
