"""Binary masks: the structure roster, positivity, grid resampling, contours,
centroids, connected components, and PGM I/O.

A mask is a 2-d bool ndarray. A MaskSet maps structures to masks that all
share one view's extents. All operations are pure.
"""

from __future__ import annotations

from collections import deque
from enum import Enum
from pathlib import Path

import numpy as np

from segprompt.errors import ContractError

Mask = np.ndarray  # bool, shape (height, width)


class StructureId(str, Enum):
    """Fixed roster: anatomical, then support devices, then pathological."""

    LEFT_LUNG = "left_lung"
    RIGHT_LUNG = "right_lung"
    HEART = "heart"
    CVC = "cvc"
    ETT = "ett"
    NGT = "ngt"
    SGC = "sgc"
    CHEST_TUBE = "chest_tube"
    PNEUMOTHORAX = "pneumothorax"


STRUCTURE_ORDER: tuple[StructureId, ...] = tuple(StructureId)

STRUCTURE_NAMES: dict[StructureId, str] = {
    StructureId.LEFT_LUNG: "left lung",
    StructureId.RIGHT_LUNG: "right lung",
    StructureId.HEART: "heart",
    StructureId.CVC: "central venous catheter",
    StructureId.ETT: "endotracheal tube",
    StructureId.NGT: "nasogastric tube",
    StructureId.SGC: "swan-ganz catheter",
    StructureId.CHEST_TUBE: "chest tube",
    StructureId.PNEUMOTHORAX: "pneumothorax",
}

MaskSet = dict[StructureId, Mask]


def as_mask(arr) -> Mask:
    a = np.asarray(arr)
    if a.ndim != 2:
        raise ContractError(f"mask must be 2-d, got shape {a.shape}")
    return a.astype(bool)


def validate_mask_set(ms: MaskSet) -> None:
    extents = {m.shape for m in ms.values()}
    if len(extents) > 1:
        raise ContractError(f"mask set mixes extents: {sorted(extents)}")


def positive_structures(ms: MaskSet) -> list[StructureId]:
    """Structures with a positive mask, in canonical roster order."""
    return [s for s in STRUCTURE_ORDER if s in ms and is_positive(ms[s])]


def is_positive(m: Mask) -> bool:
    """True iff the mask has at least one foreground pixel."""
    return bool(m.any())


def to_grid(m: Mask, patch: int) -> Mask:
    """Downsample to the patch lattice: a cell is set iff its window has any
    foreground pixel (preserves one-pixel-wide tubes)."""
    h, w = m.shape
    if patch <= 0 or h % patch or w % patch:
        raise ContractError(f"extents {m.shape} not divisible by patch {patch}")
    return m.reshape(h // patch, patch, w // patch, patch).any(axis=(1, 3))


def contour(m: Mask) -> Mask:
    """Foreground pixels with at least one background 4-neighbor
    (out-of-bounds counts as background)."""
    padded = np.zeros((m.shape[0] + 2, m.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = m
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def centroid(m: Mask) -> tuple[float, float]:
    """Arithmetic mean (row, col) of the foreground."""
    rows, cols = np.nonzero(m)
    if rows.size == 0:
        raise ContractError("centroid of an empty mask")
    return float(rows.mean()), float(cols.mean())


def connected_components(m: Mask) -> list[Mask]:
    """8-connected components, largest first; ties broken by the smallest
    (row, col) pixel of the component."""
    h, w = m.shape
    labels = np.full((h, w), -1, dtype=np.int32)
    comps: list[tuple[int, tuple[int, int], Mask]] = []
    for r0, c0 in zip(*np.nonzero(m)):
        if labels[r0, c0] != -1:
            continue
        idx = len(comps)
        comp = np.zeros((h, w), dtype=bool)
        queue = deque([(int(r0), int(c0))])
        labels[r0, c0] = idx
        comp[r0, c0] = True
        while queue:
            r, c = queue.popleft()
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and m[rr, cc] and labels[rr, cc] == -1:
                        labels[rr, cc] = idx
                        comp[rr, cc] = True
                        queue.append((rr, cc))
        pixels = list(zip(*np.nonzero(comp)))
        comps.append((int(comp.sum()), min(pixels), comp))
    comps.sort(key=lambda item: (-item[0], item[1]))
    return [comp for _, _, comp in comps]


# -- PGM I/O -------------------------------------------------------------------
# Binary PGM (P5), 8-bit. Masks: 0 background, nonzero foreground.


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    if arr.dtype != np.uint8:
        raise ContractError(f"PGM writer expects uint8 or bool, got {arr.dtype}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ContractError(f"{path}: not a binary PGM (P5) file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ContractError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=pos)
    return data.reshape(h, w).copy()


def read_mask(path: str | Path) -> Mask:
    """Load a mask PGM, normalizing any nonzero byte to foreground."""
    return read_pgm(path) != 0


def write_mask(path: str | Path, m: Mask) -> None:
    write_pgm(path, as_mask(m))


def read_image(path: str | Path) -> np.ndarray:
    """Load a grayscale PGM as floats in [0, 1]."""
    return read_pgm(path).astype(np.float64) / 255.0


def write_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    write_pgm(path, np.round(arr * 255.0).astype(np.uint8))
