"""Semantic intersection maps and the coordinate-invariant context feature.

A map is a raster of square cells, each carrying one of four semantic
classes.  Cell ``labels[iy, ix]`` covers the half-open box
``[ox + ix*cs, ox + (ix+1)*cs) x [oy + iy*cs, oy + (iy+1)*cs)``, so row 0 is
the bottom of the map (lowest y).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

N_CLASSES = 4
FEATURE_DIM = 20
DEFAULT_R1 = 1.0
DEFAULT_R2 = 3.0
DEFAULT_SAMPLES = 36


class SemanticClass(enum.IntEnum):
    OBSTACLE = 0
    ROAD = 1
    SIDEWALK = 2
    CROSSWALK = 3


CHAR_TO_CLASS = {
    "#": SemanticClass.OBSTACLE,
    "r": SemanticClass.ROAD,
    "s": SemanticClass.SIDEWALK,
    "c": SemanticClass.CROSSWALK,
}
CLASS_TO_CHAR = {v: k for k, v in CHAR_TO_CLASS.items()}


@dataclass(frozen=True)
class RigidTransform:
    """Rotation about the map-frame origin followed by a translation."""

    angle: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    @classmethod
    def quarter_turns(cls, k: int, tx: float = 0.0, ty: float = 0.0) -> "RigidTransform":
        return cls(angle=(k % 4) * math.pi / 2, translation=(float(tx), float(ty)))

    def quarter_turn_count(self) -> int | None:
        """Number of counter-clockwise quarter turns, or None if not a multiple of 90 degrees."""
        k = self.angle / (math.pi / 2)
        kr = round(k)
        if abs(k - kr) > 1e-12:
            return None
        return kr % 4

    def rotation_matrix(self) -> np.ndarray:
        k = self.quarter_turn_count()
        if k is not None:
            # exact entries so quarter-turn maps commute with the raster
            c, s = ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[k]
        else:
            c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, -s], [s, c]])


def transform_point(p, T: RigidTransform) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return p @ T.rotation_matrix().T + np.asarray(T.translation, dtype=float)


def _circle_offsets(n: int) -> np.ndarray:
    """Unit-circle offsets at uniform angles 2*pi*k/n.

    For n divisible by 4 the set is built from one quadrant by exact
    coordinate swaps, so it maps onto itself bit-for-bit under quarter turns.
    """
    if n % 4:
        ang = 2.0 * np.pi * np.arange(n) / n
        return np.column_stack([np.cos(ang), np.sin(ang)])
    q = n // 4
    ang = 2.0 * np.pi * np.arange(q) / n
    first = np.column_stack([np.cos(ang), np.sin(ang)])
    first[0] = (1.0, 0.0)
    quads = [first]
    for _ in range(3):
        prev = quads[-1]
        quads.append(np.column_stack([-prev[:, 1], prev[:, 0]]))
    return np.concatenate(quads)


@dataclass(frozen=True, eq=False)
class SemanticGrid:
    origin: tuple[float, float]
    cell_size: float
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int8)
        if labels.ndim != 2 or labels.size == 0:
            raise ValueError("labels must be a non-empty 2-D array")
        if labels.min() < 0 or labels.max() >= N_CLASSES:
            raise ValueError("labels must be in 0..3")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        labels = labels.copy()
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "cell_size", float(self.cell_size))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def n_cells(self) -> int:
        return self.labels.size

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax)."""
        ox, oy = self.origin
        return ox, oy, ox + self.width * self.cell_size, oy + self.height * self.cell_size

    def __eq__(self, other):
        if not isinstance(other, SemanticGrid):
            return NotImplemented
        return (
            self.origin == other.origin
            and self.cell_size == other.cell_size
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None

    def cell_indices(self, pts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (ix, iy, inside) for an array of points of shape (..., 2)."""
        pts = np.asarray(pts, dtype=float)
        ix = np.floor((pts[..., 0] - self.origin[0]) / self.cell_size)
        iy = np.floor((pts[..., 1] - self.origin[1]) / self.cell_size)
        inside = (ix >= 0) & (ix < self.width) & (iy >= 0) & (iy < self.height)
        return ix.astype(np.int64), iy.astype(np.int64), inside

    def labels_at(self, pts) -> np.ndarray:
        """Vectorized label lookup; out-of-bounds points are Obstacle."""
        ix, iy, inside = self.cell_indices(pts)
        out = np.zeros(inside.shape, dtype=np.int8)
        out[inside] = self.labels[iy[inside], ix[inside]]
        return out

    def flat_index(self, pts) -> np.ndarray:
        """Flat cell index (iy*width + ix) of each point, clipped into the grid."""
        ix, iy, _ = self.cell_indices(pts)
        ix = np.clip(ix, 0, self.width - 1)
        iy = np.clip(iy, 0, self.height - 1)
        return iy * self.width + ix

    def cell_centers(self) -> np.ndarray:
        """Centers of all cells in flat-index order, shape (n_cells, 2)."""
        iy, ix = np.mgrid[0:self.height, 0:self.width]
        x = self.origin[0] + (ix.ravel() + 0.5) * self.cell_size
        y = self.origin[1] + (iy.ravel() + 0.5) * self.cell_size
        return np.column_stack([x, y])

    def contains(self, p) -> bool:
        return bool(self.cell_indices(np.asarray(p, dtype=float))[2])

    def cells_of_class(self, cls: SemanticClass) -> np.ndarray:
        """Flat indices of cells with the given class."""
        return np.flatnonzero(self.labels.ravel() == int(cls))


def label_at(grid: SemanticGrid, p) -> SemanticClass:
    return SemanticClass(int(grid.labels_at(np.asarray(p, dtype=float))))


def shell_histogram(grid: SemanticGrid, p, radius: float, n_samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    """Normalized class histogram of ``n_samples`` points on a circle around ``p``.

    Components are ordered (Obstacle, Road, Sidewalk, Crosswalk).
    """
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    return shell_histograms(grid, np.asarray(p, dtype=float)[None, :], radius, n_samples)[0]


def shell_histograms(grid: SemanticGrid, pts: np.ndarray, radius: float,
                     n_samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    """Batched :func:`shell_histogram` for points of shape (n, 2)."""
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    ring = pts[:, None, :] + radius * _circle_offsets(n_samples)[None, :, :]
    labs = grid.labels_at(ring)
    counts = np.stack([(labs == c).sum(axis=1) for c in range(N_CLASSES)], axis=1)
    return counts / float(n_samples)


def feature_vectors(grid: SemanticGrid, pts, r1: float = DEFAULT_R1, r2: float = DEFAULT_R2,
                    n_samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    """Context features for points of shape (n, 2); returns (n, 20).

    Column j holds the feature with 1-based index j+1: a one-hot label
    (1-4), the two shell histograms when on road (5-12), and the same
    histograms when on sidewalk or crosswalk (13-20).
    """
    if not (r1 > 0 and r2 > 0):
        raise ValueError("shell radii must be positive")
    if not r1 < r2:
        raise ValueError(f"need r1 < r2, got r1={r1}, r2={r2}")
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    n = pts.shape[0]
    psi = np.zeros((n, FEATURE_DIM))
    labs = grid.labels_at(pts).astype(np.int64)
    psi[np.arange(n), labs] = 1.0
    road = labs == SemanticClass.ROAD
    walk = (labs == SemanticClass.SIDEWALK) | (labs == SemanticClass.CROSSWALK)
    active = road | walk
    if active.any():
        sub = pts[active]
        hist = np.concatenate(
            [shell_histograms(grid, sub, r1, n_samples), shell_histograms(grid, sub, r2, n_samples)],
            axis=1,
        )
        block = np.zeros((n, 8))
        block[active] = hist
        psi[road, 4:12] = block[road]
        psi[walk, 12:20] = block[walk]
    return psi


def feature_vector(grid: SemanticGrid, p, r1: float = DEFAULT_R1, r2: float = DEFAULT_R2,
                   n_samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    return feature_vectors(grid, np.asarray(p, dtype=float)[None, :], r1, r2, n_samples)[0]


def transform_grid(grid: SemanticGrid, T: RigidTransform) -> SemanticGrid:
    """Apply a quarter-turn rigid transform to the raster.

    ``label_at(transform_grid(g, T), transform_point(p, T)) == label_at(g, p)``
    for every point off the cell boundaries.
    """
    k = T.quarter_turn_count()
    if k is None:
        raise ValueError("transform_grid only supports rotations by multiples of 90 degrees")
    labels = grid.labels
    xmin, ymin, xmax, ymax = grid.bounds
    corners = transform_point(np.array([[xmin, ymin], [xmax, ymax]]), RigidTransform.quarter_turns(k))
    new_origin = corners.min(axis=0) + np.asarray(T.translation, dtype=float)
    for _ in range(k):
        # one CCW quarter turn: new[a, b] = old[H-1-b, a]
        labels = labels[::-1, :].T
    return SemanticGrid(origin=tuple(new_origin), cell_size=grid.cell_size, labels=np.ascontiguousarray(labels))


def grid_from_strings(rows: list[str], cell_size: float = 0.5, origin=(0.0, 0.0)) -> SemanticGrid:
    """Build a grid from text rows, top row first (as in the map file)."""
    if not rows:
        raise ValueError("no rows")
    width = len(rows[0])
    arr = np.empty((len(rows), width), dtype=np.int8)
    for r, line in enumerate(rows):
        if len(line) != width:
            raise ValueError(f"row {r} has length {len(line)}, expected {width}")
        for c, ch in enumerate(line):
            try:
                arr[r, c] = CHAR_TO_CLASS[ch]
            except KeyError:
                raise ValueError(f"row {r}: invalid map character {ch!r}") from None
    return SemanticGrid(origin=origin, cell_size=cell_size, labels=arr[::-1])


def grid_to_strings(grid: SemanticGrid) -> list[str]:
    return ["".join(CLASS_TO_CHAR[SemanticClass(int(v))] for v in row) for row in grid.labels[::-1]]
