"""Regular lattices and grid-sampled deformation maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class GridDomain:
    """Regular ``nx`` by ``ny`` lattice over ``[x_min, x_max] x [y_min, y_max]``.

    Nodes are indexed ``(i, j)`` with ``i`` along x and ``j`` along y. Flat
    node arrays use C order over ``(i, j)``, i.e. ``flat = i * ny + j``.
    """

    x_min: float = -1.0
    x_max: float = 1.0
    y_min: float = -1.0
    y_max: float = 1.0
    nx: int = 33
    ny: int = 33

    def __post_init__(self):
        vals = (self.x_min, self.x_max, self.y_min, self.y_max)
        if not all(np.isfinite(v) for v in vals):
            raise InputError("grid bounds must be finite")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InputError(f"degenerate grid bounds {vals}")
        if int(self.nx) < 2 or int(self.ny) < 2:
            raise InputError(f"grid needs at least 2 nodes per axis, got {self.nx}x{self.ny}")

    @classmethod
    def square(cls, n: int = 33, lo: float = -1.0, hi: float = 1.0) -> "GridDomain":
        return cls(lo, hi, lo, hi, n, n)

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def spacing(self) -> tuple[float, float]:
        return ((self.x_max - self.x_min) / (self.nx - 1), (self.y_max - self.y_min) / (self.ny - 1))

    @property
    def extent(self) -> float:
        return max(self.x_max - self.x_min, self.y_max - self.y_min)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.x_max, self.y_min, self.y_max)

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        # linspace reproduces both endpoints exactly
        return (np.linspace(self.x_min, self.x_max, self.nx), np.linspace(self.y_min, self.y_max, self.ny))

    def node(self, i: int, j: int) -> tuple[float, float]:
        xs, ys = self.axes()
        return (float(xs[i]), float(ys[j]))

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape ``(nx * ny, 2)`` in flat order."""
        xs, ys = self.axes()
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    def indices(self) -> np.ndarray:
        I, J = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="ij")
        return np.column_stack([I.ravel(), J.ravel()])

    def padded(self, fraction: float = 0.2) -> tuple[float, float, float, float]:
        px = fraction * (self.x_max - self.x_min)
        py = fraction * (self.y_max - self.y_min)
        return (self.x_min - px, self.x_max + px, self.y_min - py, self.y_max + py)

    def safety_box(self, factor: float = 10.0) -> tuple[float, float, float, float]:
        """Box centred on the domain whose side is ``factor`` times the domain extent."""
        cx = 0.5 * (self.x_min + self.x_max)
        cy = 0.5 * (self.y_min + self.y_max)
        half = 0.5 * factor * self.extent
        return (cx - half, cx + half, cy - half, cy + half)

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min,
                "y_max": self.y_max, "nx": self.nx, "ny": self.ny}

    @classmethod
    def from_dict(cls, d: dict) -> "GridDomain":
        return cls(float(d["x_min"]), float(d["x_max"]), float(d["y_min"]), float(d["y_max"]),
                   int(d["nx"]), int(d["ny"]))


@dataclass
class DeformationMap:
    """Mapped coordinates ``f(s)`` for every node ``s`` of ``domain``.

    ``coords`` has shape ``(nx * ny, 2)`` in the domain's flat node order.
    """

    domain: GridDomain
    coords: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.shape != (self.domain.n_nodes, 2):
            raise InputError(
                f"deformation needs {self.domain.n_nodes} coordinate pairs, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise InputError("deformation coordinates must be finite")
        self.coords = c

    @classmethod
    def identity(cls, domain: GridDomain) -> "DeformationMap":
        return cls(domain, domain.nodes())

    def grid_coords(self) -> np.ndarray:
        """Coordinates reshaped to ``(nx, ny, 2)``."""
        return self.coords.reshape(self.domain.nx, self.domain.ny, 2)

    def copy(self) -> "DeformationMap":
        return DeformationMap(self.domain, self.coords.copy())
