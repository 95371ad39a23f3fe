"""Monotone link functions mapping a covariate shift to an effective flow amount.

Every link satisfies ``g(0) = 0`` and is strictly increasing. Parameters are
held in an unconstrained "raw" form so gradient steps cannot break
monotonicity: ``Linear`` stores ``log(alpha)``, ``MonotonePL`` stores the log
of each segment slope.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

KINDS = ("identity", "linear", "monotone_pl")


@dataclass
class LinkFunction:
    kind: str = "identity"
    raw: np.ndarray = field(default_factory=lambda: np.zeros(0))
    breakpoints: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown link kind {self.kind!r}; expected one of {KINDS}")
        self.raw = np.atleast_1d(np.asarray(self.raw, dtype=float)).copy()
        self.breakpoints = np.atleast_1d(np.asarray(self.breakpoints, dtype=float)).copy()
        expected = {"identity": 0, "linear": 1,
                    "monotone_pl": len(self.breakpoints) + 1}[self.kind]
        if self.kind == "linear" and self.raw.size == 0:
            self.raw = np.zeros(1)
        if self.kind == "monotone_pl" and self.raw.size == 0:
            self.raw = np.zeros(expected)
        if self.raw.size != expected:
            raise InputError(f"{self.kind} link needs {expected} raw parameters, got {self.raw.size}")
        if self.kind == "monotone_pl" and np.any(np.diff(self.breakpoints) <= 0):
            raise InputError("monotone_pl breakpoints must be strictly increasing")
        if not np.all(np.isfinite(self.raw)):
            raise InputError("link parameters must be finite")

    @classmethod
    def identity(cls) -> "LinkFunction":
        return cls("identity")

    @classmethod
    def linear(cls, alpha: float = 1.0) -> "LinkFunction":
        if not alpha > 0:
            raise InputError(f"linear link slope must be positive, got {alpha}")
        return cls("linear", [np.log(alpha)])

    @classmethod
    def monotone_pl(cls, breakpoints, slopes=None) -> "LinkFunction":
        bp = np.atleast_1d(np.asarray(breakpoints, dtype=float))
        if slopes is None:
            slopes = np.ones(bp.size + 1)
        slopes = np.asarray(slopes, dtype=float)
        if np.any(slopes <= 0):
            raise InputError("monotone_pl slopes must be positive")
        return cls("monotone_pl", np.log(slopes), bp)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.raw[0])) if self.kind == "linear" else 1.0

    @property
    def slopes(self) -> np.ndarray:
        if self.kind == "monotone_pl":
            return np.exp(self.raw)
        return np.array([self.alpha])

    @property
    def n_params(self) -> int:
        return self.raw.size

    def with_params(self, raw) -> "LinkFunction":
        return LinkFunction(self.kind, raw, self.breakpoints)

    def _edges(self):
        return np.concatenate([[-np.inf], self.breakpoints, [np.inf]])

    def _overlaps(self, x):
        # signed length of [0, x] inside each segment, shape (len(x), n_segments)
        e = self._edges()
        lo, hi = e[:-1][None, :], e[1:][None, :]
        return np.clip(x[:, None], lo, hi) - np.clip(0.0, lo, hi)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return x.copy()
        if self.kind == "linear":
            return self.alpha * x
        flat = x.reshape(-1)
        return (self._overlaps(flat) @ self.slopes).reshape(x.shape)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind != "monotone_pl":
            return np.full(x.shape, self.alpha)
        seg = np.searchsorted(self.breakpoints, x.reshape(-1), side="right")
        return self.slopes[seg].reshape(x.shape)

    def param_grad(self, x) -> np.ndarray:
        """``d g(x) / d raw`` with shape ``(len(x), n_params)``."""
        flat = np.asarray(x, dtype=float).reshape(-1)
        if self.kind == "identity":
            return np.zeros((flat.size, 0))
        if self.kind == "linear":
            return (self.alpha * flat)[:, None]
        return self._overlaps(flat) * self.slopes[None, :]

    def max_slope(self, lo: float, hi: float) -> float:
        """Supremum of ``|g'|`` over ``[lo, hi]``."""
        if self.kind != "monotone_pl":
            return self.alpha
        seg_lo = np.searchsorted(self.breakpoints, lo, side="right")
        seg_hi = np.searchsorted(self.breakpoints, hi, side="right")
        return float(self.slopes[seg_lo:seg_hi + 1].max())

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "raw": self.raw.tolist()}
        if self.kind == "monotone_pl":
            d["breakpoints"] = self.breakpoints.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LinkFunction":
        return cls(d["kind"], d.get("raw", []), d.get("breakpoints", []))
