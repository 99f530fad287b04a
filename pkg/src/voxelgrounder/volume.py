"""Voxel grid containers and intensity normalization.

Volumes are stored z-major (slice-contiguous, C order ``(Z, Y, X)``) so the
slice-wise segmentation decoder can view individual slices without copies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidWindowError, ShapeMismatchError

HU = "HU"
NORMALIZED = "normalized"

#: Conventional CT window applied when no explicit window is given.
DEFAULT_WINDOW = (-1000.0, 1000.0)


@dataclass
class Volume3D:
    """A scalar voxel grid.

    Attributes:
        shape: ``(Z, Y, X)`` voxel counts.
        spacing: voxel size in mm along ``(z, y, x)``.
        voxels: float32 array of shape ``(Z, Y, X)``, z-major scan order.
        intensity_unit: ``"HU"`` for raw CT-like values, ``"normalized"``
            once mapped into ``[0, 1]``.
    """

    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    voxels: np.ndarray
    intensity_unit: str = HU

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(s < 1 for s in self.shape):
            raise ShapeMismatchError(f"volume shape must be >= 1 per axis, got {self.shape}")
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.shape != self.shape:
            raise ShapeMismatchError(
                f"voxel array shape {self.voxels.shape} != declared shape {self.shape}"
            )
        if self.intensity_unit not in (HU, NORMALIZED):
            raise ValueError(f"unknown intensity unit {self.intensity_unit!r}")

    @property
    def voxel_count(self) -> int:
        z, y, x = self.shape
        return z * y * x

    def slice(self, z: int) -> np.ndarray:
        """Contiguous view of slice ``z`` (no copy)."""
        return self.voxels[z]


@dataclass
class MaskVolume:
    """Integer label grid paired with a parent :class:`Volume3D`.

    Label 0 is background; label ``k > 0`` is class ``k`` and must have an
    entry in ``class_names``.
    """

    shape: tuple[int, int, int]
    labels: np.ndarray
    class_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.labels.shape != self.shape:
            raise ShapeMismatchError(
                f"label array shape {self.labels.shape} != declared shape {self.shape}"
            )
        self.class_names = {int(k): str(v) for k, v in self.class_names.items()}
        present = set(int(v) for v in np.unique(self.labels)) - {0}
        missing = present - set(self.class_names)
        if missing:
            raise ShapeMismatchError(f"labels {sorted(missing)} have no class_name entry")

    def present_classes(self) -> list[int]:
        return sorted(set(int(v) for v in np.unique(self.labels)) - {0})

    def binary(self, label: int) -> np.ndarray:
        """Boolean mask of one class."""
        return self.labels == label


def normalize_volume(v: Volume3D, window: tuple[float, float] = DEFAULT_WINDOW) -> Volume3D:
    """Map intensities into ``[0, 1]`` with a linear window.

    ``x -> clamp((x - lo) / (hi - lo), 0, 1)``. Already-normalized volumes are
    returned unchanged (idempotence), so repeated normalization is safe.
    """
    lo, hi = float(window[0]), float(window[1])
    if lo >= hi:
        raise InvalidWindowError(f"window lo must be < hi, got ({lo}, {hi})")
    if v.intensity_unit == NORMALIZED:
        return v
    scaled = np.clip((v.voxels - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)
    return Volume3D(shape=v.shape, spacing=v.spacing, voxels=scaled, intensity_unit=NORMALIZED)
