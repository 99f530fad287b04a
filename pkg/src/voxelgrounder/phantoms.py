"""Synthetic phantom corpus: volumes with paired masks, reports, and QA.

Each phantom is a small CT-like volume containing geometric structures drawn
from a fixed class palette. Every class has a characteristic shape and
intensity so that appearance-based localization is learnable across phantoms,
while positions and sizes vary per seed. Generation is fully deterministic
given the spec seed.

Two difficulty tiers exist: ``large_organ`` phantoms contain big high-contrast
structures, ``small_structure`` phantoms contain small or thin ones. The tiers
behave differently under geometric prompting, which the evaluation suite
relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PhantomSpecError
from .volume import HU, MaskVolume, Volume3D

SHAPE_KINDS = ("sphere", "ellipsoid", "tube", "box")
DIFFICULTIES = ("large_organ", "small_structure")

DEFAULT_SHAPE = (16, 64, 64)
DEFAULT_SPACING = (5.0, 1.5, 1.5)
BACKGROUND_HU = -100.0


@dataclass
class Structure:
    """One geometric structure inside a phantom.

    ``center`` is fractional ``(z, y, x)`` in ``[0, 1]``. ``size`` is a radius
    as a fraction of the smallest volume dimension for spheres and tubes, or a
    triple of per-axis half-extent fractions for ellipsoids and boxes.
    ``drift`` displaces a tube's lateral center linearly from slice 0 to Z-1,
    so tube centroids move across slices.
    """

    kind: str
    center: tuple[float, float, float]
    size: float | tuple[float, float, float]
    intensity: float
    class_name: str
    drift: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise PhantomSpecError(f"unknown shape kind {self.kind!r}")


@dataclass
class PhantomSpec:
    seed: int
    structures: list[Structure]
    noise_sigma: float = 15.0
    difficulty: str = "large_organ"
    shape: tuple[int, int, int] = DEFAULT_SHAPE
    spacing: tuple[float, float, float] = DEFAULT_SPACING

    def __post_init__(self):
        if self.difficulty not in DIFFICULTIES:
            raise PhantomSpecError(f"unknown difficulty {self.difficulty!r}")
        names = [s.class_name for s in self.structures]
        if len(names) != len(set(names)):
            raise PhantomSpecError("duplicate class_name in phantom spec (classes must be unique)")
        for s in self.structures:
            self._check_inside(s)

    def _check_inside(self, s: Structure):
        zdim, ydim, xdim = self.shape
        dims = np.array([zdim, ydim, xdim], dtype=float)
        center = np.asarray(s.center, dtype=float) * (dims - 1)
        if s.kind in ("sphere", "tube"):
            r, rz = round_extents(float(s.size), self.shape)
            extents = np.array([0.0 if s.kind == "tube" else rz, r, r])
        else:
            extents = np.asarray(s.size, dtype=float) * dims
        if s.kind == "tube":
            dy = abs(s.drift[0]) * ydim
            dx = abs(s.drift[1]) * xdim
            extents = extents + np.array([0.0, dy, dx])
        lo = center - extents
        hi = center + extents
        if (lo < -0.5).any() or (hi > dims - 0.5).any():
            raise PhantomSpecError(
                f"structure {s.class_name!r} ({s.kind}) extends outside the volume"
            )


@dataclass
class QAItem:
    question: str
    answer: str
    kind: str  # short | long | choice
    options: list[str] | None = None

    def __post_init__(self):
        if self.kind not in ("short", "long", "choice"):
            raise PhantomSpecError(f"unknown QA kind {self.kind!r}")
        if self.kind == "choice":
            if not self.options or len(self.options) < 2:
                raise PhantomSpecError("choice items need at least two options")
            if self.answer not in self.options:
                raise PhantomSpecError("choice answer must be one of the options")


@dataclass
class CorpusRecord:
    """One phantom with its mask, report, QA items, and referring phrases."""

    volume_id: str
    volume: Volume3D
    masks: MaskVolume
    report: str
    qa_items: list[QAItem]
    referring_phrases: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.masks.class_names.values():
            phrases = self.referring_phrases.get(name, [])
            if not phrases:
                raise PhantomSpecError(f"class {name!r} has no referring phrase")
            for p in phrases:
                if name.lower() in p.lower():
                    raise PhantomSpecError(
                        f"referring phrase for {name!r} contains the class name: {p!r}"
                    )


# --- class palette ---------------------------------------------------------
#
# intensity in HU; size ranges are fractions (radius of min-dim, or per-axis
# half-extents). Referring phrases describe appearance without class names.

PALETTE: dict[str, dict] = {
    "liver": {
        "kind": "ellipsoid",
        "intensity": 60.0,
        "size_range": ((0.18, 0.26), (0.16, 0.24), (0.18, 0.28)),
        "difficulty": "large_organ",
        "referring": [
            "the large smooth oval region of moderate brightness",
            "the biggest soft tissue structure in the scan",
        ],
        "report": "a large well defined soft tissue organ",
    },
    "lung": {
        "kind": "ellipsoid",
        "intensity": -800.0,
        "size_range": ((0.18, 0.26), (0.18, 0.26), (0.16, 0.26)),
        "difficulty": "large_organ",
        "referring": [
            "the large dark low density region",
            "the big air filled area with very low attenuation",
        ],
        "report": "a large low attenuation air filled region",
    },
    "spleen": {
        "kind": "sphere",
        "intensity": 160.0,
        "size_range": (0.14, 0.2),
        "difficulty": "large_organ",
        "referring": [
            "the rounded organ of clearly higher density",
            "the medium sized bright round structure",
        ],
        "report": "a rounded organ of mildly increased density",
    },
    "nodule": {
        "kind": "sphere",
        "intensity": 280.0,
        "size_range": (0.05, 0.085),
        "difficulty": "small_structure",
        "referring": [
            "the small bright rounded spot",
            "the tiny dense focal lesion",
        ],
        "report": "a small dense focal lesion",
    },
    "vessel": {
        "kind": "tube",
        "intensity": 430.0,
        "size_range": (0.035, 0.06),
        "difficulty": "small_structure",
        "referring": [
            "the thin bright tubular structure running through the slices",
            "the narrow elongated channel of high density",
        ],
        "report": "a thin contrast filled tubular channel",
    },
    "rib": {
        "kind": "box",
        "intensity": 850.0,
        "size_range": ((0.05, 0.09), (0.04, 0.07), (0.06, 0.1)),
        "difficulty": "small_structure",
        "referring": [
            "the small very dense block like fragment",
            "the compact piece of bone density material",
        ],
        "report": "a compact fragment of bone density",
    },
}


def palette_classes(difficulty: str | None = None) -> list[str]:
    if difficulty is None:
        return list(PALETTE)
    return [name for name, info in PALETTE.items() if info["difficulty"] == difficulty]


# --- rasterization ---------------------------------------------------------


def round_extents(size: float, shape: tuple[int, int, int]) -> tuple[float, float]:
    """Lateral radius and z half-extent for spheres and tubes.

    The radius is a fraction of the in-plane extent; the z half-extent shrinks
    in proportion when there are fewer slices than in-plane pixels (thick
    slabs), and equals the radius — a true sphere — on isotropic grids.
    """
    zdim, ydim, xdim = shape
    inplane = min(ydim, xdim)
    r = size * inplane
    rz = r * min(1.0, zdim / inplane)
    return r, max(rz, 0.51)


def _rasterize(s: Structure, shape: tuple[int, int, int]) -> np.ndarray:
    """Boolean occupancy of a structure, sampled at voxel centers."""
    zdim, ydim, xdim = shape
    cz = s.center[0] * (zdim - 1)
    cy = s.center[1] * (ydim - 1)
    cx = s.center[2] * (xdim - 1)
    zz = np.arange(zdim, dtype=np.float64)[:, None, None]
    yy = np.arange(ydim, dtype=np.float64)[None, :, None]
    xx = np.arange(xdim, dtype=np.float64)[None, None, :]

    if s.kind == "sphere":
        r, rz = round_extents(float(s.size), shape)
        return (((zz - cz) / rz) ** 2 + ((yy - cy) / r) ** 2 + ((xx - cx) / r) ** 2) <= 1.0
    if s.kind == "ellipsoid":
        az = max(float(s.size[0]) * zdim, 0.5)
        ay = max(float(s.size[1]) * ydim, 0.5)
        ax = max(float(s.size[2]) * xdim, 0.5)
        return (((zz - cz) / az) ** 2 + ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2) <= 1.0
    if s.kind == "box":
        hz = float(s.size[0]) * zdim
        hy = float(s.size[1]) * ydim
        hx = float(s.size[2]) * xdim
        return (
            (np.abs(zz - cz) <= hz) & (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        )
    # tube: a circle per slice whose lateral center drifts linearly with z
    r, _ = round_extents(float(s.size), shape)
    t = np.linspace(-1.0, 1.0, zdim)[:, None, None]
    cyz = cy + t * s.drift[0] * ydim
    cxz = cx + t * s.drift[1] * xdim
    return ((yy - cyz) ** 2 + (xx - cxz) ** 2) <= r * r


def tube_centroid_track(s: Structure, shape: tuple[int, int, int]) -> np.ndarray:
    """Analytic per-slice (y, x) centroid of a tube structure."""
    zdim, ydim, xdim = shape
    cy = s.center[1] * (ydim - 1)
    cx = s.center[2] * (xdim - 1)
    t = np.linspace(-1.0, 1.0, zdim)
    return np.stack([cy + t * s.drift[0] * ydim, cx + t * s.drift[1] * xdim], axis=1)


# --- text synthesis --------------------------------------------------------


def _location_phrase(center: tuple[float, float, float]) -> str:
    cz, cy, cx = center
    zw = "upper" if cz < 0.4 else ("lower" if cz > 0.6 else "middle")
    xw = "left" if cx < 0.45 else ("right" if cx > 0.55 else "central")
    return f"{zw} {xw}"

def _render_report(spec: PhantomSpec) -> str:
    if not spec.structures:
        return "No abnormal structures are identified. The scan is unremarkable."
    parts = []
    for s in spec.structures:
        desc = PALETTE[s.class_name]["report"]
        loc = _location_phrase(s.center)
        parts.append(f"The scan shows {desc} named the {s.class_name} in the {loc} part of the volume.")
    return " ".join(parts)


def _render_qa(spec: PhantomSpec, report: str, rng: np.random.Generator) -> list[QAItem]:
    items: list[QAItem] = []
    if not spec.structures:
        items.append(QAItem("Is any structure visible in this scan?", "No", "short"))
        items.append(QAItem("Describe the findings in this scan.", report, "long"))
        opts = sorted(rng.choice(list(PALETTE), size=2, replace=False).tolist() + ["none"])
        items.append(
            QAItem(
                "Which structure is present in this scan?",
                "none",
                "choice",
                options=opts,
            )
        )
        return items

    primary = spec.structures[int(rng.integers(len(spec.structures)))]
    present = {s.class_name for s in spec.structures}
    absent = [c for c in PALETTE if c not in present]

    if rng.random() < 0.5:
        items.append(QAItem(f"Is there a {primary.class_name} in this scan?", "Yes", "short"))
    else:
        neg = absent[int(rng.integers(len(absent)))]
        items.append(QAItem(f"Is there a {neg} in this scan?", "No", "short"))
    items.append(QAItem("Describe the findings in this scan.", report, "long"))

    distractors = rng.choice(absent, size=2, replace=False).tolist()
    options = sorted([primary.class_name] + distractors)
    items.append(
        QAItem(
            "Which structure is present in this scan?",
            primary.class_name,
            "choice",
            options=options,
        )
    )
    return items


# --- generation ------------------------------------------------------------


def generate_phantom(spec: PhantomSpec) -> CorpusRecord:
    """Build the full record for one phantom spec.

    Deterministic given ``spec.seed``. Raises :class:`PhantomSpecError` when
    structures overlap at voxel level (every labeled voxel must belong to
    exactly one structure).
    """
    rng = np.random.default_rng(spec.seed)
    voxels = np.full(spec.shape, BACKGROUND_HU, dtype=np.float64)
    labels = np.zeros(spec.shape, dtype=np.uint8)
    class_names: dict[int, str] = {}

    for idx, s in enumerate(spec.structures, start=1):
        occ = _rasterize(s, spec.shape)
        if (labels[occ] != 0).any():
            other = class_names[int(labels[occ][labels[occ] != 0][0])]
            raise PhantomSpecError(
                f"structures {other!r} and {s.class_name!r} overlap"
            )
        voxels[occ] = s.intensity
        labels[occ] = idx
        class_names[idx] = s.class_name

    if spec.noise_sigma > 0:
        voxels = voxels + rng.normal(0.0, spec.noise_sigma, size=spec.shape)

    volume = Volume3D(
        shape=spec.shape,
        spacing=spec.spacing,
        voxels=voxels.astype(np.float32),
        intensity_unit=HU,
    )
    masks = MaskVolume(shape=spec.shape, labels=labels, class_names=class_names)
    report = _render_report(spec)
    qa = _render_qa(spec, report, rng)
    referring = {
        s.class_name: list(PALETTE[s.class_name]["referring"]) for s in spec.structures
    }
    volume_id = f"phantom-{spec.difficulty}-{spec.seed:08d}"
    return CorpusRecord(
        volume_id=volume_id,
        volume=volume,
        masks=masks,
        report=report,
        qa_items=qa,
        referring_phrases=referring,
    )


def _sample_structure(
    class_name: str, rng: np.random.Generator, shape: tuple[int, int, int]
) -> Structure:
    info = PALETTE[class_name]
    kind = info["kind"]
    if kind in ("sphere", "tube"):
        lo, hi = info["size_range"]
        size: float | tuple = float(rng.uniform(lo, hi))
    else:
        size = tuple(float(rng.uniform(lo, hi)) for lo, hi in info["size_range"])

    zdim, ydim, xdim = shape
    dims = np.array([zdim, ydim, xdim], dtype=float)
    if kind in ("sphere", "tube"):
        r, rz = round_extents(float(size), shape)
        extents = np.array([rz, r, r]) / (dims - 1)
    else:
        extents = np.asarray(size) * dims / (dims - 1)

    drift = (0.0, 0.0)
    if kind == "tube":
        extents[0] = 0.0
        drift = (float(rng.uniform(-0.08, 0.08)), float(rng.uniform(-0.1, 0.1)))
        extents[1] += abs(drift[0]) * ydim / (ydim - 1)
        extents[2] += abs(drift[1]) * xdim / (xdim - 1)

    margin = 0.04
    center = []
    for ax in range(3):
        lo = extents[ax] + margin
        hi = 1.0 - extents[ax] - margin
        if kind == "tube" and ax == 0:
            center.append(0.5)
            continue
        if lo >= hi:
            center.append(0.5)
        else:
            center.append(float(rng.uniform(lo, hi)))
    return Structure(
        kind=kind,
        center=tuple(center),
        size=size,
        intensity=float(info["intensity"]),
        class_name=class_name,
        drift=drift,
    )


def sample_phantom_spec(
    seed: int,
    difficulty: str = "large_organ",
    shape: tuple[int, int, int] = DEFAULT_SHAPE,
    n_structures: int | None = None,
    noise_sigma: float = 15.0,
) -> PhantomSpec:
    """Draw a random non-overlapping phantom spec for one difficulty tier."""
    rng = np.random.default_rng(seed)
    classes = palette_classes(difficulty)
    if n_structures is None:
        n_structures = int(rng.integers(1, 3))
    chosen = rng.choice(classes, size=min(n_structures, len(classes)), replace=False)

    for _ in range(64):  # resample until structures do not collide
        structures = [_sample_structure(c, rng, shape) for c in chosen]
        occupied = np.zeros(shape, dtype=bool)
        ok = True
        for s in structures:
            occ = _rasterize(s, shape)
            if (occupied & occ).any():
                ok = False
                break
            occupied |= occ
        if ok:
            try:
                return PhantomSpec(
                    seed=seed,
                    structures=structures,
                    noise_sigma=noise_sigma,
                    difficulty=difficulty,
                    shape=shape,
                )
            except PhantomSpecError:
                continue
    raise PhantomSpecError(f"could not place non-overlapping structures for seed {seed}")


def make_corpus(
    n: int,
    difficulty: str,
    seed: int,
    shape: tuple[int, int, int] = DEFAULT_SHAPE,
    noise_sigma: float = 15.0,
) -> list[CorpusRecord]:
    """Generate ``n`` records, seeds ``seed..seed+n-1``.

    ``difficulty`` may be a single tier or ``"mixed"``, which alternates
    large-organ and small-structure phantoms.
    """
    records = []
    for i in range(n):
        if difficulty == "mixed":
            tier = DIFFICULTIES[i % 2]
        else:
            tier = difficulty
        spec = sample_phantom_spec(seed + i, tier, shape, noise_sigma=noise_sigma)
        records.append(generate_phantom(spec))
    return records
