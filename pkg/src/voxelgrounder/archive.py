"""On-disk record archives: JSON manifest plus raw little-endian payloads.

One record lives in a directory::

    <record>/manifest.json   shape, spacing, dtype, class_names, text fields
    <record>/volume.f32      float32 little-endian voxels, z-major
    <record>/mask.u8         uint8 labels, same order

A corpus is a directory of record directories plus an ``index.json`` listing
them in order. Round-trips are lossless at byte level.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ArchiveFormatError
from .phantoms import CorpusRecord, QAItem
from .volume import MaskVolume, Volume3D

MANIFEST = "manifest.json"
VOLUME_PAYLOAD = "volume.f32"
MASK_PAYLOAD = "mask.u8"
INDEX = "index.json"


def save_archive(record: CorpusRecord, path: str | Path) -> Path:
    """Write one record to ``path`` (created if needed). Returns the path."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "volume_id": record.volume_id,
        "shape": list(record.volume.shape),
        "spacing": list(record.volume.spacing),
        "dtype": "float32",
        "intensity_unit": record.volume.intensity_unit,
        "class_names": {str(k): v for k, v in record.masks.class_names.items()},
        "report": record.report,
        "qa_items": [
            {"question": q.question, "answer": q.answer, "kind": q.kind, "options": q.options}
            for q in record.qa_items
        ],
        "referring_phrases": record.referring_phrases,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    vox = np.ascontiguousarray(record.volume.voxels, dtype="<f4")
    (path / VOLUME_PAYLOAD).write_bytes(vox.tobytes())
    (path / MASK_PAYLOAD).write_bytes(
        np.ascontiguousarray(record.masks.labels, dtype=np.uint8).tobytes()
    )
    return path


def _require(manifest: dict, field: str):
    if field not in manifest:
        raise ArchiveFormatError(f"manifest missing field {field!r}", field=field)
    return manifest[field]


def load_archive(path: str | Path) -> CorpusRecord:
    """Read one record directory back; validates payload sizes against shape."""
    path = Path(path)
    manifest_path = path / MANIFEST
    if not manifest_path.is_file():
        raise ArchiveFormatError(f"no manifest at {manifest_path}", field="manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ArchiveFormatError(f"manifest is not valid JSON: {e}", field="manifest.json") from e

    shape = tuple(int(s) for s in _require(manifest, "shape"))
    if len(shape) != 3:
        raise ArchiveFormatError(f"shape must have 3 entries, got {shape}", field="shape")
    spacing = tuple(float(s) for s in _require(manifest, "spacing"))
    dtype = _require(manifest, "dtype")
    if dtype != "float32":
        raise ArchiveFormatError(f"unsupported dtype {dtype!r}", field="dtype")
    n_voxels = shape[0] * shape[1] * shape[2]

    raw = (path / VOLUME_PAYLOAD).read_bytes()
    if len(raw) != 4 * n_voxels:
        raise ArchiveFormatError(
            f"volume payload holds {len(raw) // 4} voxels, expected {n_voxels} for shape {shape}",
            field=VOLUME_PAYLOAD,
        )
    voxels = np.frombuffer(raw, dtype="<f4").reshape(shape)

    raw_mask = (path / MASK_PAYLOAD).read_bytes()
    if len(raw_mask) != n_voxels:
        raise ArchiveFormatError(
            f"mask payload holds {len(raw_mask)} voxels, expected {n_voxels}",
            field=MASK_PAYLOAD,
        )
    labels = np.frombuffer(raw_mask, dtype=np.uint8).reshape(shape)

    class_names = {int(k): str(v) for k, v in _require(manifest, "class_names").items()}
    qa_items = [
        QAItem(
            question=item["question"],
            answer=item["answer"],
            kind=item["kind"],
            options=item.get("options"),
        )
        for item in _require(manifest, "qa_items")
    ]
    volume = Volume3D(
        shape=shape,
        spacing=spacing,
        voxels=voxels.copy(),
        intensity_unit=_require(manifest, "intensity_unit"),
    )
    masks = MaskVolume(shape=shape, labels=labels.copy(), class_names=class_names)
    return CorpusRecord(
        volume_id=_require(manifest, "volume_id"),
        volume=volume,
        masks=masks,
        report=_require(manifest, "report"),
        qa_items=qa_items,
        referring_phrases=_require(manifest, "referring_phrases"),
    )


def save_corpus(records: list[CorpusRecord], root: str | Path) -> Path:
    """Write each record under ``root/<volume_id>/`` plus an index file."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for record in records:
        save_archive(record, root / record.volume_id)
        names.append(record.volume_id)
    (root / INDEX).write_text(json.dumps(names, indent=2))
    return root


def load_corpus(root: str | Path) -> list[CorpusRecord]:
    root = Path(root)
    index_path = root / INDEX
    if not index_path.is_file():
        raise ArchiveFormatError(f"no corpus index at {index_path}", field=INDEX)
    names = json.loads(index_path.read_text())
    return [load_archive(root / name) for name in names]
