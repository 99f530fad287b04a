"""HTTP inference service: volume upload, slice images, chat, segmentation.

The service is a thin stateless wrapper over a loaded model. The only state
is the uploaded-volume store: archives land on disk keyed by content hash
(written to a temp path, then renamed, so a crashed upload never leaves a
half-written volume) and are cached in memory after first load. Model
parameters are read-only after startup, and decoding is greedy, so identical
requests return identical masks.
"""

from __future__ import annotations

import hashlib
import io
import shutil
import tempfile
import zipfile
from pathlib import Path
from typing import Literal

import numpy as np
from fastapi import FastAPI, HTTPException, Request, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from PIL import Image
from pydantic import BaseModel

from .archive import load_archive, save_archive
from .errors import AbsentSegError, ArchiveFormatError, VoxelGrounderError
from .lm import DecodeConfig
from .metrics import dice_coefficient
from .model import VoxelGrounder
from .phantoms import CorpusRecord
from .rle import encode_mask
from .segdec import PromptBox, PromptPoint, PromptSet
from .volume import DEFAULT_WINDOW, normalize_volume


class PointIn(BaseModel):
    z: int
    y: float
    x: float


class BoxIn(BaseModel):
    z: int
    y_min: float
    x_min: float
    y_max: float
    x_max: float


class SegmentationRequest(BaseModel):
    volume_id: str
    instruction: str
    mode: Literal["semantic", "referring", "interactive"]
    points: list[PointIn] | None = None
    box: BoxIn | None = None


class SegmentationResponse(BaseModel):
    text: str
    shape: tuple[int, int, int]
    mask_rle: list[dict]
    dice_vs_gt: float | None = None
    dice_per_class: dict[str, float] | None = None
    fingerprint: str


class ChatRequest(BaseModel):
    volume_id: str
    question: str


class ChatResponse(BaseModel):
    answer: str


class VolumeStore:
    """Disk-backed store of uploaded archives, keyed by content hash."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._cache: dict[str, CorpusRecord] = {}

    def put(self, data: bytes) -> str:
        volume_id = hashlib.sha256(data).hexdigest()[:16]
        target = self.root / volume_id
        if not target.exists():
            with tempfile.TemporaryDirectory(dir=self.root) as tmp:
                staging = Path(tmp) / "archive"
                with zipfile.ZipFile(io.BytesIO(data)) as zf:
                    zf.extractall(staging)
                # tolerate archives zipped inside a single top-level directory
                if not (staging / "manifest.json").exists():
                    inner = [p for p in staging.iterdir() if p.is_dir()]
                    if len(inner) == 1 and (inner[0] / "manifest.json").exists():
                        staging = inner[0]
                load_archive(staging)  # validate before accepting
                shutil.move(str(staging), str(target))
        self._cache.pop(volume_id, None)
        return volume_id

    def add_record(self, record: CorpusRecord) -> str:
        """Register an in-process record (used by the CLI to preload data)."""
        save_archive(record, self.root / record.volume_id)
        self._cache[record.volume_id] = record
        return record.volume_id

    def get(self, volume_id: str) -> CorpusRecord:
        if volume_id in self._cache:
            return self._cache[volume_id]
        path = self.root / volume_id
        if not path.exists():
            raise KeyError(volume_id)
        record = load_archive(path)
        self._cache[volume_id] = record
        return record

    def ids(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if (p / "manifest.json").exists())


def create_app(
    model: VoxelGrounder,
    fingerprint: str,
    store_dir: str | Path,
    decode: DecodeConfig | None = None,
    window: tuple[float, float] = DEFAULT_WINDOW,
) -> FastAPI:
    app = FastAPI(title="voxelgrounder")
    # the browser UI is served as static files from a different origin
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    store = VolumeStore(store_dir)
    decode = decode or DecodeConfig()
    app.state.store = store
    app.state.model = model

    def get_record(volume_id: str) -> CorpusRecord:
        try:
            return store.get(volume_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown volume_id {volume_id!r}")

    @app.exception_handler(VoxelGrounderError)
    async def domain_error(_: Request, exc: VoxelGrounderError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/health")
    def health():
        return {"status": "ok", "checkpoint": fingerprint}

    @app.post("/volumes")
    async def upload_volume(file: UploadFile):
        data = await file.read()
        try:
            volume_id = store.put(data)
        except (zipfile.BadZipFile, ArchiveFormatError) as exc:
            raise HTTPException(status_code=400, detail=f"invalid archive: {exc}")
        record = store.get(volume_id)
        return {
            "volume_id": volume_id,
            "shape": record.volume.shape,
            "classes": sorted(record.masks.class_names.values()),
        }

    @app.get("/volumes")
    def list_volumes():
        return {"volumes": store.ids()}

    @app.get("/volumes/{volume_id}")
    def volume_info(volume_id: str):
        record = get_record(volume_id)
        return {
            "volume_id": volume_id,
            "shape": record.volume.shape,
            "classes": sorted(record.masks.class_names.values()),
        }

    @app.get("/volumes/{volume_id}/slices/{z}")
    def slice_png(volume_id: str, z: int):
        record = get_record(volume_id)
        zdim = record.volume.shape[0]
        if not 0 <= z < zdim:
            raise HTTPException(status_code=404, detail=f"slice {z} outside depth {zdim}")
        normalized = normalize_volume(record.volume, window)
        gray = (normalized.slice(z) * 255.0).round().astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(gray, mode="L").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.post("/segment", response_model=SegmentationResponse)
    def segment(req: SegmentationRequest):
        record = get_record(req.volume_id)
        points = [PromptPoint(z=p.z, y=p.y, x=p.x) for p in (req.points or [])]
        boxes = (
            [PromptBox(z=req.box.z, y_min=req.box.y_min, x_min=req.box.x_min,
                       y_max=req.box.y_max, x_max=req.box.x_max)]
            if req.box is not None
            else []
        )
        if req.mode == "interactive" and not (points or boxes):
            raise HTTPException(
                status_code=422,
                detail=[{"loc": ["body", "points"],
                         "msg": "interactive mode requires at least one point or box"}],
            )
        if points or boxes:
            PromptSet(points=points, boxes=boxes).validate(record.volume.shape)

        try:
            result = model.segment(
                record.volume, req.instruction, points=points, boxes=boxes, decode=decode
            )
        except AbsentSegError as exc:
            raise HTTPException(status_code=409, detail=str(exc))

        dice_per_class = {
            name: dice_coefficient(result.mask.labels, record.masks.binary(label))
            for label, name in sorted(record.masks.class_names.items())
        }
        return SegmentationResponse(
            text=result.text,
            shape=record.volume.shape,
            mask_rle=encode_mask(result.mask.labels),
            dice_vs_gt=max(dice_per_class.values()) if dice_per_class else None,
            dice_per_class=dice_per_class or None,
            fingerprint=fingerprint,
        )

    @app.post("/chat", response_model=ChatResponse)
    def chat(req: ChatRequest):
        record = get_record(req.volume_id)
        out = model.answer(record.volume, req.question, decode)
        return ChatResponse(answer=out.text)

    return app
