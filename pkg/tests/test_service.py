"""HTTP service: uploads, slice rendering, chat, segmentation endpoints."""

import io
import zipfile
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn
from fastapi.testclient import TestClient
from PIL import Image

from voxelgrounder.archive import save_archive
from voxelgrounder.lm import DecodeConfig
from voxelgrounder.phantoms import CorpusRecord, QAItem
from voxelgrounder.rle import decode_mask
from voxelgrounder.service import create_app
from voxelgrounder.volume import MaskVolume, Volume3D

FINGERPRINT = "test-fp-0001"


class _ScriptedHead(nn.Module):
    """Drop-in LM head that emits a fixed id sequence, then repeats the last."""

    def __init__(self, vocab_size: int, script: list[int]):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(vocab_size, 1))
        self.vocab_size = vocab_size
        self.script = script
        self.calls = 0

    def forward(self, x):
        logits = torch.zeros(*x.shape[:-1], self.vocab_size)
        idx = min(self.calls, len(self.script) - 1)
        logits[..., self.script[idx]] = 100.0
        self.calls += 1
        return logits


@pytest.fixture()
def client(tiny_model, tmp_path):
    model, _ = tiny_model
    app = create_app(
        model, FINGERPRINT, tmp_path / "store", decode=DecodeConfig(max_len=4)
    )
    return TestClient(app, raise_server_exceptions=False)


def _archive_zip(record, tmp_path: Path, wrap: str = "") -> bytes:
    src = tmp_path / f"src-{record.volume_id}"
    save_archive(record, src)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for p in sorted(src.rglob("*")):
            if p.is_file():
                zf.write(p, str(Path(wrap) / p.relative_to(src)) if wrap else p.relative_to(src))
    return buf.getvalue()


def _upload(client, data: bytes):
    return client.post("/volumes", files={"file": ("vol.zip", data, "application/zip")})


# --- health and store ------------------------------------------------------


def test_health_reports_checkpoint(client):
    r = client.get("/health")
    assert r.status_code == 200
    assert r.json() == {"status": "ok", "checkpoint": FINGERPRINT}


def test_upload_list_and_idempotency(client, small_corpus, tmp_path):
    record = small_corpus[0]
    data = _archive_zip(record, tmp_path)
    r = _upload(client, data)
    assert r.status_code == 200
    body = r.json()
    assert tuple(body["shape"]) == record.volume.shape
    assert body["classes"] == sorted(record.masks.class_names.values())

    listed = client.get("/volumes").json()["volumes"]
    assert body["volume_id"] in listed

    again = _upload(client, data)
    assert again.json()["volume_id"] == body["volume_id"]  # content-addressed


def test_volume_info_mirrors_upload_response(client, small_corpus, tmp_path):
    record = small_corpus[0]
    uploaded = _upload(client, _archive_zip(record, tmp_path)).json()
    r = client.get(f"/volumes/{uploaded['volume_id']}")
    assert r.status_code == 200
    assert r.json() == uploaded

    missing = client.get("/volumes/doesnotexist")
    assert missing.status_code == 404


def test_cross_origin_browser_clients_are_allowed(client):
    r = client.get("/health", headers={"Origin": "http://localhost:8080"})
    assert r.headers.get("access-control-allow-origin") == "*"


def test_upload_accepts_single_wrapper_directory(client, small_corpus, tmp_path):
    record = small_corpus[0]
    data = _archive_zip(record, tmp_path, wrap="exported-study")
    r = _upload(client, data)
    assert r.status_code == 200
    assert tuple(r.json()["shape"]) == record.volume.shape


def test_upload_rejects_garbage(client):
    r = _upload(client, b"this is not a zip file")
    assert r.status_code == 400
    assert "invalid archive" in r.json()["detail"]


def test_upload_rejects_zip_without_manifest(client, tmp_path):
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr("readme.txt", "nothing here")
    r = _upload(client, buf.getvalue())
    assert r.status_code == 400
    listed = client.get("/volumes").json()["volumes"]
    assert listed == []  # a failed upload leaves no partial entry


# --- slice rendering -------------------------------------------------------


def _flat_record(volume_id="flat-0", shape=(4, 8, 16)):
    z, y, x = shape
    voxels = np.linspace(-1000, 1000, z * y * x, dtype=np.float32).reshape(shape)
    labels = np.zeros(shape, dtype=np.uint8)
    labels[1, 2:4, 3:9] = 1
    return CorpusRecord(
        volume_id=volume_id,
        volume=Volume3D(shape=shape, spacing=(5.0, 1.0, 1.0), voxels=voxels),
        masks=MaskVolume(shape=shape, labels=labels, class_names={1: "lung"}),
        report="a tiny synthetic scan",
        qa_items=[QAItem(question="how many lesions?", answer="one", kind="short")],
        referring_phrases={"lung": ["the bright region"]},
    )


def test_slice_png_dimensions_follow_axes(client):
    record = _flat_record()
    client.app.state.store.add_record(record)
    r = client.get(f"/volumes/{record.volume_id}/slices/2")
    assert r.status_code == 200
    assert r.headers["content-type"] == "image/png"
    img = Image.open(io.BytesIO(r.content))
    # PIL size is (width, height) = (x, y); the volume is deliberately non-square.
    assert img.size == (16, 8)
    assert img.mode == "L"


def test_slice_png_windowing_spans_full_range(client):
    record = _flat_record()
    client.app.state.store.add_record(record)
    first = np.array(Image.open(io.BytesIO(client.get(
        f"/volumes/{record.volume_id}/slices/0").content)))
    last = np.array(Image.open(io.BytesIO(client.get(
        f"/volumes/{record.volume_id}/slices/3").content)))
    assert first.min() == 0  # -1000 HU maps to black
    assert last.max() == 255  # +1000 HU maps to white


def test_slice_out_of_range_is_404(client):
    record = _flat_record()
    client.app.state.store.add_record(record)
    assert client.get(f"/volumes/{record.volume_id}/slices/4").status_code == 404
    assert client.get(f"/volumes/{record.volume_id}/slices/-1").status_code == 404


def test_unknown_volume_is_404(client):
    assert client.get("/volumes/nope/slices/0").status_code == 404
    r = client.post("/chat", json={"volume_id": "nope", "question": "hi"})
    assert r.status_code == 404
    r = client.post(
        "/segment", json={"volume_id": "nope", "instruction": "x", "mode": "semantic"}
    )
    assert r.status_code == 404


# --- chat ------------------------------------------------------------------


def test_chat_returns_text(client, small_corpus):
    record = small_corpus[0]
    client.app.state.store.add_record(record)
    r = client.post("/chat", json={"volume_id": record.volume_id, "question": "what is this?"})
    assert r.status_code == 200
    assert isinstance(r.json()["answer"], str)


def test_chat_volume_shape_mismatch_is_a_client_error(client):
    # The encoder has a fixed input grid; a volume of any other shape is a
    # domain error surfaced as 400, not a server crash.
    record = _flat_record()
    client.app.state.store.add_record(record)
    r = client.post("/chat", json={"volume_id": record.volume_id, "question": "hi"})
    assert r.status_code == 400
    assert "shape" in r.json()["detail"]


# --- segmentation ----------------------------------------------------------


@pytest.fixture()
def seg_client(tiny_model, tmp_path):
    """Client whose model reliably emits the segmentation trigger token."""
    model, _ = tiny_model
    vocab = model.vocab
    original = model.lm.head
    model.lm.head = _ScriptedHead(len(vocab), [vocab.seg_id, vocab.eos_id])
    app = create_app(model, FINGERPRINT, tmp_path / "store", decode=DecodeConfig(max_len=4))
    client = TestClient(app, raise_server_exceptions=False)
    client.app.state._original_head = original
    yield client
    model.lm.head = original


def _seg_request(record, mode="semantic", **extra):
    return {
        "volume_id": record.volume_id,
        "instruction": "segment the lung",
        "mode": mode,
        **extra,
    }


def test_segment_semantic_returns_mask_and_scores(seg_client, small_corpus):
    record = small_corpus[0]
    seg_client.app.state.store.add_record(record)
    r = seg_client.post("/segment", json=_seg_request(record))
    assert r.status_code == 200
    body = r.json()
    assert "[SEG]" in body["text"]
    assert tuple(body["shape"]) == record.volume.shape
    assert body["fingerprint"] == FINGERPRINT
    decoded = decode_mask(body["mask_rle"], tuple(body["shape"]))
    assert decoded.shape == record.volume.shape
    assert set(body["dice_per_class"]) == set(record.masks.class_names.values())
    assert body["dice_vs_gt"] == max(body["dice_per_class"].values())
    assert 0.0 <= body["dice_vs_gt"] <= 1.0


def test_segment_response_mask_matches_rle_round_trip(seg_client, small_corpus):
    record = small_corpus[0]
    seg_client.app.state.store.add_record(record)
    a = seg_client.post("/segment", json=_seg_request(record)).json()
    # reset the scripted head so the second call sees the same script
    seg_client.app.state.model.lm.head.calls = 0
    b = seg_client.post("/segment", json=_seg_request(record)).json()
    assert a["mask_rle"] == b["mask_rle"]  # greedy decoding is reproducible


def test_segment_interactive_requires_geometry(seg_client, small_corpus):
    record = small_corpus[0]
    seg_client.app.state.store.add_record(record)
    r = seg_client.post("/segment", json=_seg_request(record, mode="interactive"))
    assert r.status_code == 422
    detail = r.json()["detail"]
    assert any("point or box" in str(item.get("msg", "")) for item in detail)


def test_segment_interactive_with_point_and_box(seg_client, small_corpus):
    record = small_corpus[0]
    seg_client.app.state.store.add_record(record)
    r = seg_client.post(
        "/segment",
        json=_seg_request(
            record, mode="interactive", points=[{"z": 1, "y": 3.0, "x": 5.0}]
        ),
    )
    assert r.status_code == 200
    seg_client.app.state.model.lm.head.calls = 0
    r2 = seg_client.post(
        "/segment",
        json=_seg_request(
            record,
            mode="interactive",
            box={"z": 1, "y_min": 1.0, "x_min": 2.0, "y_max": 5.0, "x_max": 10.0},
        ),
    )
    assert r2.status_code == 200


def test_segment_rejects_out_of_bounds_geometry(seg_client, small_corpus):
    record = small_corpus[0]
    seg_client.app.state.store.add_record(record)
    r = seg_client.post(
        "/segment",
        json=_seg_request(
            record, mode="interactive", points=[{"z": 99, "y": 3.0, "x": 5.0}]
        ),
    )
    assert r.status_code == 400
    assert "outside volume bounds" in r.json()["detail"]


def test_segment_without_trigger_token_is_409(tiny_model, small_corpus, tmp_path):
    model, _ = tiny_model
    vocab = model.vocab
    word_id = len(vocab) - 1
    original = model.lm.head
    model.lm.head = _ScriptedHead(len(vocab), [word_id, vocab.eos_id])
    try:
        app = create_app(model, FINGERPRINT, tmp_path / "store", decode=DecodeConfig(max_len=4))
        client = TestClient(app, raise_server_exceptions=False)
        record = small_corpus[0]
        client.app.state.store.add_record(record)
        r = client.post("/segment", json=_seg_request(record))
    finally:
        model.lm.head = original
    assert r.status_code == 409


def test_segment_validates_mode(seg_client, small_corpus):
    record = small_corpus[0]
    seg_client.app.state.store.add_record(record)
    r = seg_client.post("/segment", json=_seg_request(record, mode="telepathic"))
    assert r.status_code == 422  # pydantic enum validation
