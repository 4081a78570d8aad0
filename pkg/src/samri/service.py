"""HTTP service: volume upload, slice retrieval, prompt-driven segmentation.

Wire conventions: uploaded bodies are raw NIfTI bytes or the native blob
framing (JSON header line + newline + f32le payload); boxes on the wire are
half-open and converted to the inclusive internal convention; masks travel
as row-major run-length encodings starting with a background run.
"""

from __future__ import annotations

import base64
import time
import uuid
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import tensor_core as tc
from .data_io import Volume, parse_volume_bytes, round_half_away, slicing_axis
from .errors import SamriError
from .model import ImageEmbedding, SamriModel, predict_mask
from .preprocess import normalize_to_u8
from .prompts import BOX_ONLY, BOX_POINT, BoxPrompt, PointPrompt, PromptSet
from .tensor_core import bilinear_resize_array

DEFAULT_ADDR = "127.0.0.1:8471"
DEFAULT_MAX_BODY = 64 * 1024 * 1024
DEFAULT_CACHE_SLICES = 256


# ----------------------------------------------------------------- mask RLE

@dataclass(frozen=True)
class MaskRle:
    dims: tuple[int, int]  # (h, w)
    runs: tuple[int, ...]  # alternating background/foreground, background first

    def __post_init__(self):
        if sum(self.runs) != self.dims[0] * self.dims[1]:
            raise ValueError(f"runs sum {sum(self.runs)} != {self.dims[0] * self.dims[1]}")


def rle_encode(mask: np.ndarray) -> MaskRle:
    mask = np.asarray(mask, dtype=bool)
    flat = mask.ravel()
    if flat.size == 0:
        return MaskRle(mask.shape, ())
    change = np.nonzero(flat[1:] != flat[:-1])[0] + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [flat.size]])
    lengths = [int(v) for v in ends - starts]
    # a zero-length leading run keeps the background-first convention
    runs = lengths if not flat[0] else [0] + lengths
    return MaskRle(mask.shape, tuple(runs))


def rle_decode(rle: MaskRle) -> np.ndarray:
    total = rle.dims[0] * rle.dims[1]
    out = np.zeros(total, dtype=bool)
    pos = 0
    fg = False
    for run in rle.runs:
        if fg:
            out[pos : pos + run] = True
        pos += run
        fg = not fg
    if pos != total:
        raise ValueError("runs do not cover the mask")
    return out.reshape(rle.dims)


# ------------------------------------------------------------ session state

class SessionVolume:
    def __init__(self, volume: Volume):
        self.volume = volume
        self.axis = slicing_axis(volume.dims)
        self.slice_count = volume.dims[self.axis]
        self.embeddings: OrderedDict[tuple[str, int], ImageEmbedding] = OrderedDict()
        self.encode_counts: dict[int, int] = {}

    def slice_image(self, index: int) -> np.ndarray:
        return np.ascontiguousarray(self.volume.voxels.take(index, axis=self.axis))


def _resize_to_model(gray_u8: np.ndarray, img_size: int) -> np.ndarray:
    """Bilinear-resample a grayscale u8 slice to the model's square input."""
    if gray_u8.shape == (img_size, img_size):
        return np.repeat(gray_u8[:, :, None], 3, axis=2)
    resized = bilinear_resize_array(gray_u8.astype(np.float64), (img_size, img_size))
    u8 = np.clip(round_half_away(resized), 0, 255).astype(np.uint8)
    return np.repeat(u8[:, :, None], 3, axis=2)


def _map_coord(value: int, src: int, dst: int) -> int:
    return min(dst - 1, max(0, int(np.floor((value + 0.5) * dst / src))))


# ------------------------------------------------------------------- app

def create_app(checkpoints: dict[str, str | Path] | None = None,
               models: dict[str, SamriModel] | None = None,
               max_body: int = DEFAULT_MAX_BODY,
               cache_slices: int = DEFAULT_CACHE_SLICES,
               debug: bool = False) -> FastAPI:
    app = FastAPI(title="samri", docs_url=None, redoc_url=None)
    app.state.models = dict(models or {})
    app.state.load_errors = {}
    app.state.volumes = {}
    app.state.max_body = max_body
    app.state.cache_slices = cache_slices
    app.state.debug = debug
    for ckpt_id, path in (checkpoints or {}).items():
        try:
            model, _ = SamriModel.load_checkpoint(path)
            app.state.models[ckpt_id] = model
        except Exception as exc:  # surfaced via /v1/health as 503
            app.state.load_errors[ckpt_id] = f"{type(exc).__name__}: {exc}"

    def error(status: int, code: str, detail: str) -> JSONResponse:
        return JSONResponse({"error": code, "detail": detail}, status_code=status)

    @app.get("/v1/health")
    def health():
        if app.state.load_errors or not app.state.models:
            return JSONResponse(
                {"status": "error", "load_errors": app.state.load_errors},
                status_code=503)
        body = {"status": "ok", "checkpoint_ids": sorted(app.state.models)}
        if app.state.debug:
            body["debug"] = {
                "encoder_invocations": {
                    vid: dict(sorted(sv.encode_counts.items()))
                    for vid, sv in app.state.volumes.items()},
            }
        return body

    @app.post("/v1/volumes")
    async def upload_volume(request: Request):
        body = await request.body()
        if len(body) > app.state.max_body:
            return error(413, "BodyTooLarge",
                         f"body of {len(body)} bytes exceeds {app.state.max_body}")
        try:
            volume = parse_volume_bytes(body)
        except SamriError as exc:
            return error(400, type(exc).__name__, str(exc))
        volume_id = str(uuid.uuid4())
        session = SessionVolume(volume)
        app.state.volumes[volume_id] = session
        return {"volume_id": volume_id, "dims": list(volume.dims),
                "slice_axis": session.axis, "slice_count": session.slice_count}

    @app.get("/v1/volumes/{volume_id}/slices/{index}")
    def get_slice(volume_id: str, index: int):
        session = app.state.volumes.get(volume_id)
        if session is None:
            return error(404, "UnknownVolume", volume_id)
        if not 0 <= index < session.slice_count:
            return error(404, "UnknownSlice",
                         f"slice {index} outside 0..{session.slice_count - 1}")
        gray = normalize_to_u8(session.slice_image(index))[:, :, 0]
        h, w = gray.shape
        return {"width": w, "height": h,
                "pixels_b64": base64.b64encode(gray.tobytes()).decode("ascii")}

    @app.post("/v1/segment")
    async def segment(request: Request):
        t_start = time.perf_counter()
        payload = await request.json()
        session = app.state.volumes.get(payload.get("volume_id"))
        if session is None:
            return error(404, "UnknownVolume", str(payload.get("volume_id")))
        ckpt_id = payload.get("checkpoint_id")
        if ckpt_id is None and len(app.state.models) == 1:
            ckpt_id = next(iter(app.state.models))
        model = app.state.models.get(ckpt_id)
        if model is None:
            return error(404, "UnknownCheckpoint", str(ckpt_id))
        index = payload.get("slice", -1)
        if not isinstance(index, int) or not 0 <= index < session.slice_count:
            return error(404, "UnknownSlice", str(index))
        gray = normalize_to_u8(session.slice_image(index))[:, :, 0]
        h, w = gray.shape

        box = payload.get("box")
        if (not isinstance(box, (list, tuple))) or len(box) != 4:
            return error(422, "BadBox", f"box must be [x0, y0, x1, y1], got {box!r}")
        x0, y0, x1, y1 = (int(v) for v in box)
        # half-open wire convention -> inclusive internal convention
        x_max, y_max = x1 - 1, y1 - 1
        if not (0 <= x0 <= x_max < w and 0 <= y0 <= y_max < h):
            return error(422, "BoxOutOfBounds",
                         f"box {box} (half-open) invalid for {w}x{h}")
        points = payload.get("points") or []
        for p in points:
            if not (isinstance(p, dict) and 0 <= int(p.get("x", -1)) < w
                    and 0 <= int(p.get("y", -1)) < h
                    and p.get("label") in ("foreground", "background")):
                return error(422, "BadPoint", f"point {p!r} invalid for {w}x{h}")

        img_size = model.config.img_size
        cache_key = (ckpt_id, index)
        cache_hit = cache_key in session.embeddings
        if cache_hit:
            session.embeddings.move_to_end(cache_key)
            embedding = session.embeddings[cache_key]
        else:
            image = _resize_to_model(gray, img_size)
            embedding = model.encode_image(image, key=f"{payload['volume_id']}/{index}")
            session.encode_counts[index] = session.encode_counts.get(index, 0) + 1
            session.embeddings[cache_key] = embedding
            while len(session.embeddings) > app.state.cache_slices:
                session.embeddings.popitem(last=False)

        model_box = BoxPrompt(_map_coord(x0, w, img_size), _map_coord(y0, h, img_size),
                              _map_coord(x_max, w, img_size), _map_coord(y_max, h, img_size))
        model_points = tuple(
            PointPrompt(_map_coord(int(p["x"]), w, img_size),
                        _map_coord(int(p["y"]), h, img_size), p["label"])
            for p in points)
        regime = BOX_POINT if model_points else BOX_ONLY
        prompt_set = PromptSet(model_box, model_points, regime)
        with tc.no_grad():
            logits = model.decode(embedding, prompt_set)
        lowres = logits.lowres.data
        full = bilinear_resize_array(lowres, (h, w))
        mask = predict_mask(full)
        rle = rle_encode(mask)
        return {
            "mask": {"dims": [h, w], "runs": list(rle.runs)},
            "lowres_logit_stats": {"min": float(lowres.min()), "max": float(lowres.max())},
            "cache_hit": cache_hit,
            "latency_ms": 1000.0 * (time.perf_counter() - t_start),
        }

    return app


def serve(checkpoints: dict[str, str | Path], addr: str = DEFAULT_ADDR,
          debug: bool = False) -> None:
    import uvicorn

    host, port = addr.rsplit(":", 1)
    app = create_app(checkpoints, debug=debug)
    uvicorn.run(app, host=host, port=int(port), log_level="warning")
