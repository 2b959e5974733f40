"""HTTP facade for the iterative annotation workflow.

Persistence is a plain on-disk project directory (rasters, an append-only
scribble log, checkpoints, manifests) so everything stays inspectable:

    <root>/<project>/
        project.json         project config, round counter
        images/<img>.raster  uploaded rasters (+ .hdr sidecars)
        scribbles.log        JSONL, one stroke per line, round-tagged, fsynced
        checkpoints/round_K.ckpt(.blob)
        checkpoints/current.txt   atomically replaced pointer

Scribble submissions are durable before the 201 returns. Training runs as a
single background job per project; a finished round atomically swaps the
serving checkpoint by rewriting current.txt, so concurrent readers see either
the old or the new model, never a mix. All endpoints live under /v1.
"""

import io
import json
import os
import threading

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Request, Response
from pydantic import BaseModel

from .data import (DataError, MultiChannelImage, ScribbleSet, Stroke,
                   load_raster, normalize, save_raster)
from .inference import mc_ensemble, predict_full
from .instances import extract_instances
from .losses import MixtureConfig
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train

# channel palette for composites, in channel order
PALETTE = (
    (0, 90, 255),    # blue
    (0, 255, 70),    # green
    (255, 60, 60),   # red
    (255, 0, 255),   # magenta
    (0, 255, 255),   # cyan
    (255, 255, 0),   # yellow
    (255, 255, 255), # white
)

DEFAULT_PROJECT_CONFIG = {
    "depth": 2,
    "base_features": 16,
    "mixture_components": 4,
    "components_per_class": [2, 2],
    "sigma": 0.25,
    "lam": 0.5,
    "epochs_per_round": 50,
    "batch_size": 16,
    "patch_size": 128,
    "patches_per_image": 16,
    "learning_rate": 4e-4,
    "patience": 20,
    "seed": 0,
    "tile": 256,
    "margin": 32,
    "ensemble_passes": 8,
    "threshold": 0.5,
    "min_size": 10,
}


class StrokeIn(BaseModel):
    class_id: int
    pixels: list  # [[row, col], ...]


class ScribbleSubmission(BaseModel):
    strokes: list[StrokeIn]


class TrainRequest(BaseModel):
    epochs: int | None = None


class ProjectCreate(BaseModel):
    id: str | None = None
    config: dict | None = None


class _Project:
    """Disk-backed project state plus in-process job bookkeeping."""

    def __init__(self, root, project_id):
        self.id = project_id
        self.dir = os.path.join(root, project_id)
        self.lock = threading.Lock()
        self.job = None  # active training thread
        self.status = {"state": "idle"}

    # paths ---------------------------------------------------------------
    def path(self, *parts):
        return os.path.join(self.dir, *parts)

    def image_path(self, image_id):
        return self.path("images", f"{image_id}.raster")

    def meta(self):
        with open(self.path("project.json"), encoding="ascii") as fh:
            return json.load(fh)

    def write_meta(self, meta):
        tmp = self.path("project.json.tmp")
        with open(tmp, "w", encoding="ascii") as fh:
            json.dump(meta, fh, indent=1)
        os.replace(tmp, self.path("project.json"))

    # scribbles -----------------------------------------------------------
    def append_strokes(self, image_id, strokes, round_tag):
        """Durable append: each stroke is one JSON line, fsynced before return."""
        with self.lock:
            with open(self.path("scribbles.log"), "a", encoding="ascii") as fh:
                for stroke in strokes:
                    fh.write(json.dumps({
                        "image": image_id,
                        "class_id": stroke.class_id,
                        "pixels": [[int(r), int(c)] for r, c in stroke.pixels],
                        "round": round_tag,
                    }) + "\n")
                fh.flush()
                os.fsync(fh.fileno())

    def strokes_for(self, image_id=None):
        path = self.path("scribbles.log")
        out = []
        if not os.path.exists(path):
            return out
        with open(path, encoding="ascii") as fh:
            for line in fh:
                rec = json.loads(line)
                if image_id is None or rec["image"] == image_id:
                    out.append(rec)
        return out

    def scribble_set(self, image_id, height, width):
        strokes = tuple(
            Stroke(rec["class_id"], tuple((r, c) for r, c in rec["pixels"]))
            for rec in self.strokes_for(image_id)
        )
        return ScribbleSet(height, width, strokes)

    # checkpoints ----------------------------------------------------------
    def current_checkpoint(self):
        pointer = self.path("checkpoints", "current.txt")
        if not os.path.exists(pointer):
            return None
        with open(pointer, encoding="ascii") as fh:
            name = fh.read().strip()
        return self.path("checkpoints", name) if name else None

    def swap_checkpoint(self, name):
        pointer = self.path("checkpoints", "current.txt")
        tmp = pointer + ".tmp"
        with open(tmp, "w", encoding="ascii") as fh:
            fh.write(name)
        os.replace(tmp, pointer)


def _stretch(channel, low=1.0, high=99.0):
    lo, hi = np.percentile(channel, [low, high])
    if hi <= lo:
        return np.zeros_like(channel, dtype=np.float64)
    return np.clip((channel.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)


def _composite_png(values, channel_list):
    from PIL import Image

    h, w = values.shape[1:]
    rgb = np.zeros((h, w, 3), dtype=np.float64)
    for ch in channel_list:
        color = np.asarray(PALETTE[ch % len(PALETTE)], dtype=np.float64) / 255.0
        rgb += _stretch(values[ch])[:, :, None] * color[None, None, :]
    buf = io.BytesIO()
    Image.fromarray((np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def _heat_png(array, scale):
    from PIL import Image

    v = np.clip(np.asarray(array, dtype=np.float64) / scale, 0.0, 1.0)
    rgb = np.stack([v, v * 0.25, 1.0 - v], axis=-1)  # blue -> red heat
    buf = io.BytesIO()
    Image.fromarray((rgb * 255).astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def _raster_response(array):
    arr = np.asarray(array)
    if arr.dtype == np.uint32:
        dtype = "uint32"
        payload = np.ascontiguousarray(arr, dtype="<u4").tobytes()
        channels = 1
    else:
        dtype = "float32"
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        channels = arr.shape[0] if arr.ndim == 3 else 1
    h, w = arr.shape[-2:]
    return Response(content=payload, media_type="application/octet-stream", headers={
        "X-Raster-Width": str(w), "X-Raster-Height": str(h),
        "X-Raster-Channels": str(channels), "X-Raster-Dtype": dtype,
    })


def create_app(root):
    os.makedirs(root, exist_ok=True)
    app = FastAPI(title="scribbleseg annotation service")
    projects = {}
    registry_lock = threading.Lock()

    def get_project(project_id):
        with registry_lock:
            proj = projects.get(project_id)
            if proj is None:
                candidate = _Project(root, project_id)
                if not os.path.exists(candidate.path("project.json")):
                    raise HTTPException(404, f"unknown project {project_id}")
                projects[project_id] = candidate
                proj = candidate
        return proj

    def load_project_image(proj, image_id):
        path = proj.image_path(image_id)
        if not os.path.exists(path):
            raise HTTPException(404, f"unknown image {image_id}")
        return MultiChannelImage(load_raster(path), normalized=False)

    def serving_model(proj):
        ckpt = proj.current_checkpoint()
        if ckpt is None:
            raise HTTPException(409, "no model yet: train a round first")
        return load_checkpoint(ckpt)

    @app.post("/v1/projects", status_code=201)
    def create_project(body: ProjectCreate | None = None):
        body = body or ProjectCreate()
        with registry_lock:
            project_id = body.id or f"proj_{len(os.listdir(root)):03d}"
            proj = _Project(root, project_id)
            if os.path.exists(proj.path("project.json")):
                raise HTTPException(409, f"project {project_id} already exists")
            os.makedirs(proj.path("images"), exist_ok=True)
            os.makedirs(proj.path("checkpoints"), exist_ok=True)
            config = dict(DEFAULT_PROJECT_CONFIG)
            config.update(body.config or {})
            proj.write_meta({"id": project_id, "round": 0, "config": config})
            projects[project_id] = proj
        return {"id": project_id}

    @app.get("/v1/projects/{project_id}")
    def project_info(project_id: str):
        proj = get_project(project_id)
        meta = proj.meta()
        images = sorted(os.path.splitext(f)[0] for f in os.listdir(proj.path("images"))
                        if f.endswith(".raster"))
        return {"id": proj.id, "round": meta["round"], "images": images,
                "has_model": proj.current_checkpoint() is not None}

    @app.post("/v1/projects/{project_id}/images/{image_id}", status_code=201)
    async def upload_image(project_id: str, image_id: str, request: Request):
        proj = get_project(project_id)
        try:
            width = int(request.headers["x-raster-width"])
            height = int(request.headers["x-raster-height"])
            channels = int(request.headers["x-raster-channels"])
        except KeyError as exc:
            raise HTTPException(422, f"missing raster header {exc}")
        payload = await request.body()
        arr = np.frombuffer(payload, dtype="<f4")
        if arr.size != width * height * channels:
            raise HTTPException(422, f"payload has {arr.size} values, "
                                     f"headers imply {width * height * channels}")
        values = arr.reshape(channels, height, width).copy()
        if not np.all(np.isfinite(values)):
            raise HTTPException(422, "raster contains non-finite values")
        with proj.lock:
            save_raster(values, proj.image_path(image_id))
        return {"id": image_id, "height": height, "width": width, "channels": channels}

    @app.get("/v1/projects/{project_id}/images/{image_id}/raster")
    def image_raster(project_id: str, image_id: str):
        proj = get_project(project_id)
        return _raster_response(load_project_image(proj, image_id).values)

    @app.get("/v1/projects/{project_id}/images/{image_id}/composite")
    def composite(project_id: str, image_id: str, channels: str = Query(default="")):
        proj = get_project(project_id)
        image = load_project_image(proj, image_id)
        if channels:
            try:
                channel_list = [int(c) for c in channels.split(",")]
            except ValueError:
                raise HTTPException(422, f"bad channels parameter {channels!r}")
            if any(c < 0 or c >= image.channels for c in channel_list):
                raise HTTPException(422, f"channel out of range for {image.channels}-channel image")
        else:
            channel_list = list(range(image.channels))
        return Response(content=_composite_png(image.values, channel_list), media_type="image/png")

    @app.post("/v1/projects/{project_id}/images/{image_id}/scribbles", status_code=201)
    def submit_scribbles(project_id: str, image_id: str, body: ScribbleSubmission):
        proj = get_project(project_id)
        image = load_project_image(proj, image_id)
        incoming = []
        for stroke in body.strokes:
            try:
                incoming.append(Stroke(stroke.class_id, tuple((int(r), int(c)) for r, c in stroke.pixels)))
            except (DataError, TypeError, ValueError) as exc:
                raise HTTPException(422, f"malformed stroke: {exc}")
        existing = proj.scribble_set(image_id, image.height, image.width)
        try:
            ScribbleSet(image.height, image.width, existing.strokes + tuple(incoming))
        except DataError as exc:
            raise HTTPException(422, str(exc))
        proj.append_strokes(image_id, incoming, round_tag=proj.meta()["round"])
        return {"accepted": len(incoming)}

    @app.get("/v1/projects/{project_id}/images/{image_id}/scribbles")
    def get_scribbles(project_id: str, image_id: str):
        proj = get_project(project_id)
        load_project_image(proj, image_id)
        return {"strokes": proj.strokes_for(image_id)}

    @app.get("/v1/projects/{project_id}/images/{image_id}/entropy")
    def entropy_map(project_id: str, image_id: str, format: str = Query(default="png")):
        proj = get_project(project_id)
        image = load_project_image(proj, image_id)
        model = serving_model(proj)
        cfg = proj.meta()["config"]
        normalized = normalize(image)
        _, entropy = mc_ensemble(model, normalized, passes=cfg["ensemble_passes"],
                                 seed=cfg["seed"], tile=cfg["tile"], margin=cfg["margin"])
        if format == "raster":
            return _raster_response(entropy.astype(np.float32))
        return Response(content=_heat_png(entropy, float(np.log(2.0))), media_type="image/png")

    @app.get("/v1/projects/{project_id}/images/{image_id}/instances")
    def instances_endpoint(project_id: str, image_id: str, format: str = Query(default="json")):
        from skimage.measure import find_contours

        proj = get_project(project_id)
        image = load_project_image(proj, image_id)
        model = serving_model(proj)
        cfg = proj.meta()["config"]
        normalized = normalize(image)
        _, prob = predict_full(model, normalized, tile=cfg["tile"], margin=cfg["margin"])
        labels = extract_instances(prob, threshold=cfg["threshold"], min_size=cfg["min_size"])
        if format == "raster":
            return _raster_response(labels.labels)
        outlines = []
        for inst_id in labels.instance_ids():
            mask = (labels.labels == inst_id).astype(np.float64)
            contours = find_contours(mask, 0.5)
            if contours:
                longest = max(contours, key=len)
                outlines.append({"id": int(inst_id),
                                 "outline": [[float(r), float(c)] for r, c in longest]})
        return {"count": labels.num_instances, "instances": outlines}

    def run_training(proj, epochs):
        try:
            meta = proj.meta()
            cfg = meta["config"]
            image_ids = sorted(os.path.splitext(f)[0] for f in os.listdir(proj.path("images"))
                               if f.endswith(".raster"))
            pairs = []
            for image_id in image_ids:
                image = load_project_image(proj, image_id)
                scribbles = proj.scribble_set(image_id, image.height, image.width)
                if not scribbles.is_empty():
                    pairs.append((normalize(image), scribbles))
            if not pairs:
                raise DataError("no scribbled images in project")
            model_cfg = ModelConfig(
                in_channels=pairs[0][0].channels, depth=cfg["depth"],
                base_features=cfg["base_features"],
                mixture_components=cfg["mixture_components"],
                components_per_class=tuple(cfg["components_per_class"]),
            )
            mixture = MixtureConfig(
                components=cfg["mixture_components"],
                components_per_class=tuple(cfg["components_per_class"]),
                sigma=cfg["sigma"], lam=cfg["lam"],
            )
            train_cfg = TrainConfig(
                model=model_cfg, mixture=mixture, batch_size=cfg["batch_size"],
                epochs=epochs, learning_rate=cfg["learning_rate"],
                patience=cfg["patience"], seed=cfg["seed"],
                patch_size=cfg["patch_size"], patches_per_image=cfg["patches_per_image"],
            )
            warm = None
            current = proj.current_checkpoint()
            if current:
                warm = load_checkpoint(current)

            def progress(epoch, total, val_loss):
                proj.status = {"state": "training",
                               "progress": {"epoch": epoch, "total": total,
                                            "val_loss": val_loss}}

            model, history = train(pairs, train_cfg, initial_model=warm, progress=progress)
            round_num = meta["round"] + 1
            name = f"round_{round_num:03d}.ckpt"
            save_checkpoint(model, proj.path("checkpoints", name),
                            epoch=history.best_epoch, seed=cfg["seed"])
            proj.swap_checkpoint(name)
            meta["round"] = round_num
            proj.write_meta(meta)
            proj.status = {"state": "idle", "round": round_num}
        except Exception as exc:  # surface the failure via /status
            proj.status = {"state": "failed", "reason": str(exc)}
        finally:
            proj.job = None

    @app.post("/v1/projects/{project_id}/train", status_code=202)
    def start_training(project_id: str, body: TrainRequest | None = None):
        proj = get_project(project_id)
        with proj.lock:
            if proj.job is not None and proj.job.is_alive():
                raise HTTPException(409, "a training round is already active")
            epochs = (body.epochs if body and body.epochs else
                      proj.meta()["config"]["epochs_per_round"])
            proj.status = {"state": "training", "progress": {"epoch": 0, "total": epochs}}
            thread = threading.Thread(target=run_training, args=(proj, epochs), daemon=True)
            proj.job = thread
            thread.start()
        return {"job": f"{project_id}-round", "epochs": epochs}

    @app.get("/v1/projects/{project_id}/status")
    def status(project_id: str):
        proj = get_project(project_id)
        payload = dict(proj.status)
        payload["round"] = proj.meta()["round"]
        payload["has_model"] = proj.current_checkpoint() is not None
        return payload

    return app
