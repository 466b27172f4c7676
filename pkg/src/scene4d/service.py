"""Engine service: sessions, the command pipeline, persistence, HTTP API.

A session holds a versioned stack of scenes (plus the decoder and encoder
produced by the latest generation) and a command history. ``run_command``
is atomic: everything is computed and written to the session directory
before the in-memory state advances, so any error leaves the session
unchanged.

Generation at desk scale has a documented seam: the guidance engine runs on
the toy latent (mechanism verification, logged to CSV) while the procedural
builder produces the authoritative 4D scene, which is then distilled. Both
outputs land in the command manifest.
"""

from __future__ import annotations

import io
import json
import threading
import time
import uuid
from dataclasses import asdict, dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np
from PIL import Image

from . import guidance as gd
from .builders import CATALOG, ObjectSpec, SceneSpec, build_demo_scene
from .distill import (
    DistillConfig,
    FeatureDecoder,
    SyntheticEncoder,
    desk_distill_cameras,
    train_distillation,
)
from .editor import apply_edit, build_query_set, threshold_search
from .errors import EngineError, SceneBuildError, SessionError, UndoError
from .parser import (
    Direction,
    EditVerb,
    ExecutionPlan,
    LlmPlanBackend,
    Module,
    parse,
    parse_with_backend,
)
from .rasterizer import rasterize, save_pfm, save_png, to_uint8
from .scene import (
    Camera,
    GaussianScene,
    MotionScaffold,
    load_scene,
    orbit_camera,
    save_scene,
    scene_hash,
)
from .trajectory import allocate_boxes, plan_trajectory, to_patch_grid

# object-phrase aliases onto the procedural catalog
KIND_ALIASES = {
    "ball": "ball", "sphere": "ball", "balloon": "ball",
    "cube": "cube", "box": "cube", "block": "cube", "crate": "cube",
    "car": "car-box", "bus": "car-box", "truck": "car-box",
    "boat": "car-box", "train": "car-box", "motorcycle": "car-box",
    "fish": "fish-ellipsoid", "whale": "fish-ellipsoid", "shark": "fish-ellipsoid",
}

_KIND_COLORS = {
    "ball": (0.85, 0.15, 0.1),
    "cube": (0.1, 0.3, 0.85),
    "car-box": (0.75, 0.6, 0.1),
    "fish-ellipsoid": (0.1, 0.65, 0.6),
}

_SPEED_UNITS = {"slow": 0.35, "normal": 0.6, "fast": 0.95}

GROUND_Y = -1.6


@dataclass(frozen=True)
class EngineConfig:
    frames: int = 8
    seed: int = 0
    feature_dim: int = 16
    width: int = 64
    height: int = 64
    focal: float = 70.0
    lam: float = 1.0
    gaussians_per_object: int = 100
    include_ground: bool = True
    distill_steps: int = 800
    eta: float = 50.0
    inner_iters: int = 10
    guidance_frac: float = 0.6
    speed_override: str | None = None
    llm_url: str | None = None
    llm_timeout: float = 10.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EngineConfig":
        return cls(**data)


@dataclass
class SceneVersion:
    scene: GaussianScene
    decoder: FeatureDecoder | None = None
    encoder: SyntheticEncoder | None = None


@dataclass
class CommandResult:
    plan: ExecutionPlan
    version_index: int
    manifest: dict
    scene_hash: str


def _fixed_camera(config: EngineConfig) -> Camera:
    return Camera.look_at((0.0, 0.5, -9.0), (0.0, 0.0, 0.0),
                          width=config.width, height=config.height,
                          focal=config.focal)


def _camera_from_query(config: EngineConfig, cam: str = "fixed",
                       az: float = 0.0, el: float = 0.0,
                       radius: float = 9.0) -> Camera:
    if cam == "fixed":
        return _fixed_camera(config)
    if cam == "orbit":
        return orbit_camera((0.0, 0.0, 0.0), radius, az, el,
                            width=config.width, height=config.height,
                            focal=config.focal)
    raise SessionError(f"unknown camera mode {cam!r} (fixed or orbit)")


class Session:
    """Versioned scene stack plus history, rooted in a directory."""

    def __init__(self, root: Path, config: EngineConfig,
                 session_id: str | None = None):
        self.root = Path(root)
        self.config = config
        self.id = session_id or uuid.uuid4().hex[:12]
        empty = GaussianScene(
            gaussians=(), scaffold=MotionScaffold.identity(1, config.frames),
            background_color=np.zeros(3), feature_dim=config.feature_dim,
        )
        self.versions: list[SceneVersion] = [SceneVersion(scene=empty)]
        self.history: list[dict] = []
        self.lock = threading.Lock()

    # -- state ----------------------------------------------------------------

    @property
    def current(self) -> SceneVersion:
        return self.versions[-1]

    @property
    def scene(self) -> GaussianScene:
        return self.current.scene

    def frame_count(self) -> int:
        return self.scene.frame_count

    # -- persistence ------------------------------------------------------------

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "versions").mkdir(exist_ok=True)
        for i, v in enumerate(self.versions):
            path = self.root / "versions" / f"v{i:03d}.scene.json"
            if not path.exists() or i == len(self.versions) - 1:
                save_scene(v.scene, path)
            if v.decoder is not None:
                with open(self.root / "versions" / f"v{i:03d}.decoder.json",
                          "w", encoding="utf-8") as fh:
                    json.dump(v.decoder.to_dict(), fh)
            if v.encoder is not None:
                with open(self.root / "versions" / f"v{i:03d}.encoder.json",
                          "w", encoding="utf-8") as fh:
                    json.dump(v.encoder.to_dict(), fh)
        doc = {
            "id": self.id,
            "config": self.config.to_dict(),
            "version_count": len(self.versions),
            "history": self.history,
        }
        with open(self.root / "session.json", "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)

    @classmethod
    def load(cls, root) -> "Session":
        root = Path(root)
        doc_path = root / "session.json"
        if not doc_path.exists():
            raise SessionError(f"no session at {root}")
        try:
            with open(doc_path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
            config = EngineConfig.from_dict(doc["config"])
            session_id = doc["id"]
        except (KeyError, TypeError, ValueError) as exc:
            raise SessionError(f"malformed session document at {doc_path}: {exc}")
        session = cls(root, config, session_id=session_id)
        session.versions = []
        for i in range(doc["version_count"]):
            scene = load_scene(root / "versions" / f"v{i:03d}.scene.json")
            dec_path = root / "versions" / f"v{i:03d}.decoder.json"
            enc_path = root / "versions" / f"v{i:03d}.encoder.json"
            decoder = encoder = None
            if dec_path.exists():
                with open(dec_path, "r", encoding="utf-8") as fh:
                    decoder = FeatureDecoder.from_dict(json.load(fh))
            if enc_path.exists():
                with open(enc_path, "r", encoding="utf-8") as fh:
                    encoder = SyntheticEncoder.from_dict(json.load(fh))
            session.versions.append(SceneVersion(scene, decoder, encoder))
        session.history = doc["history"]
        return session


def _plan_command(session: Session, command: str) -> ExecutionPlan:
    if session.config.llm_url:
        backend = LlmPlanBackend(session.config.llm_url,
                                 timeout=session.config.llm_timeout)
        return parse_with_backend(command, backend)
    return parse(command)


def _object_spec_from_plan(session: Session, plan: ExecutionPlan) -> ObjectSpec:
    q = plan.queries
    phrase = q.object_phrase
    kind = KIND_ALIASES.get(phrase, phrase if phrase in CATALOG else None)
    if kind is None:
        known = ", ".join(sorted(KIND_ALIASES))
        raise SceneBuildError(
            f"object {phrase!r} has no catalog mapping; known objects: {known}"
        )
    config = session.config
    cam = _fixed_camera(config)
    ximg, yimg = cam.image_axes_world()
    forward = cam.rotation[2]
    speed = _SPEED_UNITS[q.speed.value]
    direction_vec = {
        Direction.LEFT_TO_RIGHT: ximg,
        Direction.RIGHT_TO_LEFT: -ximg,
        Direction.UP: -yimg,
        Direction.DOWN: yimg,
        Direction.TOWARD_CAMERA: -forward * 0.5,
        Direction.AWAY: forward * 0.5,
    }[q.direction]
    velocity = direction_vec * speed
    travel = velocity * (config.frames - 1)
    base_height = {"ball": 0.6, "cube": 0.0, "car-box": -0.4,
                   "fish-ellipsoid": 0.3}[kind]
    start = np.array([0.0, base_height, 0.0]) - travel / 2.0
    if plan.queries.color:
        from .parser import named_colors
        color = named_colors().get(plan.queries.color)
        if color is None:
            color = _KIND_COLORS[kind]
    else:
        color = _KIND_COLORS[kind]
    return ObjectSpec(
        kind=kind, tag=phrase, color=tuple(color), start=tuple(start),
        velocity=tuple(velocity), count=config.gaussians_per_object,
    )


def _run_gen(session: Session, plan: ExecutionPlan, cmd_index: int) -> dict:
    config = session.config
    if config.speed_override:
        from dataclasses import replace as dc_replace

        from .parser import Speed
        plan = dc_replace(
            plan,
            queries=dc_replace(plan.queries, speed=Speed(config.speed_override)),
        )
    den_cfg = gd.DESK_DENOISER_CONFIG
    t_lat, _, h_lat, w_lat = den_cfg.latent_shape
    traj = plan_trajectory(plan, w_lat, h_lat, t_lat)
    track = allocate_boxes(traj, gd.DESK_BOX_EXTENT, plan.queries.speed,
                           lam=config.lam)
    grid = to_patch_grid(track, den_cfg.patch, (t_lat, h_lat, w_lat))
    denoiser = gd.ToyDenoiser(den_cfg)
    sched = gd.make_schedule(*gd.DESK_SCHEDULE)
    cfg = gd.GuidanceConfig(
        eta=config.eta, inner_iters=config.inner_iters,
        guidance_frac=config.guidance_frac, seed=config.seed,
        record_baseline=True,
    )
    _, log = gd.guided_sample(plan, grid, sched, denoiser, cfg)

    obj = _object_spec_from_plan(session, plan)
    objects: list[ObjectSpec] = [obj]
    if config.include_ground:
        objects.append(
            ObjectSpec(kind="ground-plane", tag="ground",
                       color=(0.25, 0.28, 0.3),
                       start=(0.0, GROUND_Y, 0.0),
                       count=config.gaussians_per_object)
        )
    spec = SceneSpec(
        objects=tuple(objects), frame_count=config.frames, seed=config.seed,
        feature_dim=config.feature_dim, background=(0.05, 0.05, 0.08),
    )
    scene = build_demo_scene(spec)

    labels = sorted({g.label for g in scene.gaussians})
    enc = SyntheticEncoder(labels, dim=8, seed=config.seed)
    cams = desk_distill_cameras(config.width, config.height, config.focal)
    if config.include_ground:
        # the desk pair sees the plane nearly edge-on; add a high view so
        # every plane gaussian receives gradient
        cams = cams + [orbit_camera((0.0, 0.0, 0.0), 9.0, 200.0, 55.0,
                                    width=config.width, height=config.height,
                                    focal=config.focal)]
    result = train_distillation(
        scene, cams, list(range(config.frames)), enc,
        DistillConfig(lr=1.5, steps=config.distill_steps, momentum=0.9,
                      hidden=32, decoder_seed=3),
    )

    gdir = session.root / "guidance"
    ddir = session.root / "distill"
    gdir.mkdir(parents=True, exist_ok=True)
    ddir.mkdir(parents=True, exist_ok=True)
    guidance_csv = gdir / f"cmd_{cmd_index:03d}.guidance.csv"
    baseline_csv = gdir / f"cmd_{cmd_index:03d}.baseline.csv"
    loss_csv = ddir / f"cmd_{cmd_index:03d}.loss.csv"
    log.write_csv(guidance_csv)
    log.write_csv(baseline_csv, baseline=True)
    result.write_loss_csv(loss_csv)

    session.versions.append(
        SceneVersion(scene=result.scene, decoder=result.decoder, encoder=enc)
    )
    return {
        "module": "GEN",
        "bbox_track": track.to_dict(),
        "grid_cells": [list(c) for c in grid.cells],
        "guidance": {
            "csv": str(guidance_csv),
            "baseline_csv": str(baseline_csv),
            "final_mass": log.mean_final_mass(),
            "baseline_final_mass": log.mean_final_mass(baseline=True),
            "runtime_seconds": log.runtime_seconds,
        },
        "distill": {
            "csv": str(loss_csv),
            "final_loss": result.final_loss,
            "steps": session.config.distill_steps,
        },
        "labels": labels,
    }


def _run_edit(session: Session, plan: ExecutionPlan, cmd_index: int) -> dict:
    current = session.current
    if current.decoder is None or current.encoder is None:
        raise SessionError("no generated scene to edit; run a GEN command first")
    q = plan.queries
    queries = build_query_set(q.target_phrase, current.encoder)
    selection = threshold_search(current.scene, current.decoder, queries,
                                 q.target_phrase)
    params = q.new_color if q.verb is EditVerb.RECOLOR else None
    edited = apply_edit(current.scene, selection, q.verb, params)
    session.versions.append(
        SceneVersion(scene=edited, decoder=current.decoder,
                     encoder=current.encoder)
    )
    manifest = selection.to_manifest(q.verb.value, params)
    manifest["module"] = "EDIT"
    return manifest


def run_command(session: Session, command: str) -> CommandResult:
    """Parse and execute one command; atomic against the session state."""
    with session.lock:
        n_versions = len(session.versions)
        n_history = len(session.history)
        cmd_index = n_history
        try:
            plan = _plan_command(session, command)
            if plan.module is Module.GEN:
                manifest = _run_gen(session, plan, cmd_index)
            else:
                manifest = _run_edit(session, plan, cmd_index)
            version_index = len(session.versions) - 1
            entry = {
                "index": cmd_index,
                "command": command,
                "plan": plan.to_dict(),
                "version": version_index,
                "timestamp": time.time(),
                "scene_hash": scene_hash(session.scene),
            }
            session.history.append(entry)
            mdir = session.root / "manifests"
            mdir.mkdir(parents=True, exist_ok=True)
            with open(mdir / f"cmd_{cmd_index:03d}.json", "w",
                      encoding="utf-8") as fh:
                json.dump({"plan": plan.to_dict(), **manifest}, fh, indent=2)
            session.save()
            return CommandResult(
                plan=plan, version_index=version_index,
                manifest=manifest, scene_hash=entry["scene_hash"],
            )
        except EngineError:
            del session.versions[n_versions:]
            del session.history[n_history:]
            raise


def undo(session: Session) -> int:
    """Pop one scene version; the initial version can never be popped."""
    with session.lock:
        if len(session.versions) < 2:
            raise UndoError("already at the initial scene")
        session.versions.pop()
        session.history.append({
            "index": len(session.history),
            "command": "<undo>",
            "version": len(session.versions) - 1,
            "timestamp": time.time(),
            "scene_hash": scene_hash(session.scene),
        })
        session.save()
        return len(session.versions)


def render_frame(session: Session, frame: int, cam: str = "fixed",
                 az: float = 0.0, el: float = 0.0,
                 radius: float = 9.0) -> np.ndarray:
    frame = max(0, min(session.frame_count() - 1, int(frame)))
    camera = _camera_from_query(session.config, cam, az, el, radius)
    return rasterize(session.scene, frame, camera).rgb


def write_renders(session: Session, out_dir, frames=None, cam: str = "fixed",
                  az: float = 0.0, el: float = 0.0, radius: float = 9.0,
                  formats=("png", "pfm")) -> list[str]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    frames = range(session.frame_count()) if frames is None else frames
    for f in frames:
        rgb = render_frame(session, f, cam, az, el, radius)
        stem = out_dir / f"frame_{f:03d}"
        if "png" in formats:
            save_png(rgb, f"{stem}.png")
            written.append(f"{stem}.png")
        if "pfm" in formats:
            save_pfm(rgb, f"{stem}.pfm")
            written.append(f"{stem}.pfm")
    return written


def run_script(script_path, out_dir, config: EngineConfig,
               render_final: bool = True) -> Session:
    """Run newline-delimited commands in a fresh session rooted at out_dir."""
    session = Session(Path(out_dir), config)
    with open(script_path, "r", encoding="utf-8") as fh:
        commands = [ln.strip() for ln in fh if ln.strip()
                    and not ln.strip().startswith("#")]
    for command in commands:
        run_command(session, command)
    if render_final:
        write_renders(session, Path(out_dir) / "renders" / "final")
    return session


# ---------------------------------------------------------------------------
# HTTP API
# ---------------------------------------------------------------------------

class SessionStore:
    def __init__(self, data_dir):
        self.data_dir = Path(data_dir)
        self.sessions: dict[str, Session] = {}
        self.lock = threading.Lock()

    def create(self, config: EngineConfig) -> Session:
        with self.lock:
            session = Session(self.data_dir / "pending", config)
            session.root = self.data_dir / session.id
            self.sessions[session.id] = session
            session.save()
            return session

    def get(self, session_id: str) -> Session:
        with self.lock:
            if session_id in self.sessions:
                return self.sessions[session_id]
        root = self.data_dir / session_id
        if (root / "session.json").exists():
            session = Session.load(root)
            with self.lock:
                self.sessions[session_id] = session
            return session
        raise SessionError(f"unknown session {session_id!r}")


def make_handler(store: SessionStore, default_config: EngineConfig):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _json(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _error(self, status: int, exc: Exception) -> None:
            if isinstance(exc, EngineError):
                self._json(status, exc.to_dict())
            else:
                self._json(status, {"module": "engine-service",
                                    "code": "internal",
                                    "message": str(exc)})

        def _read_body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            if not length:
                return {}
            return json.loads(self.rfile.read(length) or b"{}")

        def do_GET(self):
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            try:
                if url.path == "/healthz":
                    self._json(200, {"status": "ok"})
                    return
                if len(parts) == 3 and parts[0] == "sessions" \
                        and parts[2] == "history":
                    session = store.get(parts[1])
                    self._json(200, {
                        "history": session.history,
                        "versions": len(session.versions),
                        "frames": session.frame_count(),
                    })
                    return
                if len(parts) == 3 and parts[0] == "sessions" \
                        and parts[2] == "frame":
                    session = store.get(parts[1])
                    qs = parse_qs(url.query)

                    def q(name, default, cast=float):
                        return cast(qs[name][0]) if name in qs else default

                    rgb = render_frame(
                        session, int(q("t", 0)), q("cam", "fixed", str),
                        q("az", 0.0), q("el", 0.0), q("r", 9.0),
                    )
                    buf = io.BytesIO()
                    Image.fromarray(to_uint8(rgb)).save(buf, format="PNG")
                    data = buf.getvalue()
                    self.send_response(200)
                    self.send_header("Content-Type", "image/png")
                    self.send_header("Content-Length", str(len(data)))
                    self.send_header("Access-Control-Allow-Origin", "*")
                    self.end_headers()
                    self.wfile.write(data)
                    return
                self._json(404, {"module": "engine-service", "code": "not_found",
                                 "message": f"no route {url.path}"})
            except EngineError as exc:
                self._error(404 if isinstance(exc, SessionError) else 400, exc)
            except Exception as exc:  # pragma: no cover
                self._error(500, exc)

        def do_POST(self):
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            try:
                if parts == ["sessions"]:
                    body = self._read_body()
                    overrides = {k: v for k, v in body.items()
                                 if k in EngineConfig.__dataclass_fields__}
                    config = EngineConfig(**{**default_config.to_dict(),
                                             **overrides})
                    session = store.create(config)
                    self._json(201, {"id": session.id,
                                     "frames": session.frame_count()})
                    return
                if len(parts) == 3 and parts[0] == "sessions" \
                        and parts[2] == "command":
                    session = store.get(parts[1])
                    body = self._read_body()
                    text = body.get("text", "")
                    result = run_command(session, text)
                    self._json(200, {
                        "plan": result.plan.to_dict(),
                        "version": result.version_index,
                        "scene_hash": result.scene_hash,
                        "manifest": _json_safe(result.manifest),
                        "frames": session.frame_count(),
                    })
                    return
                if len(parts) == 3 and parts[0] == "sessions" \
                        and parts[2] == "undo":
                    session = store.get(parts[1])
                    versions = undo(session)
                    self._json(200, {"versions": versions,
                                     "scene_hash": scene_hash(session.scene)})
                    return
                self._json(404, {"module": "engine-service", "code": "not_found",
                                 "message": f"no route {url.path}"})
            except EngineError as exc:
                status = 404 if isinstance(exc, SessionError) \
                    and "unknown session" in str(exc) else 400
                if isinstance(exc, UndoError):
                    status = 409
                self._error(status, exc)
            except Exception as exc:  # pragma: no cover
                self._error(500, exc)

    return Handler


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def make_server(host: str, port: int, data_dir,
                config: EngineConfig = EngineConfig()) -> ThreadingHTTPServer:
    store = SessionStore(data_dir)
    return ThreadingHTTPServer((host, port), make_handler(store, config))
