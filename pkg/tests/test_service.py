import json
import threading
import urllib.request

import numpy as np
import pytest

from scene4d.errors import ParseError, SessionError, UndoError
from scene4d.parser import Module
from scene4d.rasterizer import load_pfm
from scene4d.report import write_report
from scene4d.scene import scene_hash
from scene4d.service import (
    EngineConfig,
    Session,
    make_server,
    render_frame,
    run_command,
    run_script,
    undo,
    write_renders,
)

FAST = EngineConfig(distill_steps=120, gaussians_per_object=40, seed=5)


@pytest.fixture
def session(tmp_path):
    return Session(tmp_path / "s", FAST)


class TestRunCommand:
    def test_gen_then_delete(self, session):
        r1 = run_command(session, "The ball moves to the right")
        assert r1.plan.module is Module.GEN
        assert len(session.scene) > 0
        assert (session.root / "guidance").exists()
        assert (session.root / "distill").exists()
        labels = {g.label for g in session.scene.gaussians}
        assert labels == {"ball", "ground"}

    def test_gen_then_delete_removes_every_target_gaussian(self, tmp_path):
        cfg = EngineConfig(distill_steps=400, gaussians_per_object=60, seed=7)
        session = Session(tmp_path / "e2e", cfg)
        run_command(session, "The car moves quickly to the right")
        n_ground = sum(1 for g in session.scene.gaussians if g.label == "ground")
        run_command(session, "Delete the car")
        labels = [g.label for g in session.scene.gaussians]
        assert labels.count("car") == 0
        assert labels.count("ground") == n_ground

    def test_malformed_command_is_atomic(self, session):
        run_command(session, "The ball moves to the right")
        versions = len(session.versions)
        history = len(session.history)
        before = scene_hash(session.scene)
        with pytest.raises(ParseError):
            run_command(session, "Delete the")
        assert len(session.versions) == versions
        assert len(session.history) == history
        assert scene_hash(session.scene) == before

    def test_edit_without_gen_fails(self, session):
        with pytest.raises(SessionError):
            run_command(session, "Delete the ball")

    def test_recolor_idempotent(self, session):
        run_command(session, "The ball moves to the right")
        run_command(session, "Make the ball blue")
        h1 = scene_hash(session.scene)
        run_command(session, "Make the ball blue")
        assert scene_hash(session.scene) == h1

    def test_manifest_written(self, session):
        run_command(session, "The ball moves to the right")
        manifest = json.loads(
            (session.root / "manifests" / "cmd_000.json").read_text()
        )
        assert manifest["plan"]["module"] == "GEN"
        assert "guidance" in manifest
        assert "bbox_track" in manifest


class TestUndo:
    def test_edit_then_undo_restores_hash(self, session):
        run_command(session, "The ball moves to the right")
        before = scene_hash(session.scene)
        run_command(session, "Make the ball lime")
        assert scene_hash(session.scene) != before
        undo(session)
        assert scene_hash(session.scene) == before

    def test_undo_at_base_errors(self, session):
        with pytest.raises(UndoError):
            undo(session)

    def test_two_edits_two_undos(self, session):
        run_command(session, "The ball moves to the right")
        base = scene_hash(session.scene)
        run_command(session, "Make the ball lime")
        run_command(session, "Make the ball purple")
        undo(session)
        undo(session)
        assert scene_hash(session.scene) == base


class TestPersistence:
    def test_save_load_round_trip(self, session):
        run_command(session, "The ball moves to the right")
        run_command(session, "Make the ball blue")
        loaded = Session.load(session.root)
        assert loaded.id == session.id
        assert len(loaded.versions) == len(session.versions)
        assert scene_hash(loaded.scene) == scene_hash(session.scene)
        assert loaded.history == session.history
        assert loaded.current.decoder is not None
        assert loaded.current.encoder is not None

    def test_loaded_session_can_edit(self, session):
        run_command(session, "The ball moves to the right")
        loaded = Session.load(session.root)
        result = run_command(loaded, "Delete the ball")
        assert result.plan.module is Module.EDIT


class TestRenders:
    def test_render_frame_shape(self, session):
        run_command(session, "The ball moves to the right")
        img = render_frame(session, 0)
        assert img.shape == (64, 64, 3)
        orbit = render_frame(session, 2, cam="orbit", az=45.0, el=20.0)
        assert orbit.shape == (64, 64, 3)

    def test_frame_clamped(self, session):
        run_command(session, "The ball moves to the right")
        a = render_frame(session, 999)
        b = render_frame(session, session.frame_count() - 1)
        assert np.array_equal(a, b)

    def test_write_renders(self, session, tmp_path):
        run_command(session, "The ball moves to the right")
        files = write_renders(session, tmp_path / "out", frames=[0, 1])
        assert len(files) == 4  # png + pfm per frame
        img = load_pfm(tmp_path / "out" / "frame_000.pfm")
        assert img.shape == (64, 64, 3)


class TestScript:
    def test_script_runs_and_is_deterministic(self, tmp_path):
        script = tmp_path / "demo.script"
        script.write_text(
            "The ball moves to the right\nMake the ball blue\n"
        )
        cfg = EngineConfig(distill_steps=80, gaussians_per_object=30, seed=9)
        s1 = run_script(script, tmp_path / "a", cfg)
        s2 = run_script(script, tmp_path / "b", cfg)
        assert scene_hash(s1.scene) == scene_hash(s2.scene)
        p1 = (tmp_path / "a" / "renders" / "final" / "frame_000.pfm").read_bytes()
        p2 = (tmp_path / "b" / "renders" / "final" / "frame_000.pfm").read_bytes()
        assert p1 == p2


class TestReport:
    def test_report_writes_figures(self, session):
        run_command(session, "The ball moves to the right")
        run_command(session, "Make the ball blue")
        written = write_report(session.root)
        names = {p.name for p in written}
        assert any(n.endswith(".guidance.png") for n in names)
        assert any(n.endswith(".loss.png") for n in names)
        assert any(n.endswith(".threshold.png") for n in names)
        for p in written:
            assert p.stat().st_size > 0


class HttpClient:
    def __init__(self, port):
        self.base = f"http://127.0.0.1:{port}"

    def request(self, method, path, payload=None):
        data = json.dumps(payload).encode() if payload is not None else None
        req = urllib.request.Request(
            self.base + path, data=data, method=method,
            headers={"Content-Type": "application/json"},
        )
        try:
            with urllib.request.urlopen(req) as resp:
                body = resp.read()
                ctype = resp.headers.get("Content-Type", "")
                return resp.status, body, ctype
        except urllib.error.HTTPError as err:
            return err.code, err.read(), err.headers.get("Content-Type", "")


@pytest.fixture
def server(tmp_path):
    cfg = EngineConfig(distill_steps=60, gaussians_per_object=25, seed=4)
    srv = make_server("127.0.0.1", 0, tmp_path / "data", cfg)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield HttpClient(srv.server_address[1])
    srv.shutdown()


class TestHttpApi:
    def test_healthz(self, server):
        status, body, _ = server.request("GET", "/healthz")
        assert status == 200
        assert json.loads(body) == {"status": "ok"}

    def test_full_session_flow(self, server):
        status, body, _ = server.request("POST", "/sessions", {})
        assert status == 201
        sid = json.loads(body)["id"]

        status, body, _ = server.request(
            "POST", f"/sessions/{sid}/command",
            {"text": "The cube moves to the right"},
        )
        assert status == 200
        payload = json.loads(body)
        assert payload["plan"]["module"] == "GEN"
        hash_after_gen = payload["scene_hash"]

        status, body, ctype = server.request("GET", f"/sessions/{sid}/frame?t=0")
        assert status == 200
        assert ctype == "image/png"
        assert body[:8] == b"\x89PNG\r\n\x1a\n"

        status, body, _ = server.request(
            "POST", f"/sessions/{sid}/command", {"text": "Delete the cube"}
        )
        assert status == 200

        status, body, _ = server.request("GET", f"/sessions/{sid}/history")
        history = json.loads(body)
        assert len(history["history"]) == 2
        assert history["versions"] == 3

        status, body, _ = server.request("POST", f"/sessions/{sid}/undo")
        assert status == 200
        assert json.loads(body)["scene_hash"] == hash_after_gen

    def test_structured_errors(self, server):
        status, body, _ = server.request("GET", "/sessions/nope/history")
        assert status == 404
        err = json.loads(body)
        assert set(err) == {"module", "code", "message"}

        status, body, _ = server.request("POST", "/sessions", {})
        sid = json.loads(body)["id"]
        status, body, _ = server.request(
            "POST", f"/sessions/{sid}/command", {"text": "Delete the"}
        )
        assert status == 400
        err = json.loads(body)
        assert err["module"] == "command-parser"

        status, body, _ = server.request("POST", f"/sessions/{sid}/undo")
        assert status == 409
        assert json.loads(body)["module"] == "engine-service"
