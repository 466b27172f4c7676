import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scene4d.errors import ParseError, PlanValidationError
from scene4d.parser import (
    Direction,
    EditQueries,
    EditVerb,
    ExecutionPlan,
    Module,
    PLAN_SCHEMA,
    Speed,
    load_lexicon,
    named_colors,
    parse,
    parse_with_backend,
    plan_from_dict,
)

CORPUS = Path(__file__).parent / "data" / "golden_commands.jsonl"


def corpus_entries():
    with open(CORPUS, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


class TestGoldenCorpus:
    def test_corpus_size(self):
        assert len(corpus_entries()) >= 60

    @pytest.mark.parametrize(
        "entry", corpus_entries(), ids=lambda e: e["command"][:40]
    )
    def test_exact_plan_match(self, entry):
        plan = parse(entry["command"])
        got = plan.to_dict()
        assert got["module"] == entry["module"], entry["command"]
        assert got["queries"] == entry["queries"], entry["command"]

    def test_deterministic(self):
        for entry in corpus_entries()[:10]:
            assert parse(entry["command"]) == parse(entry["command"])


class TestRouting:
    def test_paper_examples(self):
        p = parse("Delete the ball")
        assert p.module is Module.EDIT and p.queries.verb is EditVerb.REMOVE
        assert p.queries.target_phrase == "ball"

        p = parse("Change the ball's color to blue")
        assert p.queries == EditQueries(EditVerb.RECOLOR, "ball", "blue")

        p = parse("The car moves quickly to the right")
        assert p.module is Module.GEN
        assert p.queries.object_phrase == "car"
        assert p.queries.direction is Direction.LEFT_TO_RIGHT
        assert p.queries.speed is Speed.FAST

        p = parse("Extract the boat.")
        assert p.queries == EditQueries(EditVerb.EXTRACT, "boat", None)

    def test_no_edit_verb_routes_gen(self):
        # routing soundness: edit verbs not at the clause head do not route EDIT
        p = parse("The ball changes to the right")
        assert p.module is Module.GEN

    def test_default_direction(self):
        p = parse("The ball moves")
        assert p.queries.direction is Direction.LEFT_TO_RIGHT

    def test_empty_command(self):
        with pytest.raises(ParseError):
            parse("   ")

    def test_missing_target(self):
        with pytest.raises(ParseError, match="target_phrase"):
            parse("Delete the")

    def test_missing_color(self):
        with pytest.raises(ParseError, match="new_color"):
            parse("Make the ball")

    def test_unknown_direction_lists_accepted(self):
        with pytest.raises(ParseError, match="accepted phrases"):
            parse("The car moves to the diagonal")


class TestPlanSchema:
    def test_round_trip(self):
        for entry in corpus_entries():
            plan = parse(entry["command"])
            again = plan_from_dict(plan.to_dict())
            assert again.module == plan.module
            assert again.queries == plan.queries

    def test_invalid_module(self):
        with pytest.raises(PlanValidationError):
            plan_from_dict({"module": "PAINT", "queries": {"verb": "remove",
                                                           "target_phrase": "x"}})

    def test_recolor_requires_color(self):
        with pytest.raises(PlanValidationError):
            plan_from_dict({"module": "EDIT",
                            "queries": {"verb": "recolor", "target_phrase": "x"}})
        with pytest.raises(PlanValidationError):
            ExecutionPlan(module=Module.EDIT,
                          queries=EditQueries(EditVerb.RECOLOR, "ball", None))

    def test_unknown_field_rejected(self):
        with pytest.raises(PlanValidationError):
            plan_from_dict({"module": "GEN",
                            "queries": {"object_phrase": "x", "wings": True}})

    @given(st.text(min_size=1, max_size=60))
    @settings(max_examples=60, deadline=None)
    def test_parse_never_returns_invalid_plan(self, text):
        try:
            plan = parse(text)
        except ParseError:
            return
        plan_from_dict(plan.to_dict())  # must re-validate


class FakeBackend:
    def __init__(self, payload=None, error=None):
        self.payload = payload
        self.error = error
        self.calls = []

    def plan(self, command, schema):
        self.calls.append((command, schema))
        if self.error is not None:
            raise self.error
        return self.payload


class TestBackend:
    def test_valid_backend_plan(self):
        payload = {"module": "EDIT",
                   "queries": {"verb": "remove", "target_phrase": "ball",
                               "new_color": None}}
        backend = FakeBackend(payload=payload)
        plan = parse_with_backend("Delete the ball", backend)
        assert plan.provenance == "backend"
        assert plan.queries == parse("Delete the ball").queries
        assert backend.calls[0][1] is PLAN_SCHEMA

    def test_unreachable_backend_falls_back(self):
        backend = FakeBackend(error=OSError("connection refused"))
        plan = parse_with_backend("Delete the ball", backend)
        assert plan.provenance == "fallback"
        assert plan.queries == EditQueries(EditVerb.REMOVE, "ball", None)

    def test_invalid_module_falls_back(self, caplog):
        backend = FakeBackend(payload={"module": "PAINT", "queries": {}})
        with caplog.at_level("WARNING"):
            plan = parse_with_backend("Delete the ball", backend)
        assert plan.provenance == "fallback"
        assert any("invalid plan" in r.message for r in caplog.records)


class TestBackendWire:
    def test_http_round_trip(self):
        import threading
        from http.server import BaseHTTPRequestHandler, HTTPServer

        from scene4d.parser import LlmPlanBackend

        seen = {}

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers["Content-Length"])
                payload = json.loads(self.rfile.read(length))
                seen.update(payload)
                body = json.dumps({
                    "module": "EDIT",
                    "queries": {"verb": "remove", "target_phrase": "ball",
                                "new_color": None},
                }).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

        server = HTTPServer(("127.0.0.1", 0), Handler)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        try:
            backend = LlmPlanBackend(
                f"http://127.0.0.1:{server.server_address[1]}/plan",
                timeout=5.0,
            )
            plan = parse_with_backend("Delete the ball", backend)
        finally:
            server.shutdown()
        assert plan.provenance == "backend"
        assert plan.queries == EditQueries(EditVerb.REMOVE, "ball", None)
        assert seen["command"] == "Delete the ball"
        assert seen["schema"]["properties"]["module"]["enum"] == ["GEN", "EDIT"]

    def test_default_timeout(self):
        from scene4d.parser import LlmPlanBackend

        assert LlmPlanBackend("http://x").timeout == 10.0


class TestLexicons:
    def test_lexicon_files_parse(self):
        for name in ("directions", "speeds", "colors", "edit_verbs",
                     "motion_verbs"):
            lex = load_lexicon(name)
            assert lex, name

    def test_named_colors_cover_css_basics(self):
        table = named_colors()
        for name in ("white", "black", "red", "blue", "green", "yellow"):
            assert name in table
            assert all(0.0 <= v <= 1.0 for v in table[name])
