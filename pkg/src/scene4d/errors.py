"""Exception hierarchy shared across the engine.

Every error carries a ``module`` (which subsystem raised it) and a short
``code`` so the service layer can surface structured
``{module, code, message}`` payloads without string matching.
"""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all engine errors."""

    module = "engine"
    code = "error"

    def to_dict(self) -> dict:
        return {"module": self.module, "code": self.code, "message": str(self)}


class SceneValidationError(EngineError):
    module = "scene-core"
    code = "invalid_scene"


class FrameRangeError(EngineError):
    module = "scene-core"
    code = "frame_out_of_range"


class BindingError(EngineError):
    module = "scene-core"
    code = "invalid_binding"


class SceneBuildError(EngineError):
    module = "scene-core"
    code = "build_failed"


class ParseError(EngineError):
    module = "command-parser"
    code = "parse_failed"


class PlanValidationError(EngineError):
    """Backend returned a payload that does not satisfy the plan schema."""

    module = "command-parser"
    code = "invalid_plan"


class TrajectoryError(EngineError):
    module = "trajectory-planner"
    code = "invalid_trajectory"


class ScheduleError(EngineError):
    module = "guidance-engine"
    code = "invalid_schedule"


class DegenerateBoxError(EngineError):
    module = "guidance-engine"
    code = "degenerate_box"


class GuidanceAbort(EngineError):
    """Non-finite gradient during guided sampling; diagnostics were dumped."""

    module = "guidance-engine"
    code = "non_finite_gradient"

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


class RenderError(EngineError):
    module = "rasterizer"
    code = "render_failed"


class LabelingError(EngineError):
    module = "distiller"
    code = "unlabeled_gaussian"


class DivergenceError(EngineError):
    module = "distiller"
    code = "training_diverged"


class SimilarityError(EngineError):
    module = "editor"
    code = "undefined_similarity"


class EmptySelectionError(EngineError):
    module = "editor"
    code = "empty_selection"


class EditError(EngineError):
    module = "editor"
    code = "edit_failed"


class UndoError(EngineError):
    module = "engine-service"
    code = "nothing_to_undo"


class SessionError(EngineError):
    module = "engine-service"
    code = "session_error"
