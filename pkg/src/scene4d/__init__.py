"""scene4d: language-guided 4D Gaussian scene engine."""

__version__ = "0.1.0"

from .scene import (  # noqa: F401
    Camera,
    Gaussian3D,
    GaussianScene,
    MotionScaffold,
    load_scene,
    orbit_camera,
    save_scene,
    scene_from_json,
    scene_hash,
    scene_to_json,
    warp_gaussian,
    warp_scene,
)
from .builders import ObjectSpec, SceneSpec, build_demo_scene, desk_scene_spec  # noqa: F401
from .parser import ExecutionPlan, parse, parse_with_backend  # noqa: F401
from .trajectory import allocate_boxes, plan_trajectory, to_patch_grid, velocity  # noqa: F401
from .guidance import (  # noqa: F401
    ToyDenoiser,
    attention_maps,
    energy,
    guided_sample,
    make_schedule,
    q_sample,
    reverse_step,
)
from .rasterizer import project, rasterize, rasterize_reference, render_sequence  # noqa: F401
from .distill import (  # noqa: F401
    FeatureDecoder,
    SyntheticEncoder,
    decode_gaussian,
    ground_truth_feature_map,
    train_distillation,
)
from .editor import apply_edit, prompt_probabilities, similarity, threshold_search  # noqa: F401
from .service import EngineConfig, Session, run_command, undo  # noqa: F401
