"""Sparse-octree neural distance fields: fitting, rendering, evaluation.

The pieces compose in pipeline order: geometry supplies ground-truth
signed distances, octree builds the sparse structure around the surface,
field attaches learnable features and per-level decoders, trainer fits
them, traversal and render turn the result into images, and metrics plus
modelio round out evaluation and storage. The cli module ties the same
calls to subcommands.
"""

from .errors import (
    ConfigError,
    FormatError,
    OctfieldError,
    SamplingError,
    SceneError,
    StructuralError,
    TrainingDiverged,
)
from .geometry import (
    DOMAIN_MAX,
    DOMAIN_MIN,
    AnalyticOracle,
    AnalyticSdf,
    MeshOracle,
    TriangleMesh,
    box,
    difference,
    eval_analytic,
    intersection,
    load_obj,
    make_oracle,
    normalize_mesh,
    parse_scene,
    smooth_union,
    sphere,
    torus,
    union,
)
from .octree import (
    Aabb,
    SparseVoxelOctree,
    build_octree,
    locate,
    morton_decode,
    morton_encode,
    storage_bytes,
    voxel_bounds,
)
from .field import (
    FEATURE_DIM,
    HIDDEN_DIM,
    Decoder,
    EvalCounter,
    NeuralField,
    blend,
    decode,
    empty_space_value,
    new_field,
    predict,
)
from .sampling import SampleSet, build_epoch_set, surface_points
from .trainer import AdamState, EpochStats, TrainConfig, train
from .traversal import RayBundle, RayVoxelPairList, ray_trace_octree
from .render import (
    Camera,
    FrameBuffer,
    FrameReport,
    RenderConfig,
    render,
    select_lod,
    sphere_trace,
    write_ppm,
)
from .metrics import (
    EvalReport,
    bench_frame,
    chamfer_l1,
    evaluate,
    fibonacci_cameras,
    giou,
    image_metrics,
    sample_predicted_surface,
    surface_accuracy,
)
from .modelio import load_model, save_model, serialized_bytes

__version__ = "0.1.0"

__all__ = [
    "Aabb",
    "AdamState",
    "AnalyticOracle",
    "AnalyticSdf",
    "Camera",
    "ConfigError",
    "Decoder",
    "DOMAIN_MAX",
    "DOMAIN_MIN",
    "EpochStats",
    "EvalCounter",
    "EvalReport",
    "FEATURE_DIM",
    "FormatError",
    "FrameBuffer",
    "FrameReport",
    "HIDDEN_DIM",
    "MeshOracle",
    "NeuralField",
    "OctfieldError",
    "RayBundle",
    "RayVoxelPairList",
    "RenderConfig",
    "SampleSet",
    "SamplingError",
    "SceneError",
    "SparseVoxelOctree",
    "StructuralError",
    "TrainConfig",
    "TrainingDiverged",
    "TriangleMesh",
    "bench_frame",
    "blend",
    "box",
    "build_epoch_set",
    "build_octree",
    "chamfer_l1",
    "decode",
    "difference",
    "empty_space_value",
    "eval_analytic",
    "evaluate",
    "fibonacci_cameras",
    "giou",
    "image_metrics",
    "intersection",
    "load_model",
    "load_obj",
    "locate",
    "make_oracle",
    "morton_decode",
    "morton_encode",
    "new_field",
    "normalize_mesh",
    "parse_scene",
    "predict",
    "ray_trace_octree",
    "render",
    "sample_predicted_surface",
    "save_model",
    "select_lod",
    "serialized_bytes",
    "smooth_union",
    "sphere",
    "sphere_trace",
    "storage_bytes",
    "surface_accuracy",
    "surface_points",
    "torus",
    "train",
    "union",
    "voxel_bounds",
    "write_ppm",
]
