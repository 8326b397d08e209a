"""Hyperspectral patch classification toolkit.

Pipeline: native-container I/O (hsio, convert), PCA + patches + splits
(prep), attention-fused hybrid 3D/2D model and inception baselines
(net), Adam training (trainer), OA/AA/kappa evaluation and map
rendering (metrics), ablation sweeps (bench), and a CLI (cli).
"""

__version__ = "0.1.0"

from .bench import (
    SweepPlan,
    SweepResult,
    report,
    run_experiment,
    sweep_fraction,
    sweep_spatial,
)
from .convert import convert_cube, convert_ground_truth
from .errors import (
    AfnetError,
    ConfigError,
    DataError,
    ExtentMismatchError,
    NonFiniteDataError,
    TrainingDivergedError,
    WiringError,
)
from .hsio import (
    ClassLegend,
    DatasetDescriptor,
    GroundTruthMap,
    HyperspectralCube,
    LegendEntry,
    find_dataset,
    load_cube,
    load_ground_truth,
    save_cube,
    save_ground_truth,
    validate_pair,
)
from .metrics import (
    ConfusionMatrix,
    EvaluationReport,
    average_accuracy,
    confusion,
    evaluate,
    format_percent,
    kappa,
    overall_accuracy,
    per_class_recall,
    render_ground_truth,
    render_map,
)
from .net import (
    AfNet,
    AfNetConfig,
    AttentionSpec,
    BlockSpec,
    ConvSpec2D,
    ConvSpec3D,
    InceptionNet2D,
    InceptionNet3D,
    attention_fuse,
    bridge_3d_to_2d,
    build_afnet,
    build_baseline_2d,
    build_baseline_3d,
    build_model,
    config_from_dict,
    config_to_dict,
    conv2d_forward,
    conv3d_forward,
    count_parameters,
    default_config,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .prep import (
    PatchSet,
    ReducedCube,
    SplitAssignment,
    extract_patches,
    pca_reduce,
    stratified_split,
)
from .trainer import TrainConfig, TrainingHistory, predict, train
