"""Triplet-supervised diffusion object removal at desk scale.

The package covers the full loop: synthetic triplet generation, supervised
diffusion training, a human-in-the-loop annotation hub with a learned
quality judge for automated data growth, few-step consistency distillation,
and a benchmark harness.
"""

from .scenes import (
    BACKGROUND_KINDS,
    OBJECT_KINDS,
    ClassRecipe,
    SceneSpec,
    TestPair,
    Triplet,
    dilate_mask,
    forge_random_triplet,
    forge_triplet,
    forge_triplet_set,
    sample_test_set,
)
from .schedule import ConsistencyScalings, NoiseSchedule, timestep_grid
from .diffusion import (
    Conditioning,
    DenoiserInput,
    OracleDenoiser,
    add_noise,
    consistency_f,
    ddim_step,
    predict_eps,
    sample,
)
from .unet import RemovalUNet
from .train import TrainConfig, TrainReport, finalize_quality_finetune, train_round
from .judge import (
    ConfusionReport,
    JudgeTrainConfig,
    QualityJudge,
    Quadruple,
    auto_annotate,
    enrich_training_set,
    evaluate_judge,
    score,
    train_judge,
)
from .distill import DistillConfig, StudentAdapters, distill, sample_student
from .metrics import composite_over_source, oracle_success, psnr
from .bench import EvalItem, EvalReport, judge_success_rate, run_benchmark
from .ledger import LedgerRow, RoundLedger
from .estimators import RemovalDiffusion, RemovalJudge
from .pipeline import PipelineConfig, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "BACKGROUND_KINDS",
    "OBJECT_KINDS",
    "ClassRecipe",
    "Conditioning",
    "ConfusionReport",
    "ConsistencyScalings",
    "DenoiserInput",
    "DistillConfig",
    "EvalItem",
    "EvalReport",
    "JudgeTrainConfig",
    "LedgerRow",
    "NoiseSchedule",
    "OracleDenoiser",
    "PipelineConfig",
    "QualityJudge",
    "Quadruple",
    "RemovalDiffusion",
    "RemovalJudge",
    "RemovalUNet",
    "RoundLedger",
    "SceneSpec",
    "StudentAdapters",
    "TestPair",
    "TrainConfig",
    "TrainReport",
    "Triplet",
    "add_noise",
    "auto_annotate",
    "composite_over_source",
    "consistency_f",
    "ddim_step",
    "dilate_mask",
    "distill",
    "enrich_training_set",
    "evaluate_judge",
    "finalize_quality_finetune",
    "forge_random_triplet",
    "forge_triplet",
    "forge_triplet_set",
    "judge_success_rate",
    "oracle_success",
    "predict_eps",
    "psnr",
    "run_benchmark",
    "run_pipeline",
    "sample",
    "sample_student",
    "sample_test_set",
    "score",
    "timestep_grid",
    "train_judge",
    "train_round",
]
