"""Shared fixtures. The expensive artifacts (trained remover, judge,
student, replay pipeline) are session-scoped so the acceptance suite and
the unit tests share one training run each."""

from __future__ import annotations

import time

import numpy as np
import pytest
import torch

from eraser import (
    ConsistencyScalings,
    DistillConfig,
    JudgeTrainConfig,
    NoiseSchedule,
    QualityJudge,
    Quadruple,
    RemovalUNet,
    TrainConfig,
    distill,
    enrich_training_set,
    forge_triplet_set,
    sample_test_set,
    train_judge,
    train_round,
)

ACCEPT_IMAGE_SIZE = 32
ACCEPT_CHANNELS = (32, 64, 128)
ACCEPT_TRAIN_STEPS = 2000
ACCEPT_BATCH = 24
ACCEPT_LR = 1.2e-3
ACCEPT_EMA = 0.995
ACCEPT_TRAIN_SIZE = 500
ACCEPT_EVAL_SIZE = 100
TAU_MASK = 20.0
TAU_KEEP = 30.0


@pytest.fixture(scope="session")
def sched() -> NoiseSchedule:
    return NoiseSchedule()


@pytest.fixture(scope="session")
def scal(sched) -> ConsistencyScalings:
    return ConsistencyScalings.for_schedule(sched)


@pytest.fixture(scope="session")
def toy_triplets():
    return forge_triplet_set(40, seed=21, image_size=32)


@pytest.fixture(scope="session")
def tiny_net() -> RemovalUNet:
    torch.manual_seed(0)
    return RemovalUNet(channels=(8, 16, 32), time_dim=32)


@pytest.fixture(scope="session")
def trained_remover(sched):
    """The learning-signal model: 500 triplets, 2000 steps at 32x32.

    Returns (net, train_report, wall_seconds, training_triplets).
    """
    torch.manual_seed(0)
    net = RemovalUNet(channels=ACCEPT_CHANNELS)
    triplets = forge_triplet_set(ACCEPT_TRAIN_SIZE, seed=11, image_size=ACCEPT_IMAGE_SIZE)
    cfg = TrainConfig(
        steps=ACCEPT_TRAIN_STEPS,
        batch_size=ACCEPT_BATCH,
        learning_rate=ACCEPT_LR,
        ema_decay=ACCEPT_EMA,
        seed=0,
    )
    t0 = time.perf_counter()
    report = train_round(triplets, net, cfg, sched)
    wall = time.perf_counter() - t0
    net.eval()
    return net, report, wall, triplets


@pytest.fixture(scope="session")
def heldout_pairs():
    return sample_test_set(ACCEPT_EVAL_SIZE, class_cap=500, seed=99, image_size=ACCEPT_IMAGE_SIZE)


@pytest.fixture(scope="session")
def judge_data():
    """Class-balanced toy quadruples with scene-disjoint train/heldout pools.

    Disjoint parent scenes matter: with shared scenes a judge can memorize
    scene identity instead of learning the quality signal.
    """
    train_scenes = forge_triplet_set(320, seed=31, image_size=ACCEPT_IMAGE_SIZE)
    held_scenes = forge_triplet_set(80, seed=131, image_size=ACCEPT_IMAGE_SIZE)
    counts_train = {
        "blur": 60, "noise": 60, "downsample": 60, "mixed": 60,
        "no-change": 120, "ground-truth-positive": 360,
    }
    counts_held = {
        "blur": 15, "noise": 15, "downsample": 15, "mixed": 15,
        "no-change": 30, "ground-truth-positive": 90,
    }
    train = enrich_training_set([], train_scenes, counts_train, seed=5)
    heldout = enrich_training_set([], held_scenes, counts_held, seed=6)
    return train, heldout, train_scenes


@pytest.fixture(scope="session")
def trained_judge(judge_data, trained_remover):
    """Judge over the trained remover's frozen encoder, per the architecture."""
    train, _, _ = judge_data
    net, _, _, _ = trained_remover
    torch.manual_seed(3)
    judge = QualityJudge(net, rank=4)
    train_judge(train, JudgeTrainConfig(steps=600, learning_rate=2e-3, seed=3), judge=judge)
    return judge


@pytest.fixture(scope="session")
def distilled_student(trained_remover, sched, scal):
    """Rank-64 student distilled from the trained remover; returns (student, curve, wall)."""
    net, _, _, triplets = trained_remover
    cfg = DistillConfig(k=20, steps=600, teacher_steps=50, batch_size=8, learning_rate=5e-4, seed=0)
    t0 = time.perf_counter()
    student, curve = distill(net, triplets[:200], cfg, sched, scal)
    wall = time.perf_counter() - t0
    return student, curve, wall


@pytest.fixture(scope="session")
def replay_pipeline(tmp_path_factory):
    """The 3-round replay pipeline on a toy corpus (the Table-1 loop in miniature)."""
    from eraser.pipeline import PipelineConfig, run_pipeline

    ws = tmp_path_factory.mktemp("replay-ws")
    cfg = PipelineConfig(
        workspace=str(ws),
        rounds=3,
        seed=7,
        image_size=32,
        channels=(24, 48, 96),
        initial_size=240,
        curated_size=32,
        eval_size=96,
        human_queue=40,
        auto_queue=80,
        init_steps=1000,
        round_steps=350,
        final_steps=200,
        batch_size=16,
        learning_rate=1.2e-3,
        judge_steps=400,
        sample_steps=25,
        distill_steps=300,
        distill_k=5,
    )
    result = run_pipeline(cfg, mode="replay")
    return cfg, result


@pytest.fixture(scope="session")
def replay_pipeline_interrupted(tmp_path_factory):
    """An uninterrupted micro run vs an interrupted-then-resumed twin.

    Returns (full_ledger_bytes, resumed_ledger_bytes, full_result, resumed_result).
    """
    from pathlib import Path

    from eraser.pipeline import PipelineConfig, StageInterrupted, run_pipeline

    base = dict(
        rounds=1,
        image_size=24,
        channels=(8, 16, 32),
        initial_size=16,
        curated_size=6,
        eval_size=6,
        human_queue=4,
        auto_queue=6,
        init_steps=16,
        round_steps=8,
        final_steps=6,
        judge_steps=16,
        sample_steps=4,
        distill_steps=6,
        teacher_steps=10,
        distill_k=5,
        batch_size=8,
        learning_rate=1e-3,
        seed=3,
    )
    ws_a = tmp_path_factory.mktemp("full-run")
    full = run_pipeline(PipelineConfig(workspace=str(ws_a), **base), mode="replay")

    ws_b = tmp_path_factory.mktemp("interrupted-run")
    cfg_b = PipelineConfig(workspace=str(ws_b), **base)
    try:
        run_pipeline(cfg_b, mode="replay", fail_after="r1-human-retrain")
    except StageInterrupted:
        pass
    resumed = run_pipeline(cfg_b, mode="replay", resume=True)
    return (
        (Path(ws_a) / "ledger.json").read_bytes(),
        (Path(ws_b) / "ledger.json").read_bytes(),
        full,
        resumed,
    )
