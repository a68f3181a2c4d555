import hashlib
import json
from pathlib import Path

import pytest

from eraser import RoundLedger
from eraser.errors import ConfigurationError, IntegrityError
from eraser.ledger import LedgerRow
from eraser.pipeline import (
    PipelineConfig,
    StageInterrupted,
    audit_stage_order,
    run_pipeline,
    stage_seed,
)

MICRO = dict(
    rounds=1,
    image_size=24,
    channels=(8, 16, 32),
    initial_size=24,
    curated_size=8,
    eval_size=8,
    human_queue=6,
    auto_queue=8,
    init_steps=30,
    round_steps=12,
    final_steps=8,
    judge_steps=30,
    sample_steps=6,
    distill_steps=10,
    teacher_steps=10,
    distill_k=5,
    batch_size=8,
    learning_rate=1e-3,
    seed=5,
)


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    ws = tmp_path_factory.mktemp("micro-ws")
    cfg = PipelineConfig(workspace=str(ws), **MICRO)
    result = run_pipeline(cfg, mode="replay")
    return cfg, result


def test_ledger_row_structure(micro_run):
    _, result = micro_run
    names = [r.round_name for r in result.ledger.rows]
    assert names == ["initialization", "human-round-1", "auto-round-1", "final"]
    result.ledger.validate()
    for row in result.ledger.rows:
        assert row.success_rate is not None
        assert row.psnr is not None


def test_ledger_telescoping_and_counts(micro_run):
    cfg, result = micro_run
    rows = result.ledger.rows
    assert rows[0].n_selected == cfg.initial_size
    assert rows[0].cumulative_train_size == cfg.initial_size
    running = 0
    for row in rows:
        running += row.n_selected
        assert row.cumulative_train_size == running
    assert rows[1].n_test == cfg.human_queue
    assert rows[2].n_test == cfg.auto_queue
    assert rows[-1].n_selected == cfg.curated_size


def test_artifacts_exist(micro_run):
    cfg, result = micro_run
    ws = Path(cfg.workspace)
    assert (ws / "ledger.json").exists()
    assert (ws / "reports" / "benchmark.json").exists()
    assert Path(result.checkpoints["teacher"]).exists()
    assert Path(result.checkpoints["student"]).exists()
    report = json.loads((ws / "reports" / "benchmark.json").read_text())
    assert {r["method"] for r in report["rows"]} == {"teacher", "student-4s"}


def test_stage_order_audit(micro_run):
    cfg, _ = micro_run
    audit_stage_order(cfg.workspace)


def test_rerun_without_resume_rejected(micro_run):
    cfg, _ = micro_run
    with pytest.raises(ConfigurationError, match="resume"):
        run_pipeline(cfg, mode="replay")


def test_resume_completed_run_is_noop(micro_run):
    cfg, first = micro_run
    again = run_pipeline(cfg, mode="replay", resume=True)
    assert again.ledger.to_json() == first.ledger.to_json()


def test_interrupt_and_resume_identical_ledger(replay_pipeline_interrupted):
    full_bytes, resumed_bytes, full, resumed = replay_pipeline_interrupted
    assert full_bytes == resumed_bytes
    assert resumed.ledger.to_json() == full.ledger.to_json()
    # checkpoint hashes identical too
    for key in ("teacher", "student"):
        ha = hashlib.sha256(Path(full.checkpoints[key]).read_bytes()).hexdigest()
        hb = hashlib.sha256(Path(resumed.checkpoints[key]).read_bytes()).hexdigest()
        assert ha == hb


def test_stage_seed_stable():
    assert stage_seed(5, "forge") == stage_seed(5, "forge")
    assert stage_seed(5, "forge") != stage_seed(6, "forge")
    assert stage_seed(5, "forge") != stage_seed(5, "train")


def test_config_validation():
    with pytest.raises(ConfigurationError):
        PipelineConfig(workspace="w", auto_threshold=1.5).validate()
    with pytest.raises(ConfigurationError):
        PipelineConfig(workspace="w", rounds=-1).validate()
    with pytest.raises(ConfigurationError):
        PipelineConfig(workspace="w", mask_min=0.9, mask_max=0.1).validate()
    with pytest.raises(ConfigurationError):
        PipelineConfig(workspace="w", distill_k=0).validate()


def test_config_yaml_roundtrip(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text("workspace: ws\nrounds: 2\nchannels: [8, 16, 32]\nauto_threshold: 0.9\n")
    cfg = PipelineConfig.from_yaml(p)
    assert cfg.rounds == 2 and cfg.channels == (8, 16, 32)
    bad = tmp_path / "bad.yaml"
    bad.write_text("workspace: ws\nmystery: 1\n")
    with pytest.raises(ConfigurationError, match="mystery"):
        PipelineConfig.from_yaml(bad)


def test_paper_scale_ledger_golden():
    # Table-1 analogue: the published round accounting must satisfy the same
    # telescoping identities the hub enforces
    rows = [
        LedgerRow("initialization", "rord+mulan", 61_565, 61_565, 61_565, 38.6, 28.41),
        LedgerRow("human-round-1", "openimage", 10_000, 4_182, 65_747, 47.8, 28.63),
        LedgerRow("auto-round-1", "openimage", 30_000, 20_634, 86_381, 55.6, 28.60),
        LedgerRow("human-round-2", "openimage", 10_000, 7_008, 93_389, 61.4, 28.70),
        LedgerRow("auto-round-2", "openimage", 80_000, 51_099, 144_488, 67.2, 28.75),
        LedgerRow("human-round-3", "openimage", 10_000, 6_133, 150_621, 71.8, 28.77),
        LedgerRow("auto-round-3", "openimage", 95_204, 49_313, 199_934, 75.4, 28.78),
        LedgerRow("final", "div2k+flicker2k", None, 1_200, 201_134, 76.2, 31.10),
    ]
    ledger = RoundLedger(rows=rows).validate()
    assert ledger.cumulative_for("human-round-1") == 61_565 + 4_182 == 65_747
    assert ledger.total == 199_934 + 1_200 == 201_134
    # a corrupted row is caught and named
    rows[3] = LedgerRow("human-round-2", "openimage", 10_000, 7_008, 93_390, None, None)
    with pytest.raises(IntegrityError, match="human-round-2"):
        RoundLedger(rows=rows).validate()


def test_ledger_json_roundtrip(tmp_path):
    ledger = RoundLedger(rows=[LedgerRow("initialization", "forge", 5, 5, 5, 50.0, 20.0)])
    path = tmp_path / "ledger.json"
    ledger.save(path)
    again = RoundLedger.load(path)
    assert again.to_json() == ledger.to_json()
