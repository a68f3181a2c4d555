"""End-to-end orchestration of the data-growth loop.

initialization -> (human round -> retrain -> automated round -> retrain) x R
-> final quality fine-tune -> distillation -> benchmark.

Every stage is deterministic given the config seed (stage-local RNGs), runs
at most once (atomic completion markers), and appends or annotates ledger
rows through the hub store. Replay mode substitutes the ground-truth oracle
for human annotators; interactive mode waits for a live hub queue to drain.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import yaml

from .checkpoints import load_checkpoint, save_checkpoint
from .datasets import as_test_pairs, load_triplets, save_dataset
from .diffusion import batch_to_images, images_to_batch, masks_to_batch, sample
from .distill import DistillConfig, StudentAdapters, distill, sample_student, save_student
from .errors import ConfigurationError, EraserError
from .hub.store import HubStore
from .judge import JudgeTrainConfig, QualityJudge, Quadruple, enrich_training_set, load_judge, save_judge, train_judge
from .ledger import RoundLedger
from .metrics import composite_over_source, oracle_success, psnr
from .bench import run_benchmark, save_report
from .scenes import Triplet, forge_triplet_set, sample_test_set
from .schedule import ConsistencyScalings, NoiseSchedule
from .train import TrainConfig, run_training
from .unet import RemovalUNet


class StageFailure(EraserError):
    """A pipeline stage raised; the ledger and markers stay intact."""


class StageInterrupted(EraserError):
    """Raised by the fail_after test hook once the named stage completed."""


@dataclass
class PipelineConfig:
    workspace: str
    rounds: int = 3
    seed: int = 0
    image_size: int = 32
    channels: tuple[int, int, int] = (16, 32, 64)
    timesteps: int = 1000
    # data sizes
    initial_size: int = 200
    curated_size: int = 48
    eval_size: int = 64
    human_queue: int = 50
    auto_queue: int = 150
    # sampling rules
    class_cap: int = 500
    mask_min: float = 0.03
    mask_max: float = 0.70
    excluded_classes: tuple[str, ...] = ()
    # thresholds
    auto_threshold: float = 0.9
    negative_threshold: float = 0.35
    tau_mask: float = 20.0
    tau_keep: float = 30.0
    # trainer
    init_steps: int = 700
    round_steps: int = 300
    final_steps: int = 200
    batch_size: int = 16
    learning_rate: float = 5e-5
    restart_each_round: bool = False
    # judge
    judge_steps: int = 300
    judge_lr: float = 2e-3
    judge_rank: int = 4
    enrich_per_strategy: int = 30
    # inference
    sample_steps: int = 25
    # distillation
    distill_k: int = 5
    distill_steps: int = 300
    distill_lr: float = 1e-3
    teacher_steps: int = 50
    student_steps: int = 4

    def validate(self) -> "PipelineConfig":
        if self.rounds < 0:
            raise ConfigurationError("rounds must be >= 0")
        for name in ("auto_threshold", "negative_threshold"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ConfigurationError(f"{name} must lie in (0, 1), got {v}")
        if not (0.0 < self.mask_min < self.mask_max < 1.0):
            raise ConfigurationError("need 0 < mask_min < mask_max < 1")
        if min(self.initial_size, self.eval_size) < 1:
            raise ConfigurationError("initial_size and eval_size must be >= 1")
        if self.rounds > 0 and min(self.human_queue, self.auto_queue) < 1:
            raise ConfigurationError("queue sizes must be >= 1 when rounds > 0")
        if not (1 <= self.distill_k <= self.timesteps):
            raise ConfigurationError("distill_k must lie in [1, timesteps]")
        return self

    @classmethod
    def from_yaml(cls, path: str | Path) -> "PipelineConfig":
        payload = yaml.safe_load(Path(path).read_text()) or {}
        unknown = set(payload) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        for key in ("channels", "excluded_classes"):
            if key in payload and isinstance(payload[key], list):
                payload[key] = tuple(payload[key])
        return cls(**payload).validate()


@dataclass
class PipelineResult:
    workspace: Path
    ledger: RoundLedger
    checkpoints: dict[str, str]
    report_path: str | None


def stage_seed(seed: int, key: str) -> int:
    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


class StageContext:
    """Mutable key-value state threaded through stages, with read tracking."""

    def __init__(self, initial: dict):
        self._data = dict(initial)
        self.reads: set[str] = set()

    def __getitem__(self, key: str):
        self.reads.add(key)
        return self._data[key]

    def get(self, key: str, default=None):
        self.reads.add(key)
        return self._data.get(key, default)

    def update(self, values: dict) -> None:
        self._data.update(values)

    def snapshot(self) -> dict:
        return dict(self._data)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _evaluate_checkpoint(
    ckpt_path: str,
    eval_triplets: list[Triplet],
    sample_steps: int,
    seed: int,
    tau_mask: float,
    tau_keep: float,
    batch_size: int = 32,
) -> tuple[float, float]:
    """Oracle success rate (%) and mean whole-image PSNR on the fixed eval set."""
    net, sched, _ = load_checkpoint(ckpt_path)
    net.eval()
    successes, psnrs = [], []
    for lo in range(0, len(eval_triplets), batch_size):
        chunk = eval_triplets[lo : lo + batch_size]
        src = images_to_batch([t.source for t in chunk])
        msk = masks_to_batch([t.mask for t in chunk])
        out = sample(net, src, msk, steps=sample_steps, sched=sched, seed=seed + lo)
        for trip, edit in zip(chunk, batch_to_images(out)):
            comp = composite_over_source(edit, trip.source, trip.mask)
            successes.append(oracle_success(comp, trip, tau_mask, tau_keep))
            psnrs.append(psnr(comp, trip.removed))
    return 100.0 * float(np.mean(successes)), float(np.mean(psnrs))


def _human_quadruples(store: HubStore, through_round: int) -> list[Quadruple]:
    quads = []
    for r in range(1, through_round + 1):
        for task in store.tasks_for_round(r):
            if task.status == "labeled" and task.label is not None:
                mask = (store.get_blob(task.mask_ref) >= 0.5).astype(np.float32)
                quads.append(
                    Quadruple(
                        edited=store.get_blob(task.edited_ref),
                        source=store.get_blob(task.source_ref),
                        mask=mask,
                        label=int(task.label),
                    )
                )
    return quads


def run_pipeline(
    cfg: PipelineConfig,
    mode: str = "replay",
    resume: bool = False,
    fail_after: str | None = None,
    poll_interval: float = 2.0,
) -> PipelineResult:
    """Run (or resume) the full loop; see the module docstring for the stages.

    In replay mode the oracle labels human queues, so the loop runs
    unattended; in interactive mode each human stage blocks until the hub
    queue for that round is drained by real annotators.
    """
    if mode not in ("replay", "interactive"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    cfg.validate()
    ws = Path(cfg.workspace)
    stages_dir = ws / "stages"
    if stages_dir.exists() and not resume and any(stages_dir.glob("*.json")):
        raise ConfigurationError(f"workspace {ws} already has completed stages; pass resume=True")
    for sub in ("stages", "datasets", "checkpoints", "compiled", "reports"):
        (ws / sub).mkdir(parents=True, exist_ok=True)
    store = HubStore(ws / "hub")

    stages: list[tuple[str, Callable[[StageContext], dict]]] = []

    def stage(key: str):
        def wrap(fn):
            stages.append((key, fn))
            return fn

        return wrap

    sched = NoiseSchedule(T=cfg.timesteps)

    # ---- stage definitions -------------------------------------------------

    @stage("s00-forge")
    def forge_stage(ctx: StageContext) -> dict:
        rng_seed = stage_seed(cfg.seed, "forge")
        initial = forge_triplet_set(
            cfg.initial_size, seed=rng_seed, image_size=cfg.image_size,
            mask_min=cfg.mask_min, mask_max=cfg.mask_max,
        )
        curated = forge_triplet_set(
            cfg.curated_size, seed=stage_seed(cfg.seed, "curated"), image_size=cfg.image_size,
            mask_min=cfg.mask_min, mask_max=cfg.mask_max,
        )
        eval_pairs = sample_test_set(
            n=cfg.eval_size,
            class_cap=cfg.class_cap,
            mask_min=cfg.mask_min,
            mask_max=cfg.mask_max,
            excluded_classes=cfg.excluded_classes,
            seed=stage_seed(cfg.seed, "eval-set"),
            image_size=cfg.image_size,
        )
        eval_triplets = [
            Triplet(source=p.source, mask=p.mask, removed=p.background, class_label=p.class_label)
            for p in eval_pairs
        ]
        initial_manifest = save_dataset(ws / "datasets" / "initial", "train", initial, seed=rng_seed)
        curated_manifest = save_dataset(ws / "datasets" / "curated", "train", curated, seed=rng_seed)
        eval_manifest = save_dataset(ws / "datasets" / "eval", "eval", eval_triplets, seed=rng_seed)
        store.register_initial(initial_manifest)
        return {
            "initial_manifest": str(initial_manifest),
            "curated_manifest": str(curated_manifest),
            "eval_manifest": str(eval_manifest),
        }

    @stage("s01-train-init")
    def train_init(ctx: StageContext) -> dict:
        torch.manual_seed(stage_seed(cfg.seed, "init-net"))
        net = RemovalUNet(channels=tuple(cfg.channels))
        data = load_triplets(ctx["initial_manifest"])
        ckpt = ws / "checkpoints" / "round_00_init.pt"
        run_training(
            data,
            net,
            TrainConfig(
                steps=cfg.init_steps,
                batch_size=cfg.batch_size,
                learning_rate=cfg.learning_rate,
                seed=stage_seed(cfg.seed, "train-init"),
                round_tag="initialization",
                checkpoint_path=str(ckpt),
            ),
            sched,
        )
        return {"checkpoint": str(ckpt)}

    @stage("s02-eval-init")
    def eval_init(ctx: StageContext) -> dict:
        rate, fid = _evaluate_checkpoint(
            ctx["checkpoint"],
            load_triplets(ctx["eval_manifest"]),
            cfg.sample_steps,
            stage_seed(cfg.seed, "eval-protocol"),
            cfg.tau_mask,
            cfg.tau_keep,
        )
        store.set_row_metrics("initialization", rate, fid)
        return {"success_initialization": rate}

    def add_round_stages(r: int) -> None:
        human_round = 2 * r - 1
        auto_round = 2 * r

        @stage(f"r{r}-human-queue")
        def human_queue(ctx: StageContext, r=r, hub_round=human_round) -> dict:
            pairs = sample_test_set(
                n=cfg.human_queue,
                class_cap=cfg.class_cap,
                mask_min=cfg.mask_min,
                mask_max=cfg.mask_max,
                excluded_classes=cfg.excluded_classes,
                seed=stage_seed(cfg.seed, f"human-pairs-{r}"),
                image_size=cfg.image_size,
            )
            store.enqueue_round(
                pairs,
                checkpoint=ctx["checkpoint"],
                round=hub_round,
                steps=cfg.sample_steps,
                seed=stage_seed(cfg.seed, f"human-sample-{r}"),
                kind="human",
            )
            if mode == "replay":
                while True:
                    task = store.next_task(annotator="oracle", round=hub_round)
                    if task is None:
                        break
                    edited = store.get_blob(task.edited_ref)
                    source = store.get_blob(task.source_ref)
                    mask = (store.get_blob(task.mask_ref) >= 0.5).astype(np.float32)
                    background = store.get_blob(task.background_ref)
                    trip = Triplet(source=source, mask=mask, removed=background, class_label=task.class_label)
                    comp = composite_over_source(edited, source, mask)
                    label = int(oracle_success(comp, trip, cfg.tau_mask, cfg.tau_keep))
                    store.submit_label(task.id, label=label, annotator="oracle")
            else:
                while store.pending_count(hub_round) > 0:
                    time.sleep(poll_interval)
            row = store.finalize_human_round(hub_round, round_name=f"human-round-{r}")
            return {f"human_selected_{r}": row.n_selected}

        @stage(f"r{r}-human-retrain")
        def human_retrain(ctx: StageContext, r=r, hub_round=human_round) -> dict:
            manifest = ws / "compiled" / f"through_human_{r}.json"
            store.compile_training_set(hub_round, manifest)
            data = load_triplets(manifest)
            if cfg.restart_each_round:
                torch.manual_seed(stage_seed(cfg.seed, "init-net"))
                net = RemovalUNet(channels=tuple(cfg.channels))
            else:
                net, _, _ = load_checkpoint(ctx["checkpoint"])
            ckpt = ws / "checkpoints" / f"round_{r:02d}_human.pt"
            run_training(
                data,
                net,
                TrainConfig(
                    steps=cfg.round_steps,
                    batch_size=cfg.batch_size,
                    learning_rate=cfg.learning_rate,
                    seed=stage_seed(cfg.seed, f"train-human-{r}"),
                    round_tag=f"human-round-{r}",
                    checkpoint_path=str(ckpt),
                ),
                sched,
            )
            return {"checkpoint": str(ckpt)}

        @stage(f"r{r}-human-eval")
        def human_eval(ctx: StageContext, r=r) -> dict:
            rate, fid = _evaluate_checkpoint(
                ctx["checkpoint"],
                load_triplets(ctx["eval_manifest"]),
                cfg.sample_steps,
                stage_seed(cfg.seed, "eval-protocol"),
                cfg.tau_mask,
                cfg.tau_keep,
            )
            store.set_row_metrics(f"human-round-{r}", rate, fid)
            return {f"success_human_{r}": rate}

        @stage(f"r{r}-judge")
        def judge_stage(ctx: StageContext, r=r, hub_round=human_round) -> dict:
            quads = _human_quadruples(store, hub_round)
            triplets = load_triplets(ctx["initial_manifest"])
            # balance positives against the five negative strategies, like the
            # reference enrichment mix
            counts = {
                s: cfg.enrich_per_strategy
                for s in ("blur", "noise", "downsample", "mixed", "no-change")
            }
            counts["ground-truth-positive"] = 5 * cfg.enrich_per_strategy
            enriched = enrich_training_set(quads, triplets, counts, seed=stage_seed(cfg.seed, f"enrich-{r}"))
            teacher, _, _ = load_checkpoint(ctx["checkpoint"])
            torch.manual_seed(stage_seed(cfg.seed, f"judge-net-{r}"))
            judge = QualityJudge(teacher, rank=cfg.judge_rank)
            train_judge(
                enriched,
                JudgeTrainConfig(
                    steps=cfg.judge_steps,
                    learning_rate=cfg.judge_lr,
                    seed=stage_seed(cfg.seed, f"judge-train-{r}"),
                    selection_threshold=cfg.auto_threshold,
                ),
                judge=judge,
            )
            path = ws / "checkpoints" / f"judge_round_{r:02d}.pt"
            save_judge(path, judge)
            return {"judge": str(path)}

        @stage(f"r{r}-auto-queue")
        def auto_queue(ctx: StageContext, r=r, hub_round=auto_round) -> dict:
            pairs = sample_test_set(
                n=cfg.auto_queue,
                class_cap=cfg.class_cap,
                mask_min=cfg.mask_min,
                mask_max=cfg.mask_max,
                excluded_classes=cfg.excluded_classes,
                seed=stage_seed(cfg.seed, f"auto-pairs-{r}"),
                image_size=cfg.image_size,
            )
            store.enqueue_round(
                pairs,
                checkpoint=ctx["checkpoint"],
                round=hub_round,
                steps=cfg.sample_steps,
                seed=stage_seed(cfg.seed, f"auto-sample-{r}"),
                kind="auto",
            )
            judge = load_judge(ctx["judge"])
            accepted, row = store.run_auto_round(
                judge, round=hub_round, threshold=cfg.auto_threshold, round_name=f"auto-round-{r}"
            )
            return {f"auto_selected_{r}": accepted}

        @stage(f"r{r}-auto-retrain")
        def auto_retrain(ctx: StageContext, r=r, hub_round=auto_round) -> dict:
            manifest = ws / "compiled" / f"through_auto_{r}.json"
            store.compile_training_set(hub_round, manifest)
            data = load_triplets(manifest)
            if cfg.restart_each_round:
                torch.manual_seed(stage_seed(cfg.seed, "init-net"))
                net = RemovalUNet(channels=tuple(cfg.channels))
            else:
                net, _, _ = load_checkpoint(ctx["checkpoint"])
            ckpt = ws / "checkpoints" / f"round_{r:02d}_auto.pt"
            run_training(
                data,
                net,
                TrainConfig(
                    steps=cfg.round_steps,
                    batch_size=cfg.batch_size,
                    learning_rate=cfg.learning_rate,
                    seed=stage_seed(cfg.seed, f"train-auto-{r}"),
                    round_tag=f"auto-round-{r}",
                    checkpoint_path=str(ckpt),
                ),
                sched,
            )
            return {"checkpoint": str(ckpt)}

        @stage(f"r{r}-auto-eval")
        def auto_eval(ctx: StageContext, r=r) -> dict:
            rate, fid = _evaluate_checkpoint(
                ctx["checkpoint"],
                load_triplets(ctx["eval_manifest"]),
                cfg.sample_steps,
                stage_seed(cfg.seed, "eval-protocol"),
                cfg.tau_mask,
                cfg.tau_keep,
            )
            store.set_row_metrics(f"auto-round-{r}", rate, fid)
            return {f"success_auto_{r}": rate}

    for r in range(1, cfg.rounds + 1):
        add_round_stages(r)

    @stage("final-finetune")
    def final_finetune(ctx: StageContext) -> dict:
        data = load_triplets(ctx["curated_manifest"])
        net, _, _ = load_checkpoint(ctx["checkpoint"])
        ckpt = ws / "checkpoints" / "final.pt"
        run_training(
            data,
            net,
            TrainConfig(
                steps=cfg.final_steps,
                batch_size=cfg.batch_size,
                learning_rate=cfg.learning_rate,
                seed=stage_seed(cfg.seed, "train-final"),
                round_tag="final",
                checkpoint_path=str(ckpt),
            ),
            sched,
        )
        store.append_custom_row("final", "curated", n_test=None, n_selected=len(data))
        return {"checkpoint": str(ckpt), "teacher": str(ckpt)}

    @stage("final-eval")
    def final_eval(ctx: StageContext) -> dict:
        rate, fid = _evaluate_checkpoint(
            ctx["checkpoint"],
            load_triplets(ctx["eval_manifest"]),
            cfg.sample_steps,
            stage_seed(cfg.seed, "eval-protocol"),
            cfg.tau_mask,
            cfg.tau_keep,
        )
        store.set_row_metrics("final", rate, fid)
        return {"success_final": rate}

    @stage("distill")
    def distill_stage(ctx: StageContext) -> dict:
        teacher, tsched, _ = load_checkpoint(ctx["teacher"])
        data = load_triplets(ctx["initial_manifest"])
        student, _ = distill(
            teacher,
            data,
            DistillConfig(
                k=cfg.distill_k,
                steps=cfg.distill_steps,
                teacher_steps=cfg.teacher_steps,
                target_inference_steps=cfg.student_steps,
                learning_rate=cfg.distill_lr,
                seed=stage_seed(cfg.seed, "distill"),
            ),
            tsched,
        )
        path = ws / "checkpoints" / "student_adapters.pt"
        save_student(path, student)
        return {"student": str(path)}

    @stage("bench")
    def bench_stage(ctx: StageContext) -> dict:
        teacher, tsched, _ = load_checkpoint(ctx["teacher"])
        teacher.eval()
        student = None
        scal = ConsistencyScalings.for_schedule(tsched)

        from .distill import load_student

        student = load_student(ctx["student"], teacher)

        def teacher_fn(source, mask, seed):
            out = sample(
                teacher, images_to_batch([source]), masks_to_batch([mask]),
                steps=cfg.sample_steps, sched=tsched, seed=seed,
            )
            return batch_to_images(out)[0]

        def student_fn(source, mask, seed):
            out = sample_student(
                student, images_to_batch([source]), masks_to_batch([mask]),
                steps=cfg.student_steps, sched=tsched, scal=scal, seed=seed,
            )
            return batch_to_images(out)[0]

        eval_triplets = load_triplets(ctx["eval_manifest"])
        pairs = as_test_pairs(eval_triplets)
        judge = load_judge(ctx["judge"]) if ctx.get("judge") else None
        report, _ = run_benchmark(
            [("teacher", teacher_fn), ("student-4s", student_fn)],
            pairs,
            judge=judge,
            seeds=[stage_seed(cfg.seed, "bench")],
            tau_mask=cfg.tau_mask,
            tau_keep=cfg.tau_keep,
        )
        out = ws / "reports" / "benchmark.json"
        save_report(report, out)
        return {"report": str(out)}

    # ---- runner -------------------------------------------------------------

    context = StageContext({})
    completed: list[str] = []
    for key, fn in stages:
        marker = stages_dir / f"{key}.json"
        if marker.exists():
            payload = json.loads(marker.read_text())
            context.update(payload["outputs"])
            completed.append(key)
            continue
        context.reads = set()
        try:
            outputs = fn(context)
        except (StageInterrupted, KeyboardInterrupt):
            raise
        except EraserError as exc:
            raise StageFailure(f"stage {key} failed: {exc}") from exc
        except Exception as exc:  # noqa: BLE001 - annotate which stage broke
            raise StageFailure(f"stage {key} failed: {type(exc).__name__}: {exc}") from exc
        marker_payload = {
            "stage": key,
            "index": len(completed),
            "reads": sorted(context.reads),
            "writes": sorted(outputs),
            "outputs": outputs,
        }
        _atomic_write(marker, json.dumps(marker_payload, indent=1, sort_keys=True))
        context.update(outputs)
        ledger = store.ledger()
        _atomic_write(ws / "ledger.json", ledger.to_json())
        completed.append(key)
        if fail_after == key:
            raise StageInterrupted(f"interrupted after stage {key}")

    ledger = store.ledger()
    _atomic_write(ws / "ledger.json", ledger.to_json())
    snapshot = context.snapshot()
    checkpoints = {k: v for k, v in snapshot.items() if k in ("checkpoint", "teacher", "student", "judge")}
    return PipelineResult(
        workspace=ws,
        ledger=ledger,
        checkpoints=checkpoints,
        report_path=snapshot.get("report"),
    )


def audit_stage_order(workspace: str | Path) -> None:
    """Verify no stage read a key produced only by a later stage."""
    stages_dir = Path(workspace) / "stages"
    markers = [json.loads(p.read_text()) for p in stages_dir.glob("*.json")]
    markers.sort(key=lambda m: m["index"])
    produced: set[str] = set()
    for m in markers:
        unknown = set(m["reads"]) - produced
        if unknown:
            raise ConfigurationError(f"stage {m['stage']} read keys not yet produced: {sorted(unknown)}")
        produced |= set(m["writes"])
