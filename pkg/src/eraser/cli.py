"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .errors import ConfigurationError, EraserError


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main():
    """Triplet-supervised diffusion object removal with a human-in-the-loop data engine."""


@main.command()
@click.option("--out", required=True, type=click.Path(), help="dataset root directory")
@click.option("--split", default="train", show_default=True)
@click.option("--n", default=200, show_default=True, help="number of triplets")
@click.option("--image-size", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--mask-min", default=0.03, show_default=True)
@click.option("--mask-max", default=0.70, show_default=True)
def forge(out, split, n, image_size, seed, mask_min, mask_max):
    """Generate a synthetic triplet dataset."""
    from .datasets import save_dataset
    from .scenes import forge_triplet_set

    triplets = forge_triplet_set(n, seed=seed, image_size=image_size, mask_min=mask_min, mask_max=mask_max)
    manifest = save_dataset(out, split, triplets, seed=seed)
    click.echo(f"wrote {n} triplets under {out} (manifest {manifest})")


@main.command()
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True), help="manifest or dataset root")
@click.option("--init", "init_ckpt", type=click.Path(exists=True), default=None, help="checkpoint to continue from")
@click.option("--steps", default=2000, show_default=True)
@click.option("--batch-size", default=16, show_default=True)
@click.option("--lr", default=5e-5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--round-tag", default="", show_default=True)
@click.option("--channels", default="32,64,128", show_default=True, help="comma-separated widths for a fresh net")
@click.option("--out", "out_ckpt", required=True, type=click.Path(), help="output checkpoint path")
@click.option("--report", "report_path", type=click.Path(), default=None, help="write the TrainReport JSON here")
def train(dataset_path, init_ckpt, steps, batch_size, lr, seed, round_tag, channels, out_ckpt, report_path):
    """Run one supervised training round over a triplet dataset."""
    import torch

    from .checkpoints import load_checkpoint
    from .datasets import load_triplets
    from .schedule import NoiseSchedule
    from .train import TrainConfig, train_round
    from .unet import RemovalUNet

    data = load_triplets(dataset_path)
    if init_ckpt:
        net, sched, _ = load_checkpoint(init_ckpt)
    else:
        torch.manual_seed(seed)
        net = RemovalUNet(channels=tuple(int(c) for c in channels.split(",")))
        sched = NoiseSchedule()
    cfg = TrainConfig(
        steps=steps,
        batch_size=batch_size,
        learning_rate=lr,
        seed=seed,
        round_tag=round_tag,
        checkpoint_path=out_ckpt,
    )
    report = train_round(data, net, cfg, sched)
    if report_path:
        report.save(report_path)
    click.echo(report.to_json() if not report_path else f"report written to {report_path}")


@main.group()
def judge():
    """Train, apply and evaluate the removal-quality discriminator."""


@judge.command("train")
@click.option("--backbone", required=True, type=click.Path(exists=True), help="remover checkpoint for the frozen encoder")
@click.option("--quadruples", required=True, type=click.Path(exists=True), help="quadruple dataset JSON (see judge enrich)")
@click.option("--steps", default=400, show_default=True)
@click.option("--lr", default=2e-3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def judge_train(backbone, quadruples, steps, lr, seed, out_path):
    import torch

    from .checkpoints import load_checkpoint
    from .judge import JudgeTrainConfig, QualityJudge, save_judge, train_judge

    net, _, _ = load_checkpoint(backbone)
    torch.manual_seed(seed)
    j = QualityJudge(net, rank=4)
    data = _load_quadruples(quadruples)
    train_judge(data, JudgeTrainConfig(steps=steps, learning_rate=lr, seed=seed), judge=j)
    save_judge(out_path, j)
    click.echo(f"judge written to {out_path}")


@judge.command("score")
@click.option("--judge", "judge_path", required=True, type=click.Path(exists=True))
@click.option("--edited", required=True, type=click.Path(exists=True))
@click.option("--source", required=True, type=click.Path(exists=True))
@click.option("--mask", required=True, type=click.Path(exists=True))
def judge_score_cmd(judge_path, edited, source, mask):
    from .images import load_png
    from .judge import load_judge, score

    j = load_judge(judge_path)
    value = score(j, load_png(edited), load_png(source), (load_png(mask) >= 0.5).astype(np.float32))
    click.echo(f"{value:.4f}")


@judge.command("eval")
@click.option("--judge", "judge_path", required=True, type=click.Path(exists=True))
@click.option("--quadruples", required=True, type=click.Path(exists=True))
@click.option("--threshold", default=0.5, show_default=True)
def judge_eval(judge_path, quadruples, threshold):
    from .judge import evaluate_judge, load_judge

    j = load_judge(judge_path)
    report = evaluate_judge(j, _load_quadruples(quadruples), threshold=threshold)
    click.echo(report.to_json())


@judge.command("enrich")
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True), help="triplet manifest")
@click.option("--count", default=100, show_default=True, help="samples per strategy")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(), help="directory for the quadruple dataset")
def judge_enrich(dataset_path, count, seed, out_dir):
    """Synthesize degradation / no-change / ground-truth quadruples from triplets."""
    from .datasets import load_triplets
    from .judge import enrich_training_set

    triplets = load_triplets(dataset_path)
    counts = {s: count for s in ("blur", "noise", "downsample", "mixed", "no-change", "ground-truth-positive")}
    quads = enrich_training_set([], triplets, counts, seed=seed)
    _save_quadruples(quads, out_dir)
    click.echo(f"wrote {len(quads)} quadruples under {out_dir}")


@main.command("annotate-serve")
@click.option("--workspace", required=True, type=click.Path(), help="hub directory (sqlite + blobs)")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8008, show_default=True)
@click.option("--ui-dist", type=click.Path(exists=True), default=None, help="static UI bundle to serve at /ui")
def annotate_serve(workspace, host, port, ui_dist):
    """Start the annotation hub HTTP service."""
    import uvicorn

    from .hub import HubStore, create_app

    app = create_app(HubStore(workspace), ui_dist=ui_dist)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command()
@click.option("--workspace", required=True, type=click.Path(exists=True), help="hub directory")
@click.option("--round", "round_id", required=True, type=int)
@click.option("--judge", "judge_path", required=True, type=click.Path(exists=True))
@click.option("--threshold", default=0.9, show_default=True)
def auto(workspace, round_id, judge_path, threshold):
    """Run one automated annotation round over the hub's pending tasks."""
    from .hub import HubStore
    from .judge import load_judge

    store = HubStore(workspace)
    accepted, row = store.run_auto_round(load_judge(judge_path), round=round_id, threshold=threshold)
    click.echo(json.dumps({"accepted": accepted, "row": row.to_dict()}, sort_keys=True))


@main.command()
@click.option("--teacher", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True))
@click.option("--k", default=20, show_default=True, help="scheduler-step skip")
@click.option("--steps", default=500, show_default=True)
@click.option("--teacher-steps", default=50, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def distill(teacher, dataset_path, k, steps, teacher_steps, seed, out_path):
    """Consistency-distill a trained remover into few-step adapters."""
    from .checkpoints import load_checkpoint
    from .datasets import load_triplets
    from .distill import DistillConfig, distill as run_distill, save_student

    net, sched, _ = load_checkpoint(teacher)
    cfg = DistillConfig(k=k, steps=steps, teacher_steps=teacher_steps, seed=seed)
    student, curve = run_distill(net, load_triplets(dataset_path), cfg, sched)
    save_student(out_path, student, cfg)
    click.echo(f"adapters written to {out_path} (final loss {curve[-1][1]:.5f})")


@main.command()
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True), default=None, help="teacher checkpoint")
@click.option("--student", "student_path", type=click.Path(exists=True), default=None, help="adapter checkpoint (needs --ckpt)")
@click.option("--source", required=True, type=click.Path(exists=True))
@click.option("--mask", required=True, type=click.Path(exists=True))
@click.option("--steps", default=None, type=int, help="defaults: 50 teacher, 4 student")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def sample(ckpt_path, student_path, source, mask, steps, seed, out_path):
    """Sample one edited image with the teacher or the distilled student."""
    from .checkpoints import load_checkpoint
    from .diffusion import batch_to_images, images_to_batch, masks_to_batch, sample as run_sample
    from .distill import load_student, sample_student
    from .images import load_png, save_png
    from .schedule import ConsistencyScalings

    if ckpt_path is None:
        _fail(2, "--ckpt is required")
    net, sched, _ = load_checkpoint(ckpt_path)
    src = images_to_batch([load_png(source)])
    msk = masks_to_batch([(load_png(mask) >= 0.5).astype(np.float32)])
    if student_path:
        student = load_student(student_path, net)
        out = sample_student(
            student, src, msk, steps=steps or 4, sched=sched,
            scal=ConsistencyScalings.for_schedule(sched), seed=seed,
        )
    else:
        out = run_sample(net, src, msk, steps=steps or 50, sched=sched, seed=seed)
    save_png(out_path, batch_to_images(out)[0])
    click.echo(f"edited image written to {out_path}")


@main.group()
def bench():
    """Benchmark removal methods."""


@bench.command("run")
@click.option("--methods", default="teacher,student", show_default=True)
@click.option("--manifest", required=True, type=click.Path(exists=True), help="eval dataset manifest")
@click.option("--teacher", "teacher_path", required=True, type=click.Path(exists=True))
@click.option("--student", "student_path", type=click.Path(exists=True), default=None)
@click.option("--judge", "judge_path", type=click.Path(exists=True), default=None)
@click.option("--teacher-steps", default=50, show_default=True)
@click.option("--student-steps", default=4, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def bench_run(methods, manifest, teacher_path, student_path, judge_path, teacher_steps, student_steps, seed, out_path):
    from .bench import run_benchmark, save_report
    from .checkpoints import load_checkpoint
    from .datasets import as_test_pairs, load_triplets
    from .diffusion import batch_to_images, images_to_batch, masks_to_batch, sample as run_sample
    from .distill import load_student, sample_student
    from .judge import load_judge
    from .schedule import ConsistencyScalings

    wanted = [m.strip() for m in methods.split(",") if m.strip()]
    net, sched, _ = load_checkpoint(teacher_path)
    net.eval()
    scal = ConsistencyScalings.for_schedule(sched)
    fns = {}
    if "teacher" in wanted:
        fns["teacher"] = lambda s, m, sd: batch_to_images(
            run_sample(net, images_to_batch([s]), masks_to_batch([m]), steps=teacher_steps, sched=sched, seed=sd)
        )[0]
    if "student" in wanted:
        if not student_path:
            _fail(2, "--student is required for the student method")
        student = load_student(student_path, net)
        fns["student"] = lambda s, m, sd: batch_to_images(
            sample_student(student, images_to_batch([s]), masks_to_batch([m]), steps=student_steps, sched=sched, scal=scal, seed=sd)
        )[0]
    unknown = set(wanted) - set(fns)
    if unknown:
        _fail(2, f"unknown methods: {sorted(unknown)}")
    pairs = as_test_pairs(load_triplets(manifest))
    j = load_judge(judge_path) if judge_path else None
    report, _ = run_benchmark([(k, fns[k]) for k in wanted], pairs, judge=j, seeds=[seed])
    save_report(report, out_path)
    click.echo(report.table())


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["replay", "interactive"]), default="replay", show_default=True)
@click.option("--resume", is_flag=True, default=False)
def pipeline(config_path, mode, resume):
    """Run the full multi-round loop from a YAML config."""
    from .pipeline import PipelineConfig, StageFailure, run_pipeline

    try:
        cfg = PipelineConfig.from_yaml(config_path)
    except (ConfigurationError, TypeError, ValueError) as exc:
        _fail(2, f"invalid config: {exc}")
    try:
        result = run_pipeline(cfg, mode=mode, resume=resume)
    except ConfigurationError as exc:
        _fail(2, str(exc))
    except StageFailure as exc:
        _fail(3, str(exc))
    click.echo(json.dumps({"workspace": str(result.workspace), "checkpoints": result.checkpoints}, sort_keys=True))


def _save_quadruples(quads, out_dir):
    from .images import save_png

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, q in enumerate(quads):
        d = out / f"{i:06d}"
        d.mkdir(exist_ok=True)
        save_png(d / "edited.png", q.edited)
        save_png(d / "source.png", q.source)
        save_png(d / "mask.png", q.mask)
        entries.append({"id": f"{i:06d}", "label": q.label, "provenance": q.provenance})
    (out / "quadruples.json").write_text(json.dumps({"format": "eraser-quadruples-v1", "entries": entries}, indent=1))


def _load_quadruples(path):
    from .images import load_png
    from .judge import Quadruple

    p = Path(path)
    if p.is_dir():
        p = p / "quadruples.json"
    payload = json.loads(p.read_text())
    if payload.get("format") != "eraser-quadruples-v1":
        raise ConfigurationError(f"{p} is not a quadruple dataset")
    base = p.parent
    quads = []
    for e in payload["entries"]:
        d = base / e["id"]
        quads.append(
            Quadruple(
                edited=load_png(d / "edited.png"),
                source=load_png(d / "source.png"),
                mask=(load_png(d / "mask.png") >= 0.5).astype(np.float32),
                label=int(e["label"]),
                provenance=e.get("provenance", "human"),
            )
        )
    return quads


if __name__ == "__main__":
    main()
