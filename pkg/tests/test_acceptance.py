"""Acceptance suite: one test per exit criterion, each printing a PASS line
with its measured quantities. Tolerances are pinned here, not configurable.
"""

import hashlib
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from eraser import (
    Conditioning,
    ConfusionReport,
    NoiseSchedule,
    OracleDenoiser,
    QualityJudge,
    RemovalUNet,
    StudentAdapters,
    add_noise,
    auto_annotate,
    consistency_f,
    ddim_step,
    evaluate_judge,
    forge_triplet_set,
    sample,
    sample_student,
)
from eraser.diffusion import batch_to_images, images_to_batch, masks_to_batch
from eraser.distill import eq4_loss
from eraser.judge import eq2_loss, score as judge_score
from eraser.metrics import composite_over_source, oracle_success, psnr
from eraser.schedule import ConsistencyScalings
from eraser.train import TripletBatchTensors, eq1_loss

from conftest import ACCEPT_EVAL_SIZE, ACCEPT_TRAIN_SIZE, ACCEPT_TRAIN_STEPS, TAU_KEEP, TAU_MASK


def _report(name: str, ok: bool, detail: str) -> None:
    print(f"\n[ACCEPTANCE] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


# --------------------------------------------------------------------------
# Criterion 1: scheduler / sampler suite, < 10 s
# --------------------------------------------------------------------------


def test_acceptance_scheduler_sampler_suite():
    t0 = time.perf_counter()
    sched = NoiseSchedule()
    scal = ConsistencyScalings.for_schedule(sched)

    vp_residual = float(np.abs(sched.alpha**2 + sched.sigma**2 - 1.0).max())

    gen = torch.Generator().manual_seed(0)
    x_e = torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    eps = torch.randn(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    oracle = OracleDenoiser(eps)
    src = torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    msk = torch.zeros(2, 1, 16, 16, dtype=torch.float64)
    msk[:, :, 4:9, 4:9] = 1.0
    cond = Conditioning.from_source(src, msk)

    max_rel = 0.0
    for t, t_prev in ((1000, 980), (1000, 500), (700, 123), (321, 0)):
        x_t = add_noise(x_e, eps, t, sched)
        stepped = ddim_step(oracle, x_t, cond, t, t_prev, sched)
        target = add_noise(x_e, eps, t_prev, sched)
        max_rel = max(max_rel, float((stepped - target).abs().max() / target.abs().max()))

    x_probe = torch.randn(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    identity_exact = torch.equal(consistency_f(oracle, x_probe, cond, 0, sched, scal), x_probe)

    elapsed = time.perf_counter() - t0
    ok = vp_residual < 1e-6 and max_rel <= 1e-6 and identity_exact and elapsed < 10.0
    _report(
        "scheduler/sampler suite",
        ok,
        f"vp residual {vp_residual:.2e}, ddim rel err {max_rel:.2e}, "
        f"t=0 identity {identity_exact}, {elapsed:.2f}s < 10s",
    )


# --------------------------------------------------------------------------
# Criterion 2: gradient checks for the three losses, < 2 min
# --------------------------------------------------------------------------


def _finite_difference_check(loss_fn, params: list[torch.Tensor], n_coords: int, seed: int) -> tuple[int, float]:
    """Central finite differences on random coordinates vs autograd.

    Coordinates whose gradient is numerically flat (below 1e-7) carry no
    signal at fd precision and do not count toward the quota. Returns
    (counted coordinate count, worst relative error among them).
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    counted = 0
    attempts = 0
    flat = [(p, g) for p, g in zip(params, grads) if g is not None and p.numel() > 0]
    while counted < n_coords and attempts < 40 * n_coords:
        attempts += 1
        p, g = flat[rng.integers(len(flat))]
        idx = tuple(rng.integers(0, s) for s in p.shape)
        analytic = float(g[idx])
        if abs(analytic) < 1e-7:
            continue
        h = 1e-5 * max(1.0, abs(float(p[idx])))
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + h
            up = float(loss_fn())
            p[idx] = orig - h
            down = float(loss_fn())
            p[idx] = orig
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(fd - analytic) / max(abs(fd), abs(analytic)))
        counted += 1
    return counted, worst


def test_acceptance_gradient_checks(sched):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    scal = ConsistencyScalings.for_schedule(sched)
    triplets = forge_triplet_set(4, seed=101, image_size=16)
    data = TripletBatchTensors.from_triplets(triplets)
    x_e = data.removed.double()
    xbar = data.masked_source.double()
    mask = data.mask.double()
    gen = torch.Generator().manual_seed(1)
    eps = torch.randn(x_e.shape, generator=gen, dtype=torch.float64)
    t_vec = torch.tensor([100, 420, 730, 975])

    # Eq. 1: noise-prediction loss wrt denoiser parameters
    net = RemovalUNet(channels=(4, 8, 16), time_dim=16).double()
    params1 = [p for p in net.parameters() if p.requires_grad]
    n1, worst1 = _finite_difference_check(
        lambda: eq1_loss(net, x_e, xbar, mask, t_vec, eps, sched), params1, 50, seed=11
    )

    # Eq. 2: judge MSE wrt adapter + head parameters
    judge = QualityJudge(RemovalUNet(channels=(4, 8, 16), time_dim=16), rank=4).double()
    source = images_to_batch([t.source for t in triplets]).double()
    labels = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    params2 = [p for p in judge.trainable_parameters()]
    n2, worst2 = _finite_difference_check(
        lambda: eq2_loss(judge, x_e, source, mask, labels), params2, 50, seed=12
    )

    # Eq. 4: distillation loss wrt adapter parameters
    teacher = RemovalUNet(channels=(4, 8, 16), time_dim=16).double()
    student = StudentAdapters(teacher, rank=4)
    cond = Conditioning(masked_source=xbar, mask=mask)
    # give adapters a nonzero state so the gradient is not trivially tied to zero init
    with torch.no_grad():
        for name, p in student.net.named_parameters():
            if name.endswith(".up"):
                p.add_(0.01 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    params4 = [p for p in student.parameters()]
    n4, worst4 = _finite_difference_check(
        lambda: eq4_loss(student, x_e, cond, eps, t_plus=800, k=20, sched=sched, scal=scal),
        params4,
        50,
        seed=13,
    )

    elapsed = time.perf_counter() - t0
    ok = (
        worst1 <= 1e-3 and worst2 <= 1e-3 and worst4 <= 1e-3
        and n1 >= 50 and n2 >= 50 and n4 >= 50
        and elapsed < 120.0
    )
    _report(
        "gradient checks",
        ok,
        f"rel err eq1 {worst1:.2e} ({n1} coords), eq2 {worst2:.2e} ({n2}), "
        f"eq4 {worst4:.2e} ({n4}), {elapsed:.1f}s < 120s",
    )


# --------------------------------------------------------------------------
# Criterion 3: learning signal, < 30 min
# --------------------------------------------------------------------------


def _oracle_rate(net_or_student, pairs, sched, scal=None, steps=50, student=False, seed=4040):
    hits = []
    for lo in range(0, len(pairs), 50):
        chunk = pairs[lo : lo + 50]
        src = images_to_batch([p.source for p in chunk])
        msk = masks_to_batch([p.mask for p in chunk])
        if student:
            out = sample_student(net_or_student, src, msk, steps=steps, sched=sched, scal=scal, seed=seed + lo)
        else:
            out = sample(net_or_student, src, msk, steps=steps, sched=sched, seed=seed + lo)
        for p, e in zip(chunk, batch_to_images(out)):
            trip = p_to_triplet(p)
            comp = composite_over_source(e, p.source, p.mask)
            hits.append(oracle_success(comp, trip, TAU_MASK, TAU_KEEP))
    return 100.0 * float(np.mean(hits))


def p_to_triplet(pair):
    from eraser import Triplet

    return Triplet(source=pair.source, mask=pair.mask, removed=pair.background, class_label=pair.class_label)


def test_acceptance_learning_signal(trained_remover, heldout_pairs, sched):
    net, report, wall, _ = trained_remover
    torch.manual_seed(123)
    untrained = RemovalUNet(channels=net.channels)

    rate_untrained = _oracle_rate(untrained, heldout_pairs, sched)
    t0 = time.perf_counter()
    rate_trained = _oracle_rate(net, heldout_pairs, sched)
    eval_wall = time.perf_counter() - t0

    total = wall + eval_wall
    ok = rate_trained >= 60.0 and rate_untrained < 10.0 and total < 1800.0
    _report(
        "learning signal",
        ok,
        f"trained {rate_trained:.1f}% >= 60% on {ACCEPT_EVAL_SIZE} held-out pairs "
        f"(model: {ACCEPT_TRAIN_STEPS} steps on {ACCEPT_TRAIN_SIZE} triplets), "
        f"untrained {rate_untrained:.1f}% < 10%, train+eval {total/60:.1f} min < 30 min",
    )


# --------------------------------------------------------------------------
# Criterion 4: round-trend reproduction + ledger golden arithmetic
# --------------------------------------------------------------------------


def test_acceptance_round_trend(replay_pipeline):
    cfg, result = replay_pipeline
    ledger = result.ledger
    ledger.validate()

    rates = [r.success_rate for r in ledger.rows]
    names = [r.round_name for r in ledger.rows]
    assert all(r is not None for r in rates)
    monotone_within_tol = all(b >= a - 3.0 for a, b in zip(rates, rates[1:]))

    from eraser.ledger import LedgerRow, RoundLedger

    golden = RoundLedger(
        rows=[
            LedgerRow("initialization", "rord+mulan", 61_565, 61_565, 61_565),
            LedgerRow("human-round-1", "openimage", 10_000, 4_182, 65_747),
            LedgerRow("auto-round-1", "openimage", 30_000, 20_634, 86_381),
            LedgerRow("human-round-2", "openimage", 10_000, 7_008, 93_389),
            LedgerRow("auto-round-2", "openimage", 80_000, 51_099, 144_488),
            LedgerRow("human-round-3", "openimage", 10_000, 6_133, 150_621),
            LedgerRow("auto-round-3", "openimage", 95_204, 49_313, 199_934),
            LedgerRow("final", "div2k+flicker2k", None, 1_200, 201_134),
        ]
    )
    golden.validate()
    golden_ok = (
        golden.cumulative_for("human-round-1") == 65_747 and golden.total == 201_134
    )

    ok = monotone_within_tol and golden_ok and len(ledger.rows) == 2 * cfg.rounds + 2
    _report(
        "round-trend reproduction",
        ok,
        f"success by round {dict(zip(names, [f'{r:.0f}%' for r in rates]))}, "
        f"non-decreasing within 3 points: {monotone_within_tol}; "
        f"golden arithmetic 61565+4182=65747 and cumulative 201134: {golden_ok}",
    )


# --------------------------------------------------------------------------
# Criterion 5: judge suite
# --------------------------------------------------------------------------


def test_acceptance_judge_suite(trained_judge, judge_data):
    _, heldout, _ = judge_data

    # exact confusion identities on 1000 random count tuples
    rng = np.random.default_rng(7)
    identity_ok = True
    for _ in range(1000):
        tp, fp, fn, tn = (int(v) for v in rng.integers(0, 400, size=4))
        r = ConfusionReport(tp=tp, fp=fp, fn=fn, tn=tn, threshold=0.5)
        if tp + fp:
            identity_ok &= r.precision == tp / (tp + fp)
        else:
            identity_ok &= r.precision is None
        if tp + fn:
            identity_ok &= r.recall == tp / (tp + fn)
        else:
            identity_ok &= r.recall is None
        if r.precision is not None and r.recall is not None and (r.precision + r.recall) > 0:
            identity_ok &= r.f1 == 2 * r.precision * r.recall / (r.precision + r.recall)
        total = tp + fp + fn + tn
        identity_ok &= (r.accuracy == (tp + tn) / total) if total else (r.accuracy is None)

    # exact threshold nesting of the auto annotator
    cands = [(q.edited, q.source, q.mask) for q in heldout[:60]]
    sets = [set(auto_annotate(trained_judge, cands, threshold=thr)) for thr in (0.3, 0.5, 0.7, 0.9)]
    nesting_ok = all(b <= a for a, b in zip(sets, sets[1:]))

    # high-precision operating point on the held-out toy set
    rep_05 = evaluate_judge(trained_judge, heldout, threshold=0.5)
    rep_09 = evaluate_judge(trained_judge, heldout, threshold=0.9)
    precision_ok = (
        rep_09.precision is not None
        and rep_05.precision is not None
        and rep_09.precision >= rep_05.precision
    )

    accepted = auto_annotate(trained_judge, cands, threshold=0.9)
    filter_ok = all(judge_score(trained_judge, *cands[i]) > 0.9 for i in accepted)

    ok = identity_ok and nesting_ok and precision_ok and filter_ok
    _report(
        "judge suite",
        ok,
        f"1000 confusion tuples exact: {identity_ok}; nesting exact: {nesting_ok}; "
        f"precision@0.9 {rep_09.precision:.3f} >= precision@0.5 {rep_05.precision:.3f}; "
        f"{len(accepted)} accepted all score > 0.9: {filter_ok}",
    )


# --------------------------------------------------------------------------
# Criterion 6: distillation suite
# --------------------------------------------------------------------------


def test_acceptance_distillation(trained_remover, distilled_student, heldout_pairs, sched, scal):
    teacher, _, _, _ = trained_remover
    student, curve, _ = distilled_student

    # zero-adapter equivalence on a fresh student
    fresh = StudentAdapters(teacher, rank=64)
    probe_pairs = heldout_pairs[:8]
    src = images_to_batch([p.source for p in probe_pairs])
    msk = masks_to_batch([p.mask for p in probe_pairs])
    cond = Conditioning.from_source(src, msk)
    x = torch.randn(src.shape, generator=torch.Generator().manual_seed(0))
    from eraser.diffusion import DenoiserInput, predict_eps

    t_vec = torch.full((len(probe_pairs),), 500)
    with torch.no_grad():
        out_t = predict_eps(teacher, DenoiserInput(x, cond.masked_source, cond.mask, t_vec))
        out_s = predict_eps(fresh.net, DenoiserInput(x, cond.masked_source, cond.mask, t_vec))
    equiv = float((out_t - out_s).abs().max())

    # theta frozen through distillation
    from eraser.checkpoints import parameter_hash
    from eraser.lora import base_parameter_hash

    theta_ok = base_parameter_hash(student.net) == parameter_hash(teacher)

    # 4 evaluations vs 50, PSNR within 2 dB, wall-time advantage
    probe = heldout_pairs[:24]
    psnr_teacher, psnr_student = [], []
    src = images_to_batch([p.source for p in probe])
    msk = masks_to_batch([p.mask for p in probe])

    teacher.nfe_count = 0
    t0 = time.perf_counter()
    out_teacher = sample(teacher, src, msk, steps=50, sched=sched, seed=7)
    teacher_time = time.perf_counter() - t0
    teacher_nfe = teacher.nfe_count

    student.net.nfe_count = 0
    t0 = time.perf_counter()
    out_student = sample_student(student, src, msk, steps=4, sched=sched, scal=scal, seed=7)
    student_time = time.perf_counter() - t0
    student_nfe = student.net.nfe_count

    for p, te, st in zip(probe, batch_to_images(out_teacher), batch_to_images(out_student)):
        trip = p_to_triplet(p)
        psnr_teacher.append(psnr(composite_over_source(te, p.source, p.mask), trip.removed, region=p.mask))
        psnr_student.append(psnr(composite_over_source(st, p.source, p.mask), trip.removed, region=p.mask))
    gap = float(np.mean(psnr_teacher) - np.mean(psnr_student))

    ok = (
        equiv <= 1e-6
        and theta_ok
        and teacher_nfe == 50 * 1
        and student_nfe == 4 * 1
        and gap <= 2.0
        and student_time < teacher_time
    )
    _report(
        "distillation suite",
        ok,
        f"zero-adapter gap {equiv:.2e} <= 1e-6; theta hash frozen {theta_ok}; "
        f"NFE {student_nfe} vs {teacher_nfe} (grids of 4 vs 50); masked PSNR student "
        f"{np.mean(psnr_student):.2f} dB vs teacher {np.mean(psnr_teacher):.2f} dB (gap {gap:.2f} <= 2.0); "
        f"time {student_time:.1f}s < {teacher_time:.1f}s",
    )


# --------------------------------------------------------------------------
# Criterion 7: hub integrity
# --------------------------------------------------------------------------


def test_acceptance_hub_integrity(tmp_path, replay_pipeline_interrupted):
    import threading

    from eraser import TrainConfig, train_round
    from eraser.checkpoints import save_checkpoint
    from eraser.datasets import as_test_pairs, save_dataset
    from eraser.errors import ConflictError
    from eraser.hub import HubStore

    # 100/100 concurrent-label trials with exactly one winner
    sched = NoiseSchedule()
    torch.manual_seed(0)
    net = RemovalUNet(channels=(8, 16, 32), time_dim=32)
    trips = forge_triplet_set(8, seed=201, image_size=24)
    train_round(trips, net, TrainConfig(steps=2, batch_size=4, seed=0), sched)
    ckpt = tmp_path / "n.pt"
    save_checkpoint(ckpt, net, sched)
    manifest = save_dataset(tmp_path / "init", "train", trips, seed=0)
    store = HubStore(tmp_path / "hub")
    store.register_initial(manifest)
    pairs = as_test_pairs(forge_triplet_set(100, seed=202, image_size=24))
    store.enqueue_round(pairs, checkpoint=ckpt, round=1, steps=1, seed=0)

    wins = 0
    for task in store.tasks_for_round(1):
        outcome = []

        def submit(name, task_id=task.id):
            try:
                store.submit_label(task_id, label=1, annotator=name)
                outcome.append("ok")
            except ConflictError:
                outcome.append("conflict")

        t1 = threading.Thread(target=submit, args=("a",))
        t2 = threading.Thread(target=submit, args=("b",))
        t1.start(); t2.start(); t1.join(); t2.join()
        if sorted(outcome) == ["conflict", "ok"]:
            wins += 1
    conflict_ok = wins == 100

    # crash-resume byte-identical ledgers (replay mode)
    full_bytes, resumed_bytes, _, _ = replay_pipeline_interrupted
    resume_ok = full_bytes == resumed_bytes

    ok = conflict_ok and resume_ok
    _report(
        "hub integrity",
        ok,
        f"concurrent-label single-winner trials {wins}/100; "
        f"crash-resume ledger byte-identical: {resume_ok}",
    )
