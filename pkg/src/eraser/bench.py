"""Benchmark harness: run removal methods over a test manifest and report
success rates (oracle, judge, optional human study), fidelity and runtime.

Both the raw model output and the source-composited variant are scored; the
composited numbers are the headline columns. Perceptual metric slots
(lpips, dino, clip) are declared but left null; they need large pretrained
networks and can be filled by a plugin at real scale.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .judge import QualityJudge, score as judge_score
from .metrics import composite_over_source, oracle_success, psnr
from .scenes import TestPair, Triplet

# (source, mask, seed) -> edited image
MethodFn = Callable[[np.ndarray, np.ndarray, int], np.ndarray]

PLUGGABLE_METRICS = ("lpips", "dino", "clip")


@dataclass
class EvalItem:
    """One benchmark unit: a pair, optional ground truth, per-method outputs."""

    pair: TestPair
    outputs: dict[str, np.ndarray] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def ground_truth(self) -> np.ndarray | None:
        return self.pair.background

    def as_triplet(self) -> Triplet:
        if self.pair.background is None:
            raise ValueError("item has no ground truth")
        return Triplet(
            source=self.pair.source,
            mask=self.pair.mask,
            removed=self.pair.background,
            class_label=self.pair.class_label,
        )


@dataclass
class MethodRow:
    method: str
    n: int
    success_rate_judge: float | None
    psnr: float
    mean_time: float
    success_rate_human: float | None = None
    oracle_success: float | None = None
    oracle_success_raw: float | None = None
    psnr_raw: float | None = None
    psnr_masked: float | None = None
    lpips: float | None = None
    dino: float | None = None
    clip: float | None = None


@dataclass
class EvalReport:
    rows: list[MethodRow]
    resolution: int
    n: int
    seeds: list[int]
    tau_mask: float
    tau_keep: float
    judge_threshold: float | None

    def to_dict(self) -> dict:
        return {
            "metadata": {
                "resolution": self.resolution,
                "n": self.n,
                "seeds": self.seeds,
                "tau_mask": self.tau_mask,
                "tau_keep": self.tau_keep,
                "judge_threshold": self.judge_threshold,
            },
            "rows": [vars(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def table(self) -> str:
        cols = [
            ("method", 12),
            ("success_rate_human", 8),
            ("success_rate_judge", 8),
            ("oracle_success", 8),
            ("psnr", 8),
            ("psnr_raw", 8),
            ("mean_time", 9),
        ]
        header = "  ".join(name[:width].ljust(width) for name, width in cols)
        lines = [header, "-" * len(header)]
        for r in self.rows:
            vals = []
            for name, width in cols:
                v = getattr(r, name)
                if v is None:
                    vals.append("-".ljust(width))
                elif isinstance(v, float):
                    vals.append(f"{v:.2f}".ljust(width))
                else:
                    vals.append(str(v)[:width].ljust(width))
            lines.append("  ".join(vals))
        return "\n".join(lines)


def judge_success_rate(
    judge: QualityJudge,
    items: Sequence[EvalItem],
    method: str,
    threshold: float = 0.5,
) -> float | None:
    """Percentage of a method's outputs scoring above the threshold.

    Items without an output for the method are skipped; if none remain the
    row is reported as missing (None), not as 0%.
    """
    edits = [(it.outputs[method], it.pair.source, it.pair.mask) for it in items if method in it.outputs]
    if not edits:
        warnings.warn(f"no outputs recorded for method {method!r}; omitting judge rate", stacklevel=2)
        return None
    hits = sum(1 for e, s, m in edits if judge_score(judge, e, s, m) > threshold)
    return 100.0 * hits / len(edits)


def run_benchmark(
    methods: Sequence[tuple[str, MethodFn]],
    pairs: Sequence[TestPair],
    judge: QualityJudge | None = None,
    seeds: Sequence[int] = (0,),
    tau_mask: float = 20.0,
    tau_keep: float = 30.0,
    judge_threshold: float = 0.5,
    human_rates: dict[str, float] | None = None,
) -> tuple[EvalReport, list[EvalItem]]:
    """Execute every method on every pair and assemble the report.

    A method crash on an item is recorded as a per-item failure and the
    benchmark continues. Timing is wall time per image, single stream.
    """
    if not pairs:
        raise ValueError("benchmark needs at least one pair")
    items = [EvalItem(pair=p) for p in pairs]
    seed_list = list(seeds)

    for mi, (name, fn) in enumerate(methods):
        for ii, item in enumerate(items):
            seed = seed_list[ii % len(seed_list)] * 100003 + ii
            t0 = time.perf_counter()
            try:
                out = fn(item.pair.source, item.pair.mask, seed)
            except Exception as exc:  # noqa: BLE001 - keep the benchmark running
                item.failures[name] = f"{type(exc).__name__}: {exc}"
                continue
            item.timings[name] = time.perf_counter() - t0
            item.outputs[name] = np.asarray(out, dtype=np.float32)

    rows = []
    for name, _ in methods:
        done = [it for it in items if name in it.outputs]
        if not done:
            warnings.warn(f"method {name!r} produced no outputs; row omitted", stacklevel=2)
            continue
        with_gt = [it for it in done if it.ground_truth is not None]
        psnr_comp, psnr_raw, psnr_masked = [], [], []
        oracle_comp, oracle_raw = [], []
        for it in done:
            comp = composite_over_source(it.outputs[name], it.pair.source, it.pair.mask)
            if it.ground_truth is not None:
                trip = it.as_triplet()
                psnr_comp.append(psnr(comp, it.ground_truth))
                psnr_raw.append(psnr(it.outputs[name], it.ground_truth))
                psnr_masked.append(psnr(comp, it.ground_truth, region=it.pair.mask))
                oracle_comp.append(oracle_success(comp, trip, tau_mask, tau_keep))
                oracle_raw.append(oracle_success(it.outputs[name], trip, tau_mask, tau_keep))
        row = MethodRow(
            method=name,
            n=len(done),
            success_rate_judge=judge_success_rate(judge, items, name, judge_threshold) if judge else None,
            psnr=float(np.mean(psnr_comp)) if psnr_comp else float("nan"),
            psnr_raw=float(np.mean(psnr_raw)) if psnr_raw else None,
            psnr_masked=float(np.mean(psnr_masked)) if psnr_masked else None,
            mean_time=float(np.mean([it.timings[name] for it in done])),
            success_rate_human=(human_rates or {}).get(name),
            oracle_success=100.0 * float(np.mean(oracle_comp)) if with_gt else None,
            oracle_success_raw=100.0 * float(np.mean(oracle_raw)) if with_gt else None,
        )
        rows.append(row)

    res = pairs[0].source.shape[0]
    report = EvalReport(
        rows=rows,
        resolution=res,
        n=len(pairs),
        seeds=seed_list,
        tau_mask=tau_mask,
        tau_keep=tau_keep,
        judge_threshold=judge_threshold if judge else None,
    )
    return report, items


def save_report(report: EvalReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    path.with_suffix(".txt").write_text(report.table() + "\n")
