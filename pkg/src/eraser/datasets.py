"""Dataset directory layout and manifests.

Layout: ``{root}/{split}/{id}/source.png|mask.png|removed.png`` plus a
``manifest.json`` at the root listing ids, class labels, mask fractions and
the generator seed. Real triplets can be imported by writing the same
layout. Compiled training manifests produced by the annotation hub use the
same entry schema with paths into its blob store.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .images import load_png, save_png
from .scenes import TestPair, Triplet

MANIFEST_NAME = "manifest.json"


@dataclass
class TripletRecord:
    """One manifest entry; paths are relative to the manifest directory."""

    id: str
    split: str
    class_label: str
    mask_fraction: float
    source: str
    mask: str
    removed: str


def save_dataset(root: str | Path, split: str, triplets: Sequence[Triplet], seed: int | None = None) -> Path:
    """Write triplets in the standard layout and (re)write the root manifest."""
    root = Path(root)
    records = _load_records(root) if (root / MANIFEST_NAME).exists() else []
    existing = sum(1 for r in records if r.split == split)
    for i, trip in enumerate(triplets):
        tid = f"{existing + i:06d}"
        d = root / split / tid
        d.mkdir(parents=True, exist_ok=True)
        save_png(d / "source.png", trip.source)
        save_png(d / "mask.png", trip.mask)
        save_png(d / "removed.png", trip.removed)
        rel = f"{split}/{tid}"
        records.append(
            TripletRecord(
                id=tid,
                split=split,
                class_label=trip.class_label,
                mask_fraction=trip.mask_fraction,
                source=f"{rel}/source.png",
                mask=f"{rel}/mask.png",
                removed=f"{rel}/removed.png",
            )
        )
    write_manifest(root / MANIFEST_NAME, records, seed=seed)
    return root / MANIFEST_NAME


def write_manifest(path: str | Path, records: Sequence[TripletRecord], seed: int | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": "eraser-dataset-v1",
        "seed": seed,
        "entries": [vars(r) for r in records],
    }
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def _load_records(root: Path) -> list[TripletRecord]:
    payload = json.loads((root / MANIFEST_NAME).read_text())
    return [TripletRecord(**e) for e in payload["entries"]]


def load_manifest(manifest: str | Path) -> list[TripletRecord]:
    """Read a manifest file (or a dataset root containing one)."""
    p = Path(manifest)
    if p.is_dir():
        p = p / MANIFEST_NAME
    payload = json.loads(p.read_text())
    if payload.get("format") != "eraser-dataset-v1":
        raise ValueError(f"{p} is not a dataset manifest")
    return [TripletRecord(**e) for e in payload["entries"]]


def load_triplet(record: TripletRecord, base: str | Path) -> Triplet:
    base = Path(base)
    return Triplet(
        source=load_png(base / record.source),
        mask=(load_png(base / record.mask) >= 0.5).astype("float32"),
        removed=load_png(base / record.removed),
        class_label=record.class_label,
    )


def load_triplets(manifest: str | Path) -> list[Triplet]:
    p = Path(manifest)
    if p.is_dir():
        p = p / MANIFEST_NAME
    base = p.parent
    return [load_triplet(r, base) for r in load_manifest(p)]


def as_test_pairs(triplets: Sequence[Triplet]) -> list[TestPair]:
    """View triplets as test pairs, keeping the true background for the oracle."""
    return [
        TestPair(source=t.source, mask=t.mask, class_label=t.class_label, background=t.removed)
        for t in triplets
    ]
