"""Durable store behind the annotation hub.

A single sqlite file (WAL mode) holds tasks, rounds, the ledger and study
records; images live in a content-addressed blob directory next to it.
Label submission is a single conditional UPDATE, so exactly one of two
racing writers wins and the loser sees a conflict. Round-scoped mutations
(enqueue, auto-label, compile) run inside one transaction each, which makes
them atomic under crashes.
"""

from __future__ import annotations

import json
import sqlite3
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from ..datasets import MANIFEST_NAME, TripletRecord, load_manifest, write_manifest
from ..errors import ConfigurationError, ConflictError, IntegrityError, NotFoundError
from ..images import content_hash, decode_png, encode_png
from ..judge import QualityJudge
from ..ledger import LedgerRow, RoundLedger
from ..scenes import TestPair

_SCHEMA = """
CREATE TABLE IF NOT EXISTS tasks (
    id TEXT PRIMARY KEY,
    round INTEGER NOT NULL,
    pair_id TEXT NOT NULL,
    class_label TEXT NOT NULL DEFAULT '',
    source_ref TEXT NOT NULL,
    mask_ref TEXT NOT NULL,
    edited_ref TEXT NOT NULL,
    background_ref TEXT,
    status TEXT NOT NULL DEFAULT 'pending'
        CHECK (status IN ('pending', 'labeled', 'auto-labeled', 'skipped')),
    label INTEGER,
    annotator TEXT,
    reason TEXT,
    scored REAL,
    created_at TEXT NOT NULL,
    labeled_at TEXT,
    UNIQUE (round, pair_id)
);
CREATE TABLE IF NOT EXISTS rounds (
    round INTEGER PRIMARY KEY,
    kind TEXT NOT NULL DEFAULT 'human',
    checkpoint TEXT NOT NULL DEFAULT '',
    steps INTEGER NOT NULL DEFAULT 0,
    seed INTEGER NOT NULL DEFAULT 0,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS ledger (
    position INTEGER PRIMARY KEY,
    round_name TEXT UNIQUE NOT NULL,
    dataset_source TEXT NOT NULL DEFAULT '',
    n_test INTEGER,
    n_selected INTEGER NOT NULL,
    cumulative INTEGER NOT NULL,
    success_rate REAL,
    psnr REAL,
    hub_round INTEGER
);
CREATE TABLE IF NOT EXISTS studies (
    id TEXT PRIMARY KEY,
    seed INTEGER NOT NULL,
    methods TEXT NOT NULL,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS study_items (
    study_id TEXT NOT NULL,
    item_index INTEGER NOT NULL,
    source_ref TEXT NOT NULL,
    mask_ref TEXT NOT NULL,
    output_refs TEXT NOT NULL,
    permutation TEXT NOT NULL,
    PRIMARY KEY (study_id, item_index)
);
CREATE TABLE IF NOT EXISTS study_selections (
    study_id TEXT NOT NULL,
    item_index INTEGER NOT NULL,
    annotator TEXT NOT NULL,
    selected_positions TEXT NOT NULL,
    submitted_at TEXT NOT NULL,
    PRIMARY KEY (study_id, item_index, annotator)
);
CREATE TABLE IF NOT EXISTS meta (
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
"""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class AnnotationTask:
    id: str
    round: int
    pair_id: str
    class_label: str
    source_ref: str
    mask_ref: str
    edited_ref: str
    status: str
    label: int | None = None
    annotator: str | None = None
    reason: str | None = None
    scored: float | None = None
    background_ref: str | None = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "id", "round", "pair_id", "class_label", "source_ref", "mask_ref",
            "edited_ref", "status", "label", "annotator", "reason", "scored",
        )}


def _row_to_task(row: sqlite3.Row) -> AnnotationTask:
    return AnnotationTask(
        id=row["id"],
        round=row["round"],
        pair_id=row["pair_id"],
        class_label=row["class_label"],
        source_ref=row["source_ref"],
        mask_ref=row["mask_ref"],
        edited_ref=row["edited_ref"],
        background_ref=row["background_ref"],
        status=row["status"],
        label=row["label"],
        annotator=row["annotator"],
        reason=row["reason"],
        scored=row["scored"],
    )


class HubStore:
    """sqlite + blob-directory persistence for the annotation loop."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.blob_dir = self.root / "blobs"
        self.blob_dir.mkdir(exist_ok=True)
        self.db_path = self.root / "hub.sqlite3"
        with self._con() as con:
            con.executescript(_SCHEMA)

    @contextmanager
    def _con(self):
        """Fresh connection per call (thread-safe); commits or rolls back, then closes."""
        con = sqlite3.connect(self.db_path, timeout=30.0)
        con.row_factory = sqlite3.Row
        con.execute("PRAGMA journal_mode=WAL")
        con.execute("PRAGMA synchronous=FULL")
        con.execute("PRAGMA busy_timeout=30000")
        try:
            with con:
                yield con
        finally:
            con.close()

    # ---- blobs ----------------------------------------------------------

    def put_blob(self, array: np.ndarray) -> str:
        data = encode_png(array)
        digest = content_hash(data)
        path = self.blob_dir / f"{digest}.png"
        if not path.exists():
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(data)
            tmp.replace(path)
        return digest

    def blob_path(self, ref: str) -> Path:
        path = self.blob_dir / f"{ref}.png"
        if not path.exists():
            raise NotFoundError(f"blob {ref} not found")
        return path

    def get_blob(self, ref: str) -> np.ndarray:
        return decode_png(self.blob_path(ref).read_bytes())

    # ---- initial dataset -------------------------------------------------

    def register_initial(self, manifest_path: str | Path, dataset_source: str = "forge") -> int:
        """Record the seed dataset and append the initialization ledger row."""
        manifest_path = Path(manifest_path).resolve()
        records = load_manifest(manifest_path)
        size = len(records)
        with self._con() as con:
            con.execute("BEGIN IMMEDIATE")
            con.execute(
                "INSERT OR REPLACE INTO meta (key, value) VALUES ('initial_manifest', ?)",
                (str(manifest_path),),
            )
            con.execute("INSERT OR REPLACE INTO meta (key, value) VALUES ('initial_size', ?)", (str(size),))
            self._upsert_ledger_row(
                con,
                position=0,
                row=LedgerRow(
                    round_name="initialization",
                    dataset_source=dataset_source,
                    n_test=size,
                    n_selected=size,
                    cumulative_train_size=size,
                ),
            )
        return size

    def initial_manifest(self) -> Path | None:
        with self._con() as con:
            row = con.execute("SELECT value FROM meta WHERE key='initial_manifest'").fetchone()
        return Path(row["value"]) if row else None

    # ---- rounds and tasks -------------------------------------------------

    def enqueue_round(
        self,
        pairs: Sequence[TestPair],
        checkpoint: str | Path,
        round: int,
        steps: int = 50,
        seed: int = 0,
        kind: str = "human",
        batch_size: int = 32,
    ) -> int:
        """Sample edits for every pair and create pending tasks, atomically.

        Idempotent per (round, pair index): re-enqueueing the same round
        inserts nothing new. Returns the number of pending tasks created.
        """
        if not pairs:
            raise ValueError("pairs must be nonempty")
        checkpoint = Path(checkpoint)
        if not checkpoint.exists():
            raise ConfigurationError(f"checkpoint {checkpoint} does not exist")
        with self._con() as con:
            have = con.execute("SELECT COUNT(*) c FROM tasks WHERE round=?", (round,)).fetchone()["c"]
        if int(have) >= len(pairs):
            return 0

        from ..checkpoints import load_checkpoint
        from ..diffusion import batch_to_images, images_to_batch, masks_to_batch, sample

        net, sched, _ = load_checkpoint(checkpoint)
        net.eval()
        edits: list[np.ndarray] = []
        for lo in range(0, len(pairs), batch_size):
            chunk = pairs[lo : lo + batch_size]
            src = images_to_batch([p.source for p in chunk])
            msk = masks_to_batch([p.mask for p in chunk])
            out = sample(net, src, msk, steps=steps, sched=sched, seed=seed + lo)
            edits.extend(batch_to_images(out))

        created = 0
        with self._con() as con:
            con.execute("BEGIN IMMEDIATE")
            con.execute(
                "INSERT OR IGNORE INTO rounds (round, kind, checkpoint, steps, seed, created_at)"
                " VALUES (?, ?, ?, ?, ?, ?)",
                (round, kind, str(checkpoint), steps, seed, _now()),
            )
            for i, (pair, edit) in enumerate(zip(pairs, edits)):
                pair_id = f"{i:05d}"
                task_id = f"r{round}-{pair_id}"
                exists = con.execute("SELECT 1 FROM tasks WHERE id=?", (task_id,)).fetchone()
                if exists:
                    continue
                src_ref = self.put_blob(pair.source)
                mask_ref = self.put_blob(pair.mask)
                edit_ref = self.put_blob(edit)
                bg_ref = self.put_blob(pair.background) if pair.background is not None else None
                con.execute(
                    "INSERT INTO tasks (id, round, pair_id, class_label, source_ref, mask_ref,"
                    " edited_ref, background_ref, status, created_at)"
                    " VALUES (?, ?, ?, ?, ?, ?, ?, ?, 'pending', ?)",
                    (task_id, round, pair_id, pair.class_label, src_ref, mask_ref, edit_ref, bg_ref, _now()),
                )
                created += 1
        return created

    def get_task(self, task_id: str) -> AnnotationTask:
        with self._con() as con:
            row = con.execute("SELECT * FROM tasks WHERE id=?", (task_id,)).fetchone()
        if row is None:
            raise NotFoundError(f"task {task_id} not found")
        return _row_to_task(row)

    def next_task(self, annotator: str = "", round: int | None = None) -> AnnotationTask | None:
        """Next pending task, round-robin over class labels for balanced exposure."""
        with self._con() as con:
            where = "status='pending'" + ("" if round is None else " AND round=?")
            args: tuple = () if round is None else (round,)
            served = dict(
                con.execute(
                    f"SELECT class_label, COUNT(*) FROM tasks"
                    f" WHERE status IN ('labeled','auto-labeled','skipped'){'' if round is None else ' AND round=?'}"
                    f" GROUP BY class_label",
                    args,
                ).fetchall()
            )
            rows = con.execute(f"SELECT * FROM tasks WHERE {where} ORDER BY id", args).fetchall()
        if not rows:
            return None
        rows = sorted(rows, key=lambda r: (served.get(r["class_label"], 0), r["id"]))
        return _row_to_task(rows[0])

    def pending_count(self, round: int | None = None) -> int:
        with self._con() as con:
            if round is None:
                row = con.execute("SELECT COUNT(*) c FROM tasks WHERE status='pending'").fetchone()
            else:
                row = con.execute(
                    "SELECT COUNT(*) c FROM tasks WHERE status='pending' AND round=?", (round,)
                ).fetchone()
        return int(row["c"])

    def tasks_for_round(self, round: int) -> list[AnnotationTask]:
        with self._con() as con:
            rows = con.execute("SELECT * FROM tasks WHERE round=? ORDER BY id", (round,)).fetchall()
        return [_row_to_task(r) for r in rows]

    def submit_label(
        self, task_id: str, label: int, annotator: str, reason: str | None = None
    ) -> AnnotationTask:
        """Record a human label. Atomic: a second submit sees ConflictError."""
        if label not in (0, 1):
            raise ValueError("label must be 0 or 1")
        with self._con() as con:
            cur = con.execute(
                "UPDATE tasks SET status='labeled', label=?, annotator=?, reason=?, labeled_at=?"
                " WHERE id=? AND status='pending'",
                (label, annotator, reason, _now(), task_id),
            )
            if cur.rowcount == 0:
                row = con.execute("SELECT status FROM tasks WHERE id=?", (task_id,)).fetchone()
                if row is None:
                    raise NotFoundError(f"task {task_id} not found")
                raise ConflictError(f"task {task_id} already {row['status']}")
            con.commit()
        return self.get_task(task_id)

    def skip_task(self, task_id: str, annotator: str) -> AnnotationTask:
        """Mark a malformed render as skipped; counts in n_test, never selected."""
        with self._con() as con:
            cur = con.execute(
                "UPDATE tasks SET status='skipped', annotator=?, labeled_at=?"
                " WHERE id=? AND status='pending'",
                (annotator, _now(), task_id),
            )
            if cur.rowcount == 0:
                row = con.execute("SELECT status FROM tasks WHERE id=?", (task_id,)).fetchone()
                if row is None:
                    raise NotFoundError(f"task {task_id} not found")
                raise ConflictError(f"task {task_id} already {row['status']}")
            con.commit()
        return self.get_task(task_id)

    # ---- automated round ---------------------------------------------------

    def run_auto_round(
        self,
        judge: QualityJudge,
        round: int,
        threshold: float = 0.9,
        dataset_source: str = "forge",
        batch_size: int = 64,
        round_name: str | None = None,
    ) -> tuple[int, LedgerRow]:
        """Score every pending task of the round; accept scores above threshold.

        All scored tasks become auto-labeled (accepted positive, rest
        negative) with their score recorded; a ledger row is appended.
        """
        if judge is None:
            raise ConfigurationError("run_auto_round needs a trained judge")
        tasks = [t for t in self.tasks_for_round(round) if t.status == "pending"]
        if not tasks:
            raise ConfigurationError(f"no pending tasks for round {round}")

        from ..diffusion import images_to_batch, masks_to_batch
        from ..judge import scores as judge_scores

        all_scores: list[float] = []
        for lo in range(0, len(tasks), batch_size):
            chunk = tasks[lo : lo + batch_size]
            e = images_to_batch([self.get_blob(t.edited_ref) for t in chunk])
            s = images_to_batch([self.get_blob(t.source_ref) for t in chunk])
            m = masks_to_batch([(self.get_blob(t.mask_ref) >= 0.5).astype(np.float32) for t in chunk])
            all_scores.extend(judge_scores(judge, e, s, m).tolist())

        accepted = 0
        with self._con() as con:
            con.execute("BEGIN IMMEDIATE")
            for task, sc in zip(tasks, all_scores):
                label = 1 if sc > threshold else 0
                accepted += label
                con.execute(
                    "UPDATE tasks SET status='auto-labeled', label=?, scored=?, labeled_at=?"
                    " WHERE id=? AND status='pending'",
                    (label, float(sc), _now(), task.id),
                )
            row = self._append_round_row(
                con,
                round_name=round_name or f"auto-round-{round}",
                dataset_source=dataset_source,
                n_test=len(tasks),
                n_selected=accepted,
                hub_round=round,
            )
        return accepted, row

    def finalize_human_round(
        self, round: int, dataset_source: str = "forge", round_name: str | None = None
    ) -> LedgerRow:
        """Append the ledger row for a drained human round."""
        tasks = self.tasks_for_round(round)
        if any(t.status == "pending" for t in tasks):
            raise ConfigurationError(f"round {round} still has pending tasks")
        positives = sum(1 for t in tasks if t.status == "labeled" and t.label == 1)
        with self._con() as con:
            con.execute("BEGIN IMMEDIATE")
            row = self._append_round_row(
                con,
                round_name=round_name or f"human-round-{round}",
                dataset_source=dataset_source,
                n_test=len(tasks),
                n_selected=positives,
                hub_round=round,
            )
        return row

    def append_custom_row(
        self, round_name: str, dataset_source: str, n_test: int | None, n_selected: int
    ) -> LedgerRow:
        """Append (idempotently) a ledger row not tied to a hub round, e.g. the final stage."""
        with self._con() as con:
            con.execute("BEGIN IMMEDIATE")
            return self._append_round_row(
                con, round_name=round_name, dataset_source=dataset_source, n_test=n_test, n_selected=n_selected
            )

    # ---- ledger -------------------------------------------------------------

    def _upsert_ledger_row(
        self, con: sqlite3.Connection, position: int, row: LedgerRow, hub_round: int | None = None
    ) -> None:
        con.execute(
            "INSERT OR REPLACE INTO ledger"
            " (position, round_name, dataset_source, n_test, n_selected, cumulative,"
            "  success_rate, psnr, hub_round)"
            " VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)",
            (
                position,
                row.round_name,
                row.dataset_source,
                row.n_test,
                row.n_selected,
                row.cumulative_train_size,
                row.success_rate,
                row.psnr,
                hub_round,
            ),
        )
        self._validate_ledger(con)

    def _append_round_row(
        self,
        con: sqlite3.Connection,
        round_name: str,
        dataset_source: str,
        n_test: int | None,
        n_selected: int,
        hub_round: int | None = None,
    ) -> LedgerRow:
        existing = con.execute("SELECT position FROM ledger WHERE round_name=?", (round_name,)).fetchone()
        if existing is not None:
            position = int(existing["position"])
            prev = con.execute(
                "SELECT cumulative FROM ledger WHERE position < ? ORDER BY position DESC LIMIT 1", (position,)
            ).fetchone()
        else:
            last = con.execute("SELECT MAX(position) p FROM ledger").fetchone()
            position = (int(last["p"]) + 1) if last["p"] is not None else 0
            prev = con.execute(
                "SELECT cumulative FROM ledger WHERE position < ? ORDER BY position DESC LIMIT 1", (position,)
            ).fetchone()
        base = int(prev["cumulative"]) if prev else 0
        row = LedgerRow(
            round_name=round_name,
            dataset_source=dataset_source,
            n_test=n_test,
            n_selected=n_selected,
            cumulative_train_size=base + n_selected,
        )
        self._upsert_ledger_row(con, position, row, hub_round=hub_round)
        return row

    def _validate_ledger(self, con: sqlite3.Connection) -> None:
        rows = con.execute("SELECT * FROM ledger ORDER BY position").fetchall()
        RoundLedger(
            rows=[
                LedgerRow(
                    round_name=r["round_name"],
                    dataset_source=r["dataset_source"],
                    n_test=r["n_test"],
                    n_selected=r["n_selected"],
                    cumulative_train_size=r["cumulative"],
                    success_rate=r["success_rate"],
                    psnr=r["psnr"],
                )
                for r in rows
            ]
        ).validate()

    def set_row_metrics(self, round_name: str, success_rate: float | None, psnr: float | None) -> None:
        with self._con() as con:
            cur = con.execute(
                "UPDATE ledger SET success_rate=?, psnr=? WHERE round_name=?",
                (success_rate, psnr, round_name),
            )
            if cur.rowcount == 0:
                raise NotFoundError(f"no ledger row named {round_name!r}")
            con.commit()

    def ledger(self) -> RoundLedger:
        with self._con() as con:
            rows = con.execute("SELECT * FROM ledger ORDER BY position").fetchall()
        return RoundLedger(
            rows=[
                LedgerRow(
                    round_name=r["round_name"],
                    dataset_source=r["dataset_source"],
                    n_test=r["n_test"],
                    n_selected=r["n_selected"],
                    cumulative_train_size=r["cumulative"],
                    success_rate=r["success_rate"],
                    psnr=r["psnr"],
                )
                for r in rows
            ]
        ).validate()

    # ---- training-set compilation -------------------------------------------

    def positive_tasks_through(self, through_round: int) -> list[AnnotationTask]:
        with self._con() as con:
            rows = con.execute(
                "SELECT * FROM tasks WHERE round <= ? AND label = 1"
                " AND status IN ('labeled', 'auto-labeled') ORDER BY id",
                (through_round,),
            ).fetchall()
        return [_row_to_task(r) for r in rows]

    def compile_training_set(self, through_round: int, out_path: str | Path) -> Path:
        """Manifest of the initial triplets plus every positive task so far.

        The manifest count must match the ledger's cumulative size for the
        latest accounted round at or below ``through_round``.
        """
        initial = self.initial_manifest()
        if initial is None:
            raise ConfigurationError("no initial dataset registered")
        base = initial.parent
        records = [
            TripletRecord(
                id=r.id,
                split=r.split,
                class_label=r.class_label,
                mask_fraction=r.mask_fraction,
                source=str((base / r.source).resolve()),
                mask=str((base / r.mask).resolve()),
                removed=str((base / r.removed).resolve()),
            )
            for r in load_manifest(initial)
        ]
        for task in self.positive_tasks_through(through_round):
            mask = (self.get_blob(task.mask_ref) >= 0.5).astype(np.float32)
            records.append(
                TripletRecord(
                    id=task.id,
                    split="hub",
                    class_label=task.class_label,
                    mask_fraction=float(mask.mean()),
                    source=str(self.blob_path(task.source_ref).resolve()),
                    mask=str(self.blob_path(task.mask_ref).resolve()),
                    removed=str(self.blob_path(task.edited_ref).resolve()),
                )
            )

        with self._con() as con:
            row = con.execute(
                "SELECT round_name, cumulative FROM ledger"
                " WHERE hub_round IS NOT NULL AND hub_round <= ?"
                " ORDER BY position DESC LIMIT 1",
                (through_round,),
            ).fetchone()
            if row is None:
                row = con.execute(
                    "SELECT round_name, cumulative FROM ledger WHERE round_name='initialization'"
                ).fetchone()
        expected = int(row["cumulative"]) if row is not None else None
        if expected is not None and expected != len(records):
            raise IntegrityError(
                f"compiled manifest has {len(records)} entries but the ledger expects {expected}"
                f" through round {through_round}"
            )
        out_path = Path(out_path)
        write_manifest(out_path, records)
        return out_path

    # ---- studies --------------------------------------------------------------

    def create_study(
        self,
        methods: Sequence[str],
        items: Sequence[dict],
        seed: int = 0,
        study_id: str | None = None,
    ) -> str:
        """Register a blind comparison study.

        Each item dict needs ``source_ref``, ``mask_ref`` and ``output_refs``
        (method name -> blob ref, every method present). Pane order per item
        is a seed-derived uniformly random permutation, recorded for replay.
        """
        methods = list(methods)
        if not methods or not items:
            raise ConfigurationError("study needs methods and items")
        study_id = study_id or f"study-{seed}-{len(items)}"
        with self._con() as con:
            con.execute("BEGIN IMMEDIATE")
            con.execute(
                "INSERT INTO studies (id, seed, methods, created_at) VALUES (?, ?, ?, ?)",
                (study_id, seed, json.dumps(methods), _now()),
            )
            for i, item in enumerate(items):
                missing = [m for m in methods if m not in item["output_refs"]]
                if missing:
                    raise ConfigurationError(f"study item {i} lacks outputs for {missing}")
                rng = np.random.Generator(np.random.PCG64(seed * 1000003 + i))
                perm = [int(v) for v in rng.permutation(len(methods))]
                con.execute(
                    "INSERT INTO study_items (study_id, item_index, source_ref, mask_ref,"
                    " output_refs, permutation) VALUES (?, ?, ?, ?, ?, ?)",
                    (
                        study_id,
                        i,
                        item["source_ref"],
                        item["mask_ref"],
                        json.dumps(item["output_refs"]),
                        json.dumps(perm),
                    ),
                )
        return study_id

    def study_info(self, study_id: str) -> dict:
        with self._con() as con:
            row = con.execute("SELECT * FROM studies WHERE id=?", (study_id,)).fetchone()
            if row is None:
                raise NotFoundError(f"study {study_id} not found")
            n = con.execute(
                "SELECT COUNT(*) c FROM study_items WHERE study_id=?", (study_id,)
            ).fetchone()["c"]
        return {"id": row["id"], "seed": row["seed"], "methods": json.loads(row["methods"]), "n_items": int(n)}

    def study_items(self, study_id: str) -> list[dict]:
        """Items with panes in display order; method identities stay hidden."""
        info = self.study_info(study_id)
        methods = info["methods"]
        with self._con() as con:
            rows = con.execute(
                "SELECT * FROM study_items WHERE study_id=? ORDER BY item_index", (study_id,)
            ).fetchall()
        out = []
        for r in rows:
            refs = json.loads(r["output_refs"])
            perm = json.loads(r["permutation"])
            out.append(
                {
                    "item_index": r["item_index"],
                    "source_ref": r["source_ref"],
                    "mask_ref": r["mask_ref"],
                    "panes": [refs[methods[p]] for p in perm],
                }
            )
        return out

    def submit_study_selection(
        self, study_id: str, item_index: int, annotator: str, selected_positions: Sequence[int]
    ) -> None:
        """Record which displayed panes the annotator judged successful."""
        info = self.study_info(study_id)
        k = len(info["methods"])
        positions = sorted(set(int(p) for p in selected_positions))
        if any(p < 0 or p >= k for p in positions):
            raise ValueError(f"selected positions must lie in [0, {k})")
        with self._con() as con:
            row = con.execute(
                "SELECT 1 FROM study_items WHERE study_id=? AND item_index=?", (study_id, item_index)
            ).fetchone()
            if row is None:
                raise NotFoundError(f"study item {study_id}/{item_index} not found")
            try:
                con.execute(
                    "INSERT INTO study_selections (study_id, item_index, annotator,"
                    " selected_positions, submitted_at) VALUES (?, ?, ?, ?, ?)",
                    (study_id, item_index, annotator, json.dumps(positions), _now()),
                )
            except sqlite3.IntegrityError as exc:
                raise ConflictError(
                    f"annotator {annotator!r} already answered item {item_index} of {study_id}"
                ) from exc
            con.commit()

    def study_results(self, study_id: str) -> dict:
        """Per-method success rate: mean over annotators of per-item selection rate.

        Selections arrive as displayed positions; the recorded permutation is
        inverted here so identities never leave the server.
        """
        info = self.study_info(study_id)
        methods = info["methods"]
        with self._con() as con:
            items = con.execute(
                "SELECT item_index, permutation FROM study_items WHERE study_id=?", (study_id,)
            ).fetchall()
            sels = con.execute(
                "SELECT * FROM study_selections WHERE study_id=?", (study_id,)
            ).fetchall()
        perm_by_item = {r["item_index"]: json.loads(r["permutation"]) for r in items}
        by_annotator: dict[str, dict[str, list[float]]] = {}
        for s in sels:
            perm = perm_by_item[s["item_index"]]
            chosen_methods = {methods[perm[p]] for p in json.loads(s["selected_positions"])}
            rates = by_annotator.setdefault(s["annotator"], {m: [] for m in methods})
            for m in methods:
                rates[m].append(1.0 if m in chosen_methods else 0.0)
        per_method: dict[str, float | None] = {}
        for m in methods:
            annotator_rates = [float(np.mean(r[m])) for r in by_annotator.values() if r[m]]
            per_method[m] = 100.0 * float(np.mean(annotator_rates)) if annotator_rates else None
        return {
            "study_id": study_id,
            "methods": methods,
            "n_items": info["n_items"],
            "n_annotators": len(by_annotator),
            "success_rates": per_method,
        }
