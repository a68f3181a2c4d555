"""HTTP JSON API over the hub store.

All errors come back as {"code", "message"}; conflicts are 409, unknown ids
404, bad configuration 400. Images are served as PNG from the blob store.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, Query, Request
from fastapi.responses import FileResponse, JSONResponse
from pydantic import BaseModel, Field

from ..errors import ConfigurationError, ConflictError, IntegrityError, NotFoundError
from .store import HubStore

_STATUS = {
    NotFoundError: (404, "not_found"),
    ConflictError: (409, "conflict"),
    ConfigurationError: (400, "configuration"),
    IntegrityError: (500, "integrity"),
    ValueError: (400, "invalid_argument"),
}


class LabelBody(BaseModel):
    label: int = Field(ge=0, le=1)
    annotator: str
    reason: str | None = None


class SkipBody(BaseModel):
    annotator: str


class AutoBody(BaseModel):
    threshold: float = 0.9
    judge_path: str


class EnqueueBody(BaseModel):
    round: int
    checkpoint: str
    pairs_manifest: str
    steps: int = 50
    seed: int = 0
    kind: str = "human"


class SelectionBody(BaseModel):
    annotator: str
    selected_positions: list[int]


def create_app(store: HubStore, ui_dist: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="eraser annotation hub")

    @app.exception_handler(Exception)
    async def handle(request: Request, exc: Exception):
        for etype, (status, code) in _STATUS.items():
            if isinstance(exc, etype):
                return JSONResponse(status_code=status, content={"code": code, "message": str(exc)})
        return JSONResponse(status_code=500, content={"code": "internal", "message": str(exc)})

    @app.get("/healthz")
    def healthz():
        return {"ok": True}

    @app.get("/rounds")
    def rounds():
        ledger = store.ledger()
        return {"rows": [r.to_dict() for r in ledger.rows]}

    @app.post("/rounds")
    def enqueue(body: EnqueueBody):
        from ..datasets import load_triplets, as_test_pairs

        pairs = as_test_pairs(load_triplets(body.pairs_manifest))
        created = store.enqueue_round(
            pairs, checkpoint=body.checkpoint, round=body.round, steps=body.steps, seed=body.seed, kind=body.kind
        )
        return {"round": body.round, "created": created}

    @app.get("/tasks/next")
    def next_task(annotator: str = Query(default=""), round: int | None = Query(default=None)):
        task = store.next_task(annotator=annotator, round=round)
        if task is None:
            return {"task": None, "pending": 0}
        return {"task": _task_payload(task), "pending": store.pending_count(round)}

    @app.get("/tasks/{task_id}")
    def get_task(task_id: str):
        return {"task": _task_payload(store.get_task(task_id))}

    @app.post("/tasks/{task_id}/label")
    def label_task(task_id: str, body: LabelBody):
        task = store.submit_label(task_id, label=body.label, annotator=body.annotator, reason=body.reason)
        return {"task": _task_payload(task)}

    @app.post("/tasks/{task_id}/skip")
    def skip_task(task_id: str, body: SkipBody):
        task = store.skip_task(task_id, annotator=body.annotator)
        return {"task": _task_payload(task)}

    @app.post("/rounds/{round}/auto")
    def auto_round(round: int, body: AutoBody):
        from ..judge import load_judge

        judge = load_judge(body.judge_path)
        accepted, row = store.run_auto_round(judge, round=round, threshold=body.threshold)
        return {"accepted": accepted, "row": row.to_dict()}

    @app.get("/ledger")
    def ledger():
        return {"rows": [r.to_dict() for r in store.ledger().rows]}

    @app.get("/datasets/{round}/manifest")
    def dataset_manifest(round: int):
        out = store.root / "compiled" / f"round_{round}.json"
        out.parent.mkdir(exist_ok=True)
        store.compile_training_set(round, out)
        return JSONResponse(content=__import__("json").loads(out.read_text()))

    @app.get("/blobs/{ref}")
    def blob(ref: str):
        return FileResponse(store.blob_path(ref), media_type="image/png")

    @app.post("/studies")
    def create_study(body: dict):
        study_id = store.create_study(
            methods=body["methods"], items=body["items"], seed=int(body.get("seed", 0)),
            study_id=body.get("study_id"),
        )
        return {"study_id": study_id}

    @app.get("/studies/{study_id}")
    def study_info(study_id: str):
        return store.study_info(study_id)

    @app.get("/studies/{study_id}/items")
    def study_items(study_id: str):
        return {"items": store.study_items(study_id)}

    @app.post("/studies/{study_id}/items/{item_index}/selections")
    def study_select(study_id: str, item_index: int, body: SelectionBody):
        store.submit_study_selection(
            study_id, item_index, annotator=body.annotator, selected_positions=body.selected_positions
        )
        return {"ok": True}

    @app.get("/studies/{study_id}/results")
    def study_results(study_id: str):
        return store.study_results(study_id)

    if ui_dist is not None and Path(ui_dist).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=str(ui_dist), html=True), name="ui")

    return app


def _task_payload(task) -> dict:
    d = task.to_dict()
    d["source_url"] = f"/blobs/{task.source_ref}"
    d["mask_url"] = f"/blobs/{task.mask_ref}"
    d["edited_url"] = f"/blobs/{task.edited_ref}"
    return d
