import json
import asyncio
import logging
from datetime import datetime, timezone
from contextlib import asynccontextmanager
from fastapi import FastAPI, HTTPException
from pydantic import ValidationError
import aiosqlite

from backend.models import AttackRequest, CertifyRequest, SceneSource
from fusioncert.certify import empirical_attack, vanilla_value
from fusioncert.cli import certify_rows, internal_steps, modality_label, radius_label, space_and_grid, vanilla_rows
from fusioncert.config import env_db_path
from fusioncert.defaults import SIGMA_BY_KIND
from fusioncert.detector import close_detector, open_detector
from fusioncert.errors import DetectorError, InputError, SamplingError, SceneFormatError
from fusioncert.report import ReportRow, metric_name
from fusioncert.scene import generate, load, scene_from_document, scene_id
from fusioncert.transforms import TransformKind

logger = logging.getLogger(__name__)

@asynccontextmanager
async def lifespan(app: FastAPI):
    conn = await aiosqlite.connect(env_db_path())
    await conn.execute("PRAGMA journal_mode=WAL;")
    await conn.execute(
        """
        CREATE TABLE IF NOT EXISTS runs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            command TEXT,
            scene TEXT,
            transform TEXT,
            metric TEXT,
            rows TEXT,
            config TEXT,
            created_at TEXT
        )
        """
    )
    await conn.commit()
    app.state.runs_conn = conn
    app.state.runs_lock = asyncio.Lock()
    try:
        yield
    finally:
        await conn.close()

app = FastAPI(title="Fusion Certification API", lifespan=lifespan)

def _scene_of(request: SceneSource):
    if request.scene is not None:
        return load(request.scene), request.name or scene_id(request.scene)
    if request.scene_document is not None:
        return scene_from_document(request.scene_document), request.name or "inline"
    return generate(request.scene_spec), request.name or f"generated-{request.scene_spec.seed}"

def _certify_job(request: CertifyRequest) -> list[ReportRow]:
    scene, name = _scene_of(request)
    detector = open_detector(request.detector, request.builtin)
    try:
        return certify_rows(request, scene, name, detector, request.metric, modality=modality_label(request))
    finally:
        close_detector(detector)

def _attack_job(request: AttackRequest) -> list[ReportRow]:
    if request.attack_step is None:
        raise InputError("attack_step: required")
    scene, name = _scene_of(request)
    kind = TransformKind.parse(request.transform)
    ranges, space, _ = space_and_grid(request, kind)
    smoothing = request.smoothing(SIGMA_BY_KIND[kind.value])
    steps = internal_steps(kind, request.attack_step)
    detector = open_detector(request.detector, request.builtin)
    try:
        result = empirical_attack(detector, scene, kind, space, steps, smoothing, request.metric, None,
                                  request.threads)
        vanilla, vanilla_clean = None, None
        if request.vanilla:
            vanilla = empirical_attack(detector, scene, kind, space, steps, smoothing, request.metric, None,
                                       request.threads, smoothed=False)
            vanilla_clean = vanilla_value(detector, scene, request.metric)
    finally:
        close_detector(detector)
    metric_kind = "detection" if request.metric == "confidence" else "iou"
    thresholds = request.eta if metric_kind == "detection" else request.iou_threshold
    modality, radius = modality_label(request), radius_label(ranges)
    rows = [
        ReportRow(name, kind.value, radius, metric_name(metric_kind, t, modality=modality), None,
                  result.worst_value, None, 0.0, len(result.params), smoothing.n, smoothing.alpha)
        for t in thresholds
    ]
    if vanilla is not None:
        rows.extend(vanilla_rows(name, kind, radius, metric_kind, thresholds, vanilla, vanilla_clean, 0.0, modality))
    return rows

async def _run_job(job, request):
    try:
        return await asyncio.to_thread(job, request)
    except (InputError, SceneFormatError, FileNotFoundError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    except ValidationError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except (SamplingError, DetectorError) as e:
        logger.warning("run failed: %s", e)
        raise HTTPException(status_code=502, detail=str(e))

async def _store(command: str, request: SceneSource, rows: list[ReportRow]) -> int:
    conn = app.state.runs_conn
    config = request.model_dump(mode="json", exclude={"scene_document"})
    created_at = datetime.now(timezone.utc).isoformat()
    async with app.state.runs_lock:
        cursor = await conn.execute(
            """
            INSERT INTO runs (command, scene, transform, metric, rows, config, created_at)
            VALUES (?, ?, ?, ?, ?, ?, ?)
            """,
            (command, rows[0].scene, rows[0].transform, rows[0].metric,
             json.dumps([r.as_dict() for r in rows]), json.dumps(config), created_at)
        )
        await conn.commit()
        return cursor.lastrowid

@app.post("/certify")
async def certify(request: CertifyRequest):
    """Certify one scene; the run is stored in the history table."""
    rows = await _run_job(_certify_job, request)
    run_id = await _store(f"certify-{request.metric}", request, rows)
    return {"id": run_id, "rows": [r.as_dict() for r in rows]}

@app.post("/attack")
async def attack(request: AttackRequest):
    rows = await _run_job(_attack_job, request)
    run_id = await _store("attack", request, rows)
    return {"id": run_id, "rows": [r.as_dict() for r in rows]}

@app.get("/runs/list")
async def list_runs(limit: int = 20):
    conn = app.state.runs_conn
    async with conn.execute(
        "SELECT id, command, scene, transform, metric, created_at FROM runs ORDER BY id DESC LIMIT ?",
        (limit,)
    ) as cursor:
        rows = await cursor.fetchall()
    items = [
        {"id": r[0], "command": r[1], "scene": r[2], "transform": r[3], "metric": r[4], "created_at": r[5]}
        for r in rows
    ]
    return {"items": items}

@app.get("/runs/{run_id}")
async def get_run(run_id: int):
    conn = app.state.runs_conn
    async with conn.execute(
        "SELECT id, command, scene, transform, metric, rows, config, created_at FROM runs WHERE id = ?",
        (run_id,)
    ) as cursor:
        row = await cursor.fetchone()
    if not row:
        raise HTTPException(status_code=404, detail="Run not found")
    return {
        "id": row[0],
        "command": row[1],
        "scene": row[2],
        "transform": row[3],
        "metric": row[4],
        "rows": json.loads(row[5]) if row[5] else [],
        "config": json.loads(row[6]) if row[6] else {},
        "created_at": row[7],
    }

@app.delete("/runs/{run_id}")
async def delete_run(run_id: int):
    conn = app.state.runs_conn
    async with app.state.runs_lock:
        await conn.execute("DELETE FROM runs WHERE id = ?", (run_id,))
        await conn.commit()
    return {"status": "ok"}

@app.post("/runs/clear")
async def clear_runs():
    conn = app.state.runs_conn
    async with app.state.runs_lock:
        await conn.execute("DELETE FROM runs")
        await conn.commit()
    return {"status": "ok"}
