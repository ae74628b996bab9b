"""HTTP session backend for the interactive filter-selection workflow.

Sessions live under <out>/sessions/<sid>/ and every state change is
persisted write-then-rename, so restarting the service loses no completed
run. Candidate runs execute on a small worker pool; clients poll status.
The service only ever reads the dataset; slice and activation images are
served as 8-bit grayscale PNGs (client applies any colormap).
"""

from __future__ import annotations

import io
import json
import os
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from fastapi import Body, FastAPI, HTTPException, Query, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image

from .data import Dataset
from .encoder import EncoderSpec, LayerSpec, build_encoder, load_bank, save_bank, save_encoder
from .markers import Marker, MarkerSet, load_markers, save_markers
from .msflim import (
    CandidateSet,
    RunParams,
    SelectionLedger,
    activation_map,
    finalize_bank,
    run_msflim_step,
)
from .encoder import Filter
from .patches import NormStats, marker_stats_pooled
from .volume import Volume, read_volume, slice2d, write_volume

MODALITY_KEYS = {"FLAIR": "flair", "T1Gd": "t1gd"}


def _atomic_json(path: Path, doc: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _to_png(plane: np.ndarray) -> bytes:
    lo, hi = float(plane.min()), float(plane.max())
    if hi > lo:
        scaled = (plane - lo) / (hi - lo) * 255.0
    else:
        scaled = np.full(plane.shape, 128.0)  # constant image windows to mid-gray
    buf = io.BytesIO()
    Image.fromarray(scaled.astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


class RunState:
    def __init__(self, run_id: str, session_id: str, directory: Path):
        self.run_id = run_id
        self.session_id = session_id
        self.directory = directory
        self.status = "pending"
        self.error = ""
        self.modality = ""
        self.params: dict = {}
        self.result: CandidateSet | None = None

    def to_dict(self) -> dict:
        counts = (
            {img: len(c) for img, c in self.result.candidates.items()}
            if self.result else {}
        )
        return {
            "run_id": self.run_id,
            "session": self.session_id,
            "status": self.status,
            "error": self.error,
            "modality": self.modality,
            "params": self.params,
            "candidates": counts,
        }


def _save_candidates(cs: CandidateSet, path: Path) -> None:
    filters = [f for group in cs.candidates.values() for f in group]
    header = {
        "format": "MSRUN1",
        "run_id": cs.run_id,
        "params": {
            "n1": cs.params.clusters_per_marker,
            "n2": cs.params.clusters_per_image,
            "seed": cs.params.seed,
            "kernel": cs.params.kernel,
        },
        "norm": cs.norm.to_dict(),
        "images": {img: len(group) for img, group in cs.candidates.items()},
        "first_counts": cs.first_candidate_counts,
        "provenance": [f.source for f in filters],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        if filters:
            fh.write(np.stack([f.weights for f in filters]).astype("<f4").tobytes())


def _load_candidates(path: Path) -> CandidateSet:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    params = RunParams(
        clusters_per_marker=header["params"]["n1"],
        clusters_per_image=header["params"]["n2"],
        seed=header["params"]["seed"],
        kernel=header["params"]["kernel"],
    )
    norm = NormStats.from_dict(header["norm"])
    total = sum(header["images"].values())
    length = params.kernel ** 3 * norm.channels
    weights = np.frombuffer(payload, dtype="<f4").reshape(total, length)
    candidates: dict[str, tuple] = {}
    row = 0
    provenance = header["provenance"]
    for img, count in header["images"].items():
        group = []
        for i in range(count):
            group.append(Filter(weights=weights[row], source=provenance[row]))
            row += 1
        candidates[img] = tuple(group)
    return CandidateSet(
        run_id=header["run_id"],
        params=params,
        norm=norm,
        candidates=candidates,
        first_candidate_counts=header["first_counts"],
    )


class Session:
    def __init__(self, session_id: str, directory: Path, dataset_path: str):
        self.session_id = session_id
        self.directory = directory
        self.dataset_path = dataset_path
        self.lock = threading.Lock()
        self.markers: dict[tuple[str, str], MarkerSet] = {}  # (image, modality)
        self.run_ids: list[str] = []
        self.ledgers: dict[str, SelectionLedger] = {}  # per modality

    def persist(self) -> None:
        doc = {
            "session_id": self.session_id,
            "dataset": self.dataset_path,
            "runs": self.run_ids,
            "markers": sorted(f"{img}:{mod}" for img, mod in self.markers),
            "ledgers": {mod: led.to_dict() for mod, led in self.ledgers.items()},
        }
        _atomic_json(self.directory / "session.json", doc)


def create_app(data_dir, out_dir, workers: int = 2) -> FastAPI:
    dataset = Dataset(data_dir)
    root = Path(out_dir) / "sessions"
    root.mkdir(parents=True, exist_ok=True)

    app = FastAPI(title="flimseg studio service")
    sessions: dict[str, Session] = {}
    runs: dict[str, RunState] = {}
    pool = ThreadPoolExecutor(max_workers=workers)

    def _rescan() -> None:
        for sdir in sorted(root.iterdir()):
            meta = sdir / "session.json"
            if not meta.is_file():
                continue
            with open(meta, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
            session = Session(doc["session_id"], sdir, doc["dataset"])
            for key in doc.get("markers", []):
                img, mod = key.split(":")
                path = sdir / f"markers_{img}_{MODALITY_KEYS[mod]}.mk"
                if path.is_file():
                    session.markers[(img, mod)] = load_markers(path)
            for mod, led in doc.get("ledgers", {}).items():
                session.ledgers[mod] = SelectionLedger.from_dict(led)
            for run_id in doc.get("runs", []):
                rdir = sdir / "runs" / run_id
                state = RunState(run_id, session.session_id, rdir)
                status_file = rdir / "run.json"
                if status_file.is_file():
                    with open(status_file, "r", encoding="utf-8") as fh:
                        saved = json.load(fh)
                    state.status = saved["status"]
                    state.modality = saved.get("modality", "")
                    state.params = saved.get("params", {})
                    state.error = saved.get("error", "")
                    if state.status == "done" and (rdir / "candidates.msr").is_file():
                        state.result = _load_candidates(rdir / "candidates.msr")
                    elif state.status in ("pending", "running"):
                        state.status = "failed"
                        state.error = "service restarted before the run completed"
                session.run_ids.append(run_id)
                runs[run_id] = state
            sessions[session.session_id] = session

    _rescan()

    def _session(sid: str) -> Session:
        if sid not in sessions:
            raise HTTPException(404, f"unknown session {sid}")
        return sessions[sid]

    def _run(rid: str) -> RunState:
        if rid not in runs:
            raise HTTPException(404, f"unknown run {rid}")
        return runs[rid]

    def _load_image(image_id: str, modality: str) -> Volume:
        if modality not in MODALITY_KEYS:
            raise HTTPException(400, f"unknown modality {modality}")
        try:
            return dataset.load_volume(image_id, modality)
        except FileNotFoundError as exc:
            raise HTTPException(404, str(exc)) from exc

    @app.post("/api/sessions")
    def create_session(body: dict = Body(default={})) -> dict:
        sid = uuid.uuid4().hex[:8]
        sdir = root / sid
        (sdir / "runs").mkdir(parents=True, exist_ok=True)
        session = Session(sid, sdir, str(body.get("dataset", dataset.root)))
        sessions[sid] = session
        session.persist()
        return {"session_id": sid, "dataset": session.dataset_path,
                "images": dataset.case_ids("marked")}

    @app.get("/api/images/{image_id}/slice")
    def image_slice(
        image_id: str,
        axis: str = Query("z"),
        index: int = Query(0),
        channel: int = Query(0),
        modality: str = Query("FLAIR"),
    ) -> Response:
        vol = _load_image(image_id, modality)
        try:
            plane = slice2d(vol, axis, index, channel)
        except (ValueError, IndexError) as exc:
            raise HTTPException(400, str(exc)) from exc
        return Response(content=_to_png(plane), media_type="image/png")

    @app.put("/api/sessions/{sid}/markers")
    def put_markers(sid: str, body: dict = Body(...)) -> dict:
        session = _session(sid)
        try:
            markers = MarkerSet(
                image_id=body["image_id"],
                modality=body["modality"],
                markers=tuple(
                    Marker(
                        id=m["id"], label=m["label"],
                        voxels=tuple(tuple(v) for v in m["voxels"]),
                    )
                    for m in body["markers"]
                ),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(400, f"malformed marker body: {exc}") from exc
        vol = _load_image(markers.image_id, markers.modality)
        try:
            markers.bind_check(vol)
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from exc
        with session.lock:
            session.markers[(markers.image_id, markers.modality)] = markers
            save_markers(
                markers,
                session.directory
                / f"markers_{markers.image_id}_{MODALITY_KEYS[markers.modality]}.mk",
            )
            session.persist()
        return {"image_id": markers.image_id, "modality": markers.modality,
                "markers": len(markers.markers),
                "voxels": markers.total_voxels()}

    def _execute_run(state: RunState, session: Session, modality: str,
                     params: RunParams) -> None:
        try:
            state.status = "running"
            _atomic_json(state.directory / "run.json", state.to_dict())
            pairs = sorted(
                (img for img, mod in session.markers if mod == modality)
            )
            volumes = [dataset.load_volume(img, modality) for img in pairs]
            marker_sets = [session.markers[(img, modality)] for img in pairs]
            stats = marker_stats_pooled(volumes, marker_sets)
            result = run_msflim_step(
                volumes, marker_sets, params, run_id=state.run_id, stats=stats
            )
            _save_candidates(result, state.directory / "candidates.msr")
            state.result = result
            state.status = "done"
        except Exception as exc:
            state.status = "failed"
            state.error = str(exc)
        _atomic_json(state.directory / "run.json", state.to_dict())

    @app.post("/api/sessions/{sid}/runs")
    def launch_run(sid: str, body: dict = Body(...)) -> dict:
        session = _session(sid)
        try:
            modality = body.get("modality", "FLAIR")
            params = RunParams(
                clusters_per_marker=int(body["n1"]),
                clusters_per_image=int(body["n2"]),
                seed=int(body.get("seed", 0)),
                kernel=int(body.get("kernel", 3)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(400, f"malformed run request: {exc}") from exc
        with session.lock:
            if not any(mod == modality for _, mod in session.markers):
                raise HTTPException(400, f"session has no {modality} markers yet")
            run_id = f"{sid}-r{len(session.run_ids)}"
            rdir = session.directory / "runs" / run_id
            rdir.mkdir(parents=True, exist_ok=True)
            state = RunState(run_id, sid, rdir)
            state.modality = modality
            state.params = {"n1": params.clusters_per_marker,
                            "n2": params.clusters_per_image,
                            "seed": params.seed, "kernel": params.kernel}
            runs[run_id] = state
            session.run_ids.append(run_id)
            session.persist()
            _atomic_json(rdir / "run.json", state.to_dict())
        pool.submit(_execute_run, state, session, modality, params)
        return {"run_id": run_id, "status": state.status}

    @app.get("/api/runs/{rid}")
    def run_status(rid: str) -> dict:
        return _run(rid).to_dict()

    @app.get("/api/runs/{rid}/candidates/{k}/activation")
    def run_activation(
        rid: str,
        k: int,
        image: str = Query(...),
        axis: str = Query("z"),
        index: int = Query(-1),
        modality: str = Query(None),
    ) -> Response:
        state = _run(rid)
        if state.status != "done":
            raise HTTPException(409, f"run {rid} is {state.status}, not done")
        cs = state.result
        try:
            candidate = cs.get(image, k)
        except KeyError as exc:
            raise HTTPException(404, str(exc)) from exc
        cache = state.directory / f"act_{image}_{k}.mvol"
        if cache.is_file():
            act = read_volume(cache)
        else:
            vol = _load_image(image, modality or state.modality)
            act = activation_map(vol, candidate, cs.norm)
            write_volume(act, cache)
        if index < 0:
            index = act.spatial_shape["zyx".index(axis)] // 2
        try:
            plane = slice2d(act, axis, index)
        except (ValueError, IndexError) as exc:
            raise HTTPException(400, str(exc)) from exc
        return Response(content=_to_png(plane), media_type="image/png")

    @app.post("/api/sessions/{sid}/bank")
    def post_bank(sid: str, body: dict = Body(...)) -> dict:
        session = _session(sid)
        picks = body.get("picks")
        if not isinstance(picks, list) or not picks:
            raise HTTPException(400, "body must carry a non-empty picks array")
        modality = body.get("modality", "FLAIR")
        target = int(body.get("target_size", max(16, len(picks))))
        ledger = SelectionLedger(target_bank_size=target)
        for pick in picks:
            try:
                run_id, image_id, index = pick["run"], pick["image"], int(pick["index"])
            except (KeyError, TypeError) as exc:
                raise HTTPException(400, f"malformed pick {pick}: {exc}") from exc
            state = _run(run_id)
            if state.status != "done":
                raise HTTPException(409, f"run {run_id} is {state.status}, not done")
            try:
                state.result.get(image_id, index)
            except KeyError as exc:
                raise HTTPException(404, str(exc)) from exc
            try:
                ledger.add(run_id, image_id, index)
            except ValueError as exc:
                raise HTTPException(400, str(exc)) from exc
        with session.lock:
            session.ledgers[modality] = ledger
            session.persist()
        return {"modality": modality, "picks": len(ledger.chosen)}

    def _session_bank(session: Session, modality: str):
        ledger = session.ledgers.get(modality)
        if ledger is None:
            raise HTTPException(404, f"session has no {modality} bank yet")
        run_states = [_run(rid) for rid in {p[0] for p in ledger.chosen}]
        results = [s.result for s in run_states if s.result is not None]
        norm = results[0].norm
        return finalize_bank(results, ledger, norm)

    @app.post("/api/sessions/{sid}/encoder")
    def post_encoder(sid: str, body: dict = Body(default={})) -> dict:
        session = _session(sid)
        modality = body.get("modality", "FLAIR")
        bank = _session_bank(session, modality)
        spec_doc = body.get("spec")
        if spec_doc:
            spec = EncoderSpec.from_dict(spec_doc)
        else:
            spec = EncoderSpec(
                layers=(
                    LayerSpec(pca_out=None),
                    LayerSpec(pca_out=2 * len(bank)),
                    LayerSpec(pca_out=4 * len(bank)),
                )
            )
        pairs = sorted(img for img, mod in session.markers if mod == modality)
        volumes = [dataset.load_volume(img, modality) for img in pairs]
        marker_sets = [session.markers[(img, modality)] for img in pairs]
        model = build_encoder(volumes, marker_sets, spec, layer1_bank=bank,
                              seed=int(body.get("seed", 0)))
        enc_dir = session.directory / f"encoder_{MODALITY_KEYS[modality]}"
        save_encoder(model, enc_dir)
        return {"modality": modality, "path": str(enc_dir),
                "widths": [len(b) for b in model.banks]}

    @app.get("/api/sessions/{sid}/export")
    def export_bank(sid: str, modality: str = Query("FLAIR")) -> Response:
        session = _session(sid)
        bank = _session_bank(session, modality)
        path = session.directory / f"bank_{MODALITY_KEYS[modality]}.fb"
        save_bank(bank, path)
        return Response(
            content=path.read_bytes(),
            media_type="application/octet-stream",
            headers={"Content-Disposition": f"attachment; filename={path.name}"},
        )

    static_dir = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if static_dir.is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="studio")
    return app
