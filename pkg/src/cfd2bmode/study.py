"""Blinded reader-study backend: item bank, sessions, responses, reports.

Three test types mirror the human evaluation protocol:

- ``view_classify``: one video, pick its view (mixture of real and synthetic,
  analyzed post hoc).
- ``single_real_or_synth``: one video, judge real vs synthetic.
- ``paired_choose_real``: a real/synthetic pair in randomized order, pick the
  real one.

Ground truth lives only in the server-side stores; payloads served to raters
are truth-stripped. Responses go to an append-only newline-delimited log whose
replay reproduces any report exactly.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataio, metrics
from .dataio import DatasetManifest
from .errors import ConfigError

TEST_TYPES = ("view_classify", "single_real_or_synth", "paired_choose_real")

VIEW_OPTIONS = ("A2C", "A5C", "A3C", "4CH", "AortaIVC", "AortaSVC",
                "PLAX", "RVI", "RVO", "SAX", "SAXB", "SUB4C")

_TRUTH_FIELD_PATTERN = ("truth", "label", "real", "synth", "ground", "kind", "view")


# ---------------------------------------------------------------------------
# Item bank
# ---------------------------------------------------------------------------

@dataclass
class BankVideo:
    video_id: str
    kind: str                  # {"real", "synthetic"} — never serialized to clients
    frames: list[str]          # paths relative to the bank directory
    pair_key: str              # exam/clip/snippet triple shared by a real/synth pair
    view_label: Optional[str] = None
    ssim: Optional[float] = None


@dataclass
class ItemBank:
    root: Path
    videos: dict[str, BankVideo] = field(default_factory=dict)

    def by_kind(self, kind: str) -> list[BankVideo]:
        return sorted((v for v in self.videos.values() if v.kind == kind),
                      key=lambda v: v.video_id)

    def pairs(self) -> list[tuple[BankVideo, BankVideo]]:
        """(real, synthetic) pairs sharing a pair key."""
        real = {v.pair_key: v for v in self.videos.values() if v.kind == "real"}
        synth = {v.pair_key: v for v in self.videos.values() if v.kind == "synthetic"}
        return [(real[k], synth[k]) for k in sorted(real) if k in synth]

    def save(self) -> None:
        payload = [v.__dict__ for v in self.videos.values()]
        (self.root / "bank.json").write_text(json.dumps(payload, indent=1), encoding="utf-8")

    @staticmethod
    def load(root: Path) -> "ItemBank":
        root = Path(root)
        bank = ItemBank(root=root)
        for d in json.loads((root / "bank.json").read_text(encoding="utf-8")):
            bank.videos[d["video_id"]] = BankVideo(**d)
        return bank


def build_item_bank(real_manifest: DatasetManifest, synthetic_manifest: DatasetManifest,
                    bank_dir: Path, seed: int = 0,
                    panel_size: int = dataio.STANDARD_SIZE) -> ItemBank:
    """Extract per-snippet B-mode frame sequences into the bank directory.

    Real videos are the B-mode panels of the dual acquisitions; synthetic
    videos come from a translate run. Video ids are opaque and shuffled so id
    order carries no truth signal; each pair's SSIM(synthetic, real) is stored
    for the fool-rate regression.
    """
    bank_dir = Path(bank_dir)
    bank_dir.mkdir(parents=True, exist_ok=True)
    synth_by_clip = {(r.exam_id, r.clip_id): r for r in synthetic_manifest.records}

    entries = []  # (pair_key, kind, frames (T,H,W,3), view, ssim)
    for record in real_manifest.records:
        srec = synth_by_clip.get((record.exam_id, record.clip_id))
        if srec is None:
            continue
        duals = dataio.load_dual_snippets(record, real_manifest.root, size=panel_size)
        for dual in duals:
            i = dual.cfd.snippet_index
            start = i * dataio.SNIPPET_LEN
            if len(srec.frames) < start + dataio.SNIPPET_LEN:
                continue
            synth = np.stack([
                dataio.standardize_panel(
                    dataio.read_image(synthetic_manifest.resolve(rel)), size=panel_size)
                for rel in srec.frames[start:start + dataio.SNIPPET_LEN]])
            pair_key = f"{record.exam_id}/{record.clip_id}/s{i}"
            pair_ssim = metrics.ssim_video(synth, dual.bmode.frames)
            entries.append((pair_key, "real", dual.bmode.frames, record.view_label, pair_ssim))
            entries.append((pair_key, "synthetic", synth, record.view_label, pair_ssim))

    if not entries:
        raise ConfigError("no paired videos available to build the study bank")
    rng = np.random.default_rng([seed, 0xB4A6])
    order = rng.permutation(len(entries))
    bank = ItemBank(root=bank_dir)
    for slot, entry_index in enumerate(order):
        pair_key, kind, frames, view, pair_ssim = entries[int(entry_index)]
        video_id = f"v{slot:05d}"
        rels = []
        for t in range(frames.shape[0]):
            rel = f"videos/{video_id}/f{t:03d}.png"
            dataio.write_image(bank_dir / rel, frames[t])
            rels.append(rel)
        bank.videos[video_id] = BankVideo(video_id=video_id, kind=kind, frames=rels,
                                          pair_key=pair_key, view_label=view,
                                          ssim=pair_ssim)
    bank.save()
    return bank


# ---------------------------------------------------------------------------
# Sessions and the response log
# ---------------------------------------------------------------------------

class ConflictError(ValueError):
    """Duplicate response for an item already answered in this session."""


class AnswerError(ValueError):
    """Answer outside the item's legal answer set."""


class NotFoundError(KeyError):
    """Unknown session or item."""


@dataclass
class StudyStore:
    """Disk layout: sessions/*.json (server-side truth), responses.ndjson."""

    data_dir: Path
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        self.data_dir = Path(self.data_dir)
        (self.data_dir / "sessions").mkdir(parents=True, exist_ok=True)

    @property
    def response_log(self) -> Path:
        return self.data_dir / "responses.ndjson"

    def save_session(self, session: dict) -> None:
        path = self.data_dir / "sessions" / f"{session['session_id']}.json"
        path.write_text(json.dumps(session, indent=1), encoding="utf-8")

    def load_session(self, session_id: str) -> dict:
        path = self.data_dir / "sessions" / f"{session_id}.json"
        if not path.exists():
            raise NotFoundError(session_id)
        return json.loads(path.read_text(encoding="utf-8"))

    def sessions(self) -> list[dict]:
        out = []
        for path in sorted((self.data_dir / "sessions").glob("*.json")):
            out.append(json.loads(path.read_text(encoding="utf-8")))
        return out

    def append_response(self, response: dict) -> None:
        line = json.dumps(response) + "\n"
        with self._lock:
            with open(self.response_log, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()

    def responses(self) -> list[dict]:
        if not self.response_log.exists():
            return []
        out = []
        with open(self.response_log, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(json.loads(line))
        return out


def _balanced_selection(real: list[BankVideo], synth: list[BankVideo], count: int,
                        rng: np.random.Generator) -> list[BankVideo]:
    """~50/50 truth composition: exact when count is even, ±1 when odd."""
    n_real = count // 2 + (int(rng.integers(0, 2)) if count % 2 else 0)
    n_synth = count - n_real
    if n_real > len(real) or n_synth > len(synth):
        raise ConfigError(f"item bank too small: need {n_real} real / {n_synth} synthetic")
    picks = [real[i] for i in rng.permutation(len(real))[:n_real]]
    picks += [synth[i] for i in rng.permutation(len(synth))[:n_synth]]
    order = rng.permutation(len(picks))
    return [picks[int(i)] for i in order]


def create_session(bank: ItemBank, store: StudyStore, test_type: str, item_count: int,
                   rater_id: str, seed: int, disclosed: bool = False) -> dict:
    """Build, persist, and return a session descriptor (server-side, with truth)."""
    if test_type not in TEST_TYPES:
        raise ConfigError(f"unknown test type {test_type!r}")
    if item_count < 1:
        raise ConfigError("item_count must be >= 1")
    rater_key = int.from_bytes(hashlib.sha256(rater_id.encode()).digest()[:4], "big")
    rng = np.random.default_rng([seed, rater_key])
    session_id = f"s{int(time.time() * 1000):x}{int(rng.integers(0, 16**4)):04x}"

    items = []
    if test_type == "paired_choose_real":
        pairs = bank.pairs()
        if item_count > len(pairs):
            raise ConfigError(f"item bank has only {len(pairs)} pairs")
        chosen = [pairs[int(i)] for i in rng.permutation(len(pairs))[:item_count]]
        for k, (real_v, synth_v) in enumerate(chosen):
            real_first = bool(rng.integers(0, 2))
            videos = [real_v.video_id, synth_v.video_id] if real_first \
                else [synth_v.video_id, real_v.video_id]
            items.append({"item_id": f"{session_id}-i{k:03d}",
                          "test_type": test_type,
                          "video_ids": videos,
                          "answer_options": ["first", "second"],
                          "correct_answer": "first" if real_first else "second"})
    else:
        videos = _balanced_selection(bank.by_kind("real"), bank.by_kind("synthetic"),
                                     item_count, rng)
        for k, v in enumerate(videos):
            if test_type == "view_classify":
                options = list(VIEW_OPTIONS)
                correct = v.view_label
            else:
                options = ["real", "synthetic"]
                correct = v.kind
            items.append({"item_id": f"{session_id}-i{k:03d}",
                          "test_type": test_type,
                          "video_ids": [v.video_id],
                          "answer_options": options,
                          "correct_answer": correct})

    session = {"session_id": session_id, "test_type": test_type, "rater_id": rater_id,
               "seed": seed, "disclosed": disclosed, "items": items}
    store.save_session(session)
    return session


def _answered_items(store: StudyStore, session_id: str) -> set[str]:
    return {r["item_id"] for r in store.responses() if r["session_id"] == session_id}


def strip_truth(item: dict, index: int, total: int) -> dict:
    """Client view of an item: ids, assets, options. No truth fields."""
    return {"item_id": item["item_id"],
            "test_type": item["test_type"],
            "videos": [{"video_id": vid, "frames_url": f"/v1/videos/{vid}/frames"}
                       for vid in item["video_ids"]],
            "answer_options": item["answer_options"],
            "index": index,
            "total": total}


def next_item(store: StudyStore, session_id: str) -> dict:
    """The next unanswered item (truth stripped), or a done-marker."""
    session = store.load_session(session_id)
    answered = _answered_items(store, session_id)
    for index, item in enumerate(session["items"]):
        if item["item_id"] not in answered:
            return strip_truth(item, index, len(session["items"]))
    return {"done": True, "answered": len(answered), "total": len(session["items"])}


def submit_response(store: StudyStore, session_id: str, item_id: str, answer: str,
                    elapsed_ms: Optional[float] = None) -> dict:
    """Validate and append one response; duplicates and illegal answers are rejected."""
    session = store.load_session(session_id)
    item = next((i for i in session["items"] if i["item_id"] == item_id), None)
    if item is None:
        raise NotFoundError(item_id)
    if answer not in item["answer_options"]:
        raise AnswerError(f"answer {answer!r} not in {item['answer_options']}")
    if item_id in _answered_items(store, session_id):
        raise ConflictError(f"item {item_id} already answered in session {session_id}")
    record = {"session_id": session_id, "rater_id": session["rater_id"],
              "item_id": item_id, "answer": answer,
              "timestamp": time.time(), "elapsed_ms": elapsed_ms}
    store.append_response(record)
    return {"accepted": True, "item_id": item_id}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _accuracy_stats(per_rater: dict[str, list[bool]]) -> dict:
    accs = [float(np.mean(v)) for v in per_rater.values() if v]
    return {"per_rater": {r: float(np.mean(v)) for r, v in per_rater.items() if v},
            "mean": float(np.mean(accs)),
            "std": float(np.std(accs)),
            "range": [float(np.min(accs)), float(np.max(accs))],
            "raters": len(accs)}


def build_report(test_type: str, store: StudyStore, bank: Optional[ItemBank] = None) -> dict:
    """Aggregate the response log for one test type.

    Replaying the same log yields an identical report: everything derives
    from persisted sessions + responses (+ bank SSIMs for the fool-rate fit).
    """
    if test_type not in TEST_TYPES:
        raise ConfigError(f"unknown test type {test_type!r}")
    sessions = {s["session_id"]: s for s in store.sessions()
                if s["test_type"] == test_type}
    items = {i["item_id"]: (s, i) for s in sessions.values() for i in s["items"]}
    rows = [r for r in store.responses() if r["item_id"] in items]
    if not rows:
        raise ConfigError(f"no responses recorded for {test_type}")

    per_rater: dict[str, list[bool]] = {}
    for row in rows:
        session, item = items[row["item_id"]]
        correct = row["answer"] == item["correct_answer"]
        per_rater.setdefault(session["rater_id"], []).append(correct)

    report = {"task": test_type,
              "responses": len(rows),
              "accuracy": _accuracy_stats(per_rater),
              "disclosed_sessions": sorted(s["session_id"] for s in sessions.values()
                                           if s.get("disclosed"))}

    if test_type == "view_classify" and bank is not None:
        subsets: dict[str, tuple[list, list]] = {"real": ([], []), "synthetic": ([], [])}
        for row in rows:
            _, item = items[row["item_id"]]
            video = bank.videos.get(item["video_ids"][0])
            if video is None or video.view_label is None:
                continue
            preds, labels = subsets[video.kind]
            preds.append([row["answer"]])
            labels.append(video.view_label)
        f1_block = {}
        per_class: dict[str, list[float]] = {}
        for kind, (preds, labels) in subsets.items():
            if preds:
                rep = metrics.classification_report(preds, labels)
                f1_block[kind] = rep.overall_f1
                per_class[kind] = [rep.per_class_f1[c] for c in rep.classes]
        report["f1"] = f1_block
        if len(per_class.get("real", [])) > 0 and len(per_class.get("synthetic", [])) > 0:
            _, p = metrics.mwu(per_class["real"], per_class["synthetic"])
            report["per_class_f1_mwu_p"] = p

    if test_type == "single_real_or_synth" and bank is not None:
        verdicts: dict[str, list[bool]] = {}
        ssim_per_video: dict[str, float] = {}
        for row in rows:
            _, item = items[row["item_id"]]
            video = bank.videos.get(item["video_ids"][0])
            if video is None or video.kind != "synthetic":
                continue
            verdicts.setdefault(video.video_id, []).append(row["answer"] == "real")
            if video.ssim is not None:
                ssim_per_video[video.video_id] = video.ssim
        if verdicts:
            analysis = metrics.fool_rate_analysis(verdicts, ssim_per_video)
            report["fool_rate"] = {"per_video": analysis.fool_rates,
                                   "slope": analysis.slope,
                                   "intercept": analysis.intercept,
                                   "r_squared": analysis.r_squared}
    return report


# ---------------------------------------------------------------------------
# HTTP API
# ---------------------------------------------------------------------------

try:  # pydantic request models for the HTTP layer
    from pydantic import BaseModel

    class SessionRequest(BaseModel):
        test_type: str
        item_count: int
        rater_id: str
        seed: int = 0
        disclosed: bool = False

    class ResponseBody(BaseModel):
        item_id: str
        answer: str
        elapsed_ms: Optional[float] = None
except ImportError:  # pragma: no cover - library use without the HTTP stack
    SessionRequest = ResponseBody = None


def create_app(bank_dir: Path, data_dir: Path):
    """FastAPI app exposing the /v1 study API over a bank + store on disk."""
    from fastapi import FastAPI, HTTPException
    from fastapi.responses import FileResponse

    bank = ItemBank.load(Path(bank_dir))
    store = StudyStore(Path(data_dir))
    app = FastAPI(title="cfd2bmode reader study", version="1")

    @app.post("/v1/sessions")
    def post_session(body: SessionRequest):
        try:
            session = create_session(bank, store, body.test_type, body.item_count,
                                     body.rater_id, body.seed, body.disclosed)
        except ConfigError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"session_id": session["session_id"], "test_type": session["test_type"],
                "total": len(session["items"]), "rater_id": session["rater_id"]}

    @app.get("/v1/sessions/{session_id}")
    def get_session(session_id: str):
        try:
            session = store.load_session(session_id)
        except NotFoundError:
            raise HTTPException(status_code=404, detail="unknown session")
        answered = len(_answered_items(store, session_id))
        return {"session_id": session_id, "test_type": session["test_type"],
                "total": len(session["items"]), "answered": answered,
                "rater_id": session["rater_id"]}

    @app.get("/v1/sessions/{session_id}/next")
    def get_next(session_id: str):
        try:
            return next_item(store, session_id)
        except NotFoundError:
            raise HTTPException(status_code=404, detail="unknown session")

    @app.post("/v1/sessions/{session_id}/responses")
    def post_response(session_id: str, body: ResponseBody):
        try:
            return submit_response(store, session_id, body.item_id, body.answer,
                                   body.elapsed_ms)
        except NotFoundError:
            raise HTTPException(status_code=404, detail="unknown session or item")
        except AnswerError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        except ConflictError as exc:
            raise HTTPException(status_code=409, detail=str(exc))

    @app.get("/v1/videos/{video_id}/frames")
    def get_frames(video_id: str):
        video = bank.videos.get(video_id)
        if video is None:
            raise HTTPException(status_code=404, detail="unknown video")
        return {"video_id": video_id,
                "frame_urls": [f"/v1/videos/{video_id}/frames/{t}.png"
                               for t in range(len(video.frames))],
                "fps": 10}

    @app.get("/v1/videos/{video_id}/frames/{index}.png")
    def get_frame(video_id: str, index: int):
        video = bank.videos.get(video_id)
        if video is None or not 0 <= index < len(video.frames):
            raise HTTPException(status_code=404, detail="unknown frame")
        return FileResponse(bank.root / video.frames[index], media_type="image/png")

    @app.get("/v1/reports/{test_type}")
    def get_report(test_type: str):
        try:
            return build_report(test_type, store, bank)
        except ConfigError as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    return app
