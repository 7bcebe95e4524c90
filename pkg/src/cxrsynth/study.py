"""Blinded reader-study service: randomized per-rater item order, blinded
payloads, append-only response capture, CSV export, and agreement summary.

The hidden source tag (real vs synthesized) never enters any client-facing
payload; media files are served under opaque ids so path components cannot
leak provenance. Responses persist to a newline-delimited JSON journal; the
CSV (with the source column revealed) is derived on export.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import mimetypes
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateMarginals,
    DegenerateVariance,
    DuplicateResponse,
    OutOfRangeValue,
    UnknownRater,
)
from .metrics import RatingMatrix, binarize_realism, fleiss_kappa, icc_2_1

SOURCE_REAL = "real"
SOURCE_SYNTHESIZED = "synthesized"

TASK_REALISM = "realism"
TASK_HELPFULNESS = "helpfulness"

REALISM_OPTIONS = (
    (1, "Definitely synthesized"),
    (2, "Probably synthesized"),
    (3, "Not sure"),
    (4, "Probably real"),
    (5, "Definitely real"),
)
HELPFULNESS_OPTIONS = (
    (0, "Not helpful"),
    (1, "Helpful"),
)

CSV_COLUMNS = ("rater_id", "timestamp", "item_id", "task", "value", "source")


@dataclass(frozen=True)
class StudyItem:
    """One study image with an optional segmentation overlay.

    The ``source`` tag is server-side only and must never be serialized into
    a client-facing payload.
    """

    item_id: str
    image_path: Path
    overlay_path: Path | None
    source: str

    def __post_init__(self):
        if self.source not in (SOURCE_REAL, SOURCE_SYNTHESIZED):
            raise ValueError(f"unknown source tag {self.source!r}")

    @property
    def tasks(self) -> tuple[str, ...]:
        if self.overlay_path is not None:
            return (TASK_REALISM, TASK_HELPFULNESS)
        return (TASK_REALISM,)


@dataclass(frozen=True)
class Response:
    rater_id: str
    timestamp: str
    item_id: str
    task: str
    value: int


def load_items(path: Path | str) -> list[StudyItem]:
    """Read the study items file: a JSON list of
    ``{"item_id", "image", "overlay"?, "source"}`` with paths relative to the
    file."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    base = path.parent
    items = []
    for entry in raw:
        overlay = entry.get("overlay")
        items.append(
            StudyItem(
                item_id=str(entry["item_id"]),
                image_path=base / entry["image"],
                overlay_path=None if overlay is None else base / overlay,
                source=entry["source"],
            )
        )
    ids = [item.item_id for item in items]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate item ids in study items file")
    return items


def _rater_rng(seed: int, rater_id: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{rater_id}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class StudyState:
    """In-process study: items, per-rater order, journaled responses."""

    def __init__(
        self,
        items: Sequence[StudyItem],
        seed: int,
        journal_path: Path | str | None = None,
        raters: Sequence[str] | None = None,
    ):
        if not items:
            raise ValueError("a study needs at least one item")
        self.items = list(items)
        self.seed = seed
        self.raters = None if raters is None else set(raters)
        self._by_id = {item.item_id: item for item in self.items}
        self._journal_path = None if journal_path is None else Path(journal_path)
        self._responses: dict[tuple[str, str, str], Response] = {}
        self._lock = threading.Lock()
        self._media: dict[str, Path] = {}
        for item in self.items:
            self._media[self._media_id(item.item_id, "image")] = item.image_path
            if item.overlay_path is not None:
                self._media[self._media_id(item.item_id, "overlay")] = item.overlay_path
        if self._journal_path is not None and self._journal_path.exists():
            self._replay_journal()

    # -- journal --

    def _replay_journal(self) -> None:
        with open(self._journal_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                raw = json.loads(line)
                response = Response(
                    rater_id=raw["rater_id"],
                    timestamp=raw["timestamp"],
                    item_id=raw["item_id"],
                    task=raw["task"],
                    value=int(raw["value"]),
                )
                key = (response.rater_id, response.item_id, response.task)
                self._responses[key] = response

    def _append_journal(self, response: Response) -> None:
        if self._journal_path is None:
            return
        entry = {
            "rater_id": response.rater_id,
            "timestamp": response.timestamp,
            "item_id": response.item_id,
            "task": response.task,
            "value": response.value,
        }
        with open(self._journal_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()

    # -- blinded session flow --

    def _media_id(self, item_id: str, kind: str) -> str:
        digest = hashlib.sha256(
            f"{self.seed}:{item_id}:{kind}".encode("utf-8")
        ).hexdigest()
        return digest[:16]

    def resolve_media(self, opaque_id: str) -> Path:
        if opaque_id not in self._media:
            raise KeyError(opaque_id)
        return self._media[opaque_id]

    def _check_rater(self, rater_id: str) -> None:
        if not rater_id:
            raise UnknownRater("empty rater id")
        if self.raters is not None and rater_id not in self.raters:
            raise UnknownRater(f"rater {rater_id!r} is not on the study roster")

    def order_for(self, rater_id: str) -> list[StudyItem]:
        """Deterministic per-rater permutation of the item list."""
        self._check_rater(rater_id)
        rng = _rater_rng(self.seed, rater_id)
        order = rng.permutation(len(self.items))
        return [self.items[i] for i in order]

    def _total_tasks(self) -> int:
        return sum(len(item.tasks) for item in self.items)

    def _answered_count(self, rater_id: str) -> int:
        return sum(1 for key in self._responses if key[0] == rater_id)

    def _outstanding_tasks(self, rater_id: str, item: StudyItem) -> list[str]:
        return [
            task
            for task in item.tasks
            if (rater_id, item.item_id, task) not in self._responses
        ]

    def _item_payload(self, item: StudyItem, outstanding: Sequence[str]) -> dict:
        tasks = []
        for task in outstanding:
            options = REALISM_OPTIONS if task == TASK_REALISM else HELPFULNESS_OPTIONS
            tasks.append(
                {
                    "task": task,
                    "options": [
                        {"value": value, "label": label} for value, label in options
                    ],
                }
            )
        overlay_url = (
            None
            if item.overlay_path is None
            else f"/media/{self._media_id(item.item_id, 'overlay')}"
        )
        return {
            "item_id": item.item_id,
            "image_url": f"/media/{self._media_id(item.item_id, 'image')}",
            "overlay_url": overlay_url,
            "tasks": tasks,
        }

    def next_item(self, rater_id: str) -> dict:
        """Next blinded payload for a rater, or the Done marker."""
        with self._lock:
            progress = {
                "answered": self._answered_count(rater_id),
                "total": self._total_tasks(),
            }
            for item in self.order_for(rater_id):
                outstanding = self._outstanding_tasks(rater_id, item)
                if outstanding:
                    return {
                        "done": False,
                        "item": self._item_payload(item, outstanding),
                        "progress": progress,
                    }
            return {"done": True, "item": None, "progress": progress}

    def submit(self, rater_id: str, item_id: str, task: str, value: int) -> Response:
        """Validate and persist one response; append-only, duplicates rejected."""
        with self._lock:
            self._check_rater(rater_id)
            item = self._by_id.get(item_id)
            if item is None:
                raise OutOfRangeValue(f"unknown item {item_id!r}")
            if task not in item.tasks:
                raise OutOfRangeValue(f"task {task!r} not posed for item {item_id!r}")
            if isinstance(value, bool) or not isinstance(value, int):
                raise OutOfRangeValue(f"value must be an integer, got {value!r}")
            if task == TASK_REALISM and not (1 <= value <= 5):
                raise OutOfRangeValue(f"realism rating must be in 1..5, got {value}")
            if task == TASK_HELPFULNESS and value not in (0, 1):
                raise OutOfRangeValue(f"helpfulness must be 0 or 1, got {value}")
            key = (rater_id, item_id, task)
            if key in self._responses:
                raise DuplicateResponse(
                    f"{rater_id!r} already answered {task} for item {item_id!r}"
                )
            response = Response(rater_id, _now_iso(), item_id, task, value)
            self._responses[key] = response
            self._append_journal(response)
            return response

    # -- export and summary --

    def export_csv(self) -> str:
        """CSV with the source column revealed; stable (rater, item, task)
        row order so re-export is byte-identical."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for key in sorted(self._responses):
            response = self._responses[key]
            writer.writerow(
                [
                    response.rater_id,
                    response.timestamp,
                    response.item_id,
                    response.task,
                    response.value,
                    self._by_id[response.item_id].source,
                ]
            )
        return buffer.getvalue()

    def _task_grid(self, task: str) -> tuple[list[str], np.ndarray | None]:
        """Items x raters grid for one task, or None when incomplete."""
        raters = sorted({key[0] for key in self._responses if key[2] == task})
        item_ids = [item.item_id for item in self.items if task in item.tasks]
        if len(raters) < 2 or not item_ids:
            return raters, None
        grid = np.empty((len(item_ids), len(raters)), dtype=float)
        for i, item_id in enumerate(item_ids):
            for j, rater in enumerate(raters):
                response = self._responses.get((rater, item_id, task))
                if response is None:
                    return raters, None
                grid[i, j] = response.value
        return raters, grid

    def summarize(self) -> dict:
        """Per-rater rates plus agreement statistics where grids are complete."""
        rates: dict[str, dict[str, float]] = {TASK_REALISM: {}, TASK_HELPFULNESS: {}}
        per_rater: dict[tuple[str, str], list[int]] = {}
        for (rater, _item, task), response in self._responses.items():
            per_rater.setdefault((rater, task), []).append(response.value)
        for (rater, task), values in per_rater.items():
            if task == TASK_REALISM:
                rates[task][rater] = float(np.mean(binarize_realism(values)))
            else:
                rates[task][rater] = float(np.mean(values))

        def average(task: str) -> float | None:
            values = list(rates[task].values())
            return float(np.mean(values)) if values else None

        summary: dict = {
            "realism_rates": dict(sorted(rates[TASK_REALISM].items())),
            "realism_avg": average(TASK_REALISM),
            "helpfulness_rates": dict(sorted(rates[TASK_HELPFULNESS].items())),
            "helpfulness_avg": average(TASK_HELPFULNESS),
            "icc_realism": None,
            "kappa_realism": None,
            "kappa_helpfulness": None,
            "agreement_notes": [],
        }

        _, realism_grid = self._task_grid(TASK_REALISM)
        if realism_grid is None:
            summary["agreement_notes"].append("realism grid incomplete")
        else:
            try:
                summary["icc_realism"] = icc_2_1(RatingMatrix(realism_grid)).icc
            except DegenerateVariance as exc:
                summary["agreement_notes"].append(f"icc: {exc}")
            binary = np.array(
                [binarize_realism(row) for row in realism_grid.astype(int)]
            )
            try:
                summary["kappa_realism"] = fleiss_kappa(
                    RatingMatrix(binary), categories=2
                ).fleiss_kappa
            except DegenerateMarginals as exc:
                summary["agreement_notes"].append(f"kappa realism: {exc}")

        _, helpful_grid = self._task_grid(TASK_HELPFULNESS)
        if helpful_grid is None:
            summary["agreement_notes"].append("helpfulness grid incomplete")
        else:
            try:
                summary["kappa_helpfulness"] = fleiss_kappa(
                    RatingMatrix(helpful_grid), categories=2
                ).fleiss_kappa
            except DegenerateMarginals as exc:
                summary["agreement_notes"].append(f"kappa helpfulness: {exc}")
        return summary


def create_app(state: StudyState):
    """FastAPI application exposing the study HTTP surface."""
    from fastapi import FastAPI, HTTPException
    from fastapi.responses import PlainTextResponse, Response as HttpResponse

    app = FastAPI(title="reader study")

    @app.get("/api/session/{rater_id}/next")
    def next_item(rater_id: str) -> dict:
        try:
            return state.next_item(rater_id)
        except UnknownRater as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.post("/api/session/{rater_id}/response")
    def submit(rater_id: str, body: dict) -> dict:
        try:
            item_id = body["item_id"]
            task = body["task"]
            value = body["value"]
        except KeyError as exc:
            raise HTTPException(status_code=422, detail=f"missing field {exc}")
        try:
            response = state.submit(rater_id, str(item_id), str(task), value)
        except UnknownRater as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except DuplicateResponse as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except OutOfRangeValue as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"ok": True, "timestamp": response.timestamp}

    @app.get("/api/export.csv", response_class=PlainTextResponse)
    def export() -> str:
        return state.export_csv()

    @app.get("/api/summary")
    def summary() -> dict:
        return state.summarize()

    @app.get("/media/{opaque_id}")
    def media(opaque_id: str):
        try:
            path = state.resolve_media(opaque_id)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown media id")
        media_type = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
        try:
            data = path.read_bytes()
        except OSError:
            raise HTTPException(status_code=404, detail="media file unavailable")
        return HttpResponse(content=data, media_type=media_type)

    return app
