"""Human-verification service: randomized candidate triples served to
annotators, an append-only label log, and the two exports that feed training
(labeled pairs) and benchmarking (3-way consensus pairs).

Every export is a pure function of the project definitions plus the label
log, so replaying the log reproduces exports byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .core import ItemId
from .curate import CandidateTriple
from .errors import (
    DuplicateLabel,
    DuplicateProject,
    ForeignCandidate,
    UnknownProject,
    UnknownTask,
)

LEASE_TIMEOUT_S = 30 * 60


class Verdict(Enum):
    POSITIVE = "positive"
    PARTIAL = "partial"
    NEGATIVE = "negative"

    @property
    def p(self) -> float:
        return {"positive": 1.0, "partial": 0.5, "negative": 0.0}[self.value]


@dataclass(frozen=True)
class AnnotationTask:
    task_id: str
    project: str
    caption_id: ItemId
    caption_text: str
    candidates: tuple[tuple[ItemId, str | None], ...]  # display order, fixed

    def candidate_ids(self) -> set[ItemId]:
        return {c for c, _ in self.candidates}

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "project": self.project,
            "caption_id": str(self.caption_id),
            "caption_text": self.caption_text,
            "candidates": [
                {"id": str(c), "uri": uri} for c, uri in self.candidates
            ],
        }


@dataclass(frozen=True)
class AnnotationLabel:
    task_id: str
    candidate_id: ItemId
    verdict: Verdict
    annotator_id: str
    timestamp_ms: int

    @property
    def key(self) -> tuple[str, ItemId, str]:
        return (self.task_id, self.candidate_id, self.annotator_id)

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "candidate_id": str(self.candidate_id),
            "verdict": self.verdict.value,
            "annotator_id": self.annotator_id,
            "timestamp_ms": self.timestamp_ms,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AnnotationLabel":
        return cls(
            task_id=obj["task_id"],
            candidate_id=ItemId.parse(obj["candidate_id"]),
            verdict=Verdict(obj["verdict"]),
            annotator_id=obj["annotator_id"],
            timestamp_ms=int(obj["timestamp_ms"]),
        )


@dataclass(frozen=True)
class ConsensusRule:
    required_annotators: int = 3


@dataclass
class Project:
    name: str
    input_hash: str
    seed: int
    required_annotators: int
    tasks: list[AnnotationTask]

    @property
    def consensus_mode(self) -> bool:
        return self.required_annotators > 1

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "input_hash": self.input_hash,
            "seed": self.seed,
            "required_annotators": self.required_annotators,
            "tasks": [t.to_json() for t in self.tasks],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Project":
        tasks = [
            AnnotationTask(
                task_id=t["task_id"],
                project=t["project"],
                caption_id=ItemId.parse(t["caption_id"]),
                caption_text=t["caption_text"],
                candidates=tuple(
                    (ItemId.parse(c["id"]), c["uri"]) for c in t["candidates"]
                ),
            )
            for t in obj["tasks"]
        ]
        return cls(
            obj["name"], obj["input_hash"], obj["seed"],
            obj["required_annotators"], tasks,
        )


def _triples_hash(triples: list[CandidateTriple], seed: int, captions: dict) -> str:
    h = hashlib.sha256()
    h.update(str(seed).encode())
    for t in triples:
        h.update(str(t.caption_id).encode())
        h.update(captions.get(t.caption_id, "").encode())
        for c in t.candidate_ids:
            h.update(str(c).encode())
    return h.hexdigest()


def _task_id(project: str, caption: ItemId, candidates: tuple[ItemId, ...]) -> str:
    h = hashlib.sha1()
    h.update(project.encode())
    h.update(str(caption).encode())
    for c in candidates:
        h.update(str(c).encode())
    return h.hexdigest()[:16]


class AnnotationService:
    """Projects, leases, and the append-only label log.

    State directory layout: one ``<project>.project.json`` per project plus a
    single ``labels.jsonl`` log, fsynced per accepted batch. Restart replays
    both.
    """

    def __init__(self, state_dir: str | Path):
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        # single-writer discipline: HTTP handlers run on a thread pool, so
        # every state mutation and every export snapshot takes this lock
        self._lock = threading.RLock()
        self.projects: dict[str, Project] = {}
        self.labels: list[AnnotationLabel] = []
        self._label_keys: dict[tuple, Verdict] = {}
        # task_id -> annotator -> labeled candidate ids
        self._by_task: dict[str, dict[str, set[ItemId]]] = {}
        self._leases: dict[tuple[str, str], float] = {}  # (task, annotator) -> expiry
        self._log_path = self.state_dir / "labels.jsonl"
        self._replay()

    # -- persistence ---------------------------------------------------------

    def _replay(self) -> None:
        for path in sorted(self.state_dir.glob("*.project.json")):
            project = Project.from_json(json.loads(path.read_text()))
            self.projects[project.name] = project
        if self._log_path.exists():
            for line in self._log_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    self._index_label(AnnotationLabel.from_json(json.loads(line)))

    def _index_label(self, label: AnnotationLabel) -> None:
        self.labels.append(label)
        self._label_keys[label.key] = label.verdict
        self._by_task.setdefault(label.task_id, {}).setdefault(
            label.annotator_id, set()
        ).add(label.candidate_id)

    def _append_labels(self, labels: list[AnnotationLabel]) -> None:
        with open(self._log_path, "a", encoding="utf-8") as f:
            for label in labels:
                f.write(json.dumps(label.to_json()) + "\n")
            f.flush()
            import os

            os.fsync(f.fileno())

    # -- projects ------------------------------------------------------------

    def create_project(
        self,
        name: str,
        triples: list[CandidateTriple],
        seed: int,
        captions: dict[ItemId, str] | None = None,
        required_annotators: int = 1,
    ) -> Project:
        """Materialize tasks with a seeded display shuffle.

        Idempotent per (name, input hash); a name collision with different
        inputs is an error.
        """
        if not name or not all(c.isalnum() or c in "-_." for c in name):
            raise ValueError(f"project name {name!r} must be alphanumeric/-_.")
        captions = captions or {}
        with self._lock:
            return self._create_project_locked(
                name, triples, seed, captions, required_annotators
            )

    def _create_project_locked(self, name, triples, seed, captions, required_annotators):
        input_hash = _triples_hash(triples, seed, captions)
        existing = self.projects.get(name)
        if existing is not None:
            if existing.input_hash == input_hash:
                return existing
            raise DuplicateProject(f"project {name!r} exists with different inputs")
        rng = np.random.Generator(np.random.PCG64(seed))
        tasks = []
        for t in triples:
            order = rng.permutation(len(t.candidate_ids))
            candidates = tuple(
                (t.candidate_ids[i], f"media/{t.candidate_ids[i]}") for i in order
            )
            tasks.append(
                AnnotationTask(
                    task_id=_task_id(name, t.caption_id, tuple(c for c, _ in candidates)),
                    project=name,
                    caption_id=t.caption_id,
                    caption_text=captions.get(t.caption_id, str(t.caption_id)),
                    candidates=candidates,
                )
            )
        project = Project(name, input_hash, seed, required_annotators, tasks)
        self.projects[name] = project
        path = self.state_dir / f"{name}.project.json"
        path.write_text(json.dumps(project.to_json(), indent=2))
        return project

    def _project(self, name: str) -> Project:
        try:
            return self.projects[name]
        except KeyError:
            raise UnknownProject(name) from None

    # -- task serving --------------------------------------------------------

    def _full_annotators(self, task: AnnotationTask) -> set[str]:
        """Annotators who labeled every candidate of the task."""
        per_annotator = self._by_task.get(task.task_id, {})
        want = task.candidate_ids()
        return {a for a, got in per_annotator.items() if got >= want}

    def next_tasks(
        self, project_name: str, annotator_id: str, limit: int, now: float | None = None
    ) -> list[AnnotationTask]:
        with self._lock:
            return self._next_tasks_locked(project_name, annotator_id, limit, now)

    def _next_tasks_locked(self, project_name, annotator_id, limit, now):
        project = self._project(project_name)
        now = time.monotonic() if now is None else now
        out = []
        for task in project.tasks:
            if len(out) >= limit:
                break
            full = self._full_annotators(task)
            if annotator_id in full:
                continue
            if len(full) >= project.required_annotators and annotator_id not in full:
                continue
            lease = self._leases.get((task.task_id, annotator_id))
            if lease is not None and lease > now:
                continue
            self._leases[(task.task_id, annotator_id)] = now + LEASE_TIMEOUT_S
            out.append(task)
        return out

    # -- labels ---------------------------------------------------------------

    def submit_labels(self, labels: list[AnnotationLabel]) -> int:
        """Append new labels; identical resubmissions are skipped idempotently,
        conflicting verdicts for an existing (task, candidate, annotator) key
        are rejected."""
        with self._lock:
            return self._submit_labels_locked(labels)

    def _submit_labels_locked(self, labels: list[AnnotationLabel]) -> int:
        tasks_by_id = {
            t.task_id: t for p in self.projects.values() for t in p.tasks
        }
        fresh: list[AnnotationLabel] = []
        batch_keys: dict[tuple, Verdict] = {}
        for label in labels:
            task = tasks_by_id.get(label.task_id)
            if task is None:
                raise UnknownTask(label.task_id)
            if label.candidate_id not in task.candidate_ids():
                raise ForeignCandidate(
                    f"{label.candidate_id} does not belong to task {label.task_id}"
                )
            seen = self._label_keys.get(label.key, batch_keys.get(label.key))
            if seen is not None:
                if seen != label.verdict:
                    raise DuplicateLabel(
                        f"conflicting verdict for {label.key}: {seen.value} vs {label.verdict.value}"
                    )
                continue
            project = self.projects[task.project]
            full = self._full_annotators(task)
            started = label.annotator_id in self._by_task.get(label.task_id, {})
            if (
                not started
                and label.annotator_id not in full
                and len(full) >= project.required_annotators
            ):
                # annotator cap reached; serving already gates this, reject
                # direct submissions beyond it
                raise DuplicateLabel(
                    f"task {label.task_id} already has "
                    f"{project.required_annotators} annotators"
                )
            batch_keys[label.key] = label.verdict
            fresh.append(label)
        if fresh:
            self._append_labels(fresh)
            for label in fresh:
                self._index_label(label)
                self._leases.pop((label.task_id, label.annotator_id), None)
        return len(fresh)

    # -- exports ---------------------------------------------------------------

    def _labels_for(self, project: Project) -> list[AnnotationLabel]:
        ids = {t.task_id for t in project.tasks}
        return [l for l in self.labels if l.task_id in ids]

    def export_split2(self, project_name: str) -> dict:
        """Labeled (caption, candidate, p) pairs: latest label per annotator,
        minimum p across annotators when several labeled the same pair."""
        with self._lock:
            return self._export_split2_locked(project_name)

    def _export_split2_locked(self, project_name: str) -> dict:
        project = self._project(project_name)
        task_of = {t.task_id: t for t in project.tasks}
        latest: dict[tuple, AnnotationLabel] = {}
        for label in self._labels_for(project):
            prev = latest.get(label.key)
            if prev is None or label.timestamp_ms >= prev.timestamp_ms:
                latest[label.key] = label
        per_pair: dict[tuple[ItemId, ItemId], list[AnnotationLabel]] = {}
        for label in latest.values():
            task = task_of[label.task_id]
            per_pair.setdefault((task.caption_id, label.candidate_id), []).append(label)
        pairs = []
        counts = {v.value: 0 for v in Verdict}
        for (caption, candidate), group in sorted(
            per_pair.items(), key=lambda kv: (kv[0][0], kv[0][1])
        ):
            chosen = min(group, key=lambda l: l.verdict.p)
            counts[chosen.verdict.value] += 1
            pairs.append(
                {"caption": str(caption), "candidate": str(candidate), "p": chosen.verdict.p}
            )
        return {"project": project_name, "pairs": pairs, "verdict_counts": counts}

    def export_consensus(
        self, project_name: str, rule: ConsensusRule = ConsensusRule()
    ) -> dict:
        """Pairs unanimously labeled positive by >= required distinct
        annotators; any other verdict on the pair excludes it."""
        with self._lock:
            return self._export_consensus_locked(project_name, rule)

    def _export_consensus_locked(self, project_name: str, rule: ConsensusRule) -> dict:
        project = self._project(project_name)
        task_of = {t.task_id: t for t in project.tasks}
        votes: dict[tuple[ItemId, ItemId], list[AnnotationLabel]] = {}
        for label in self._labels_for(project):
            task = task_of[label.task_id]
            votes.setdefault((task.caption_id, label.candidate_id), []).append(label)
        pairs = []
        for (caption, candidate), group in sorted(
            votes.items(), key=lambda kv: (kv[0][0], kv[0][1])
        ):
            annotators = {l.annotator_id for l in group}
            unanimous = all(l.verdict is Verdict.POSITIVE for l in group)
            if unanimous and len(annotators) >= rule.required_annotators:
                pairs.append({"caption": str(caption), "candidate": str(candidate)})
        return {
            "project": project_name,
            "required_annotators": rule.required_annotators,
            "pairs": pairs,
        }


def split2_pairs_as_records(export: dict) -> list[tuple[ItemId, ItemId, float]]:
    """Export rows -> (caption_id, candidate_id, p) tuples for training."""
    return [
        (ItemId.parse(row["caption"]), ItemId.parse(row["candidate"]), float(row["p"]))
        for row in export["pairs"]
    ]


# -- HTTP wrapper -------------------------------------------------------------


def create_app(service: AnnotationService):
    """FastAPI app exposing the service; errors surface as {code, message}."""
    from fastapi import FastAPI, Request
    from fastapi.middleware.cors import CORSMiddleware
    from fastapi.responses import JSONResponse

    app = FastAPI(title="modbind annotation service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    status_of = {
        UnknownProject: 404,
        UnknownTask: 404,
        ForeignCandidate: 400,
        DuplicateLabel: 409,
        DuplicateProject: 409,
    }

    @app.exception_handler(Exception)
    async def handle(request: Request, exc: Exception):
        for etype, status in status_of.items():
            if isinstance(exc, etype):
                return JSONResponse(
                    status_code=status,
                    content={"code": etype.__name__, "message": str(exc)},
                )
        return JSONResponse(
            status_code=500, content={"code": "internal", "message": str(exc)}
        )

    @app.get("/api/health")
    def health():
        return {"status": "ok", "projects": len(service.projects)}

    @app.get("/api/projects")
    def list_projects():
        return [
            {
                "name": p.name,
                "tasks": len(p.tasks),
                "required_annotators": p.required_annotators,
            }
            for p in service.projects.values()
        ]

    @app.post("/api/projects")
    def create_project(body: dict):
        triples = [
            CandidateTriple(
                ItemId.parse(t["caption"]),
                tuple(ItemId.parse(c) for c in t["candidates"]),
                tuple(float(s) for s in t.get("scores", [0.0] * len(t["candidates"]))),
            )
            for t in body["triples"]
        ]
        captions = {
            ItemId.parse(t["caption"]): t.get("caption_text", t["caption"])
            for t in body["triples"]
        }
        project = service.create_project(
            body["name"],
            triples,
            seed=int(body.get("seed", 0)),
            captions=captions,
            required_annotators=int(body.get("required_annotators", 1)),
        )
        return {"name": project.name, "tasks": len(project.tasks)}

    @app.get("/api/projects/{name}/tasks")
    def tasks(name: str, annotator: str, limit: int = 10):
        return [t.to_json() for t in service.next_tasks(name, annotator, limit)]

    @app.post("/api/labels")
    def submit(body: list[dict]):
        labels = []
        for obj in body:
            labels.append(
                AnnotationLabel(
                    task_id=obj["task_id"],
                    candidate_id=ItemId.parse(obj["candidate_id"]),
                    verdict=Verdict(obj["verdict"]),
                    annotator_id=obj["annotator_id"],
                    timestamp_ms=int(obj.get("timestamp_ms", time.time() * 1000)),
                )
            )
        return {"accepted": service.submit_labels(labels)}

    @app.get("/api/projects/{name}/export/split2")
    def export_split2(name: str):
        return service.export_split2(name)

    @app.get("/api/projects/{name}/export/consensus")
    def export_consensus(name: str, required: int = 3):
        return service.export_consensus(name, ConsensusRule(required))

    return app
