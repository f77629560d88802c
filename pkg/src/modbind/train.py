"""Optimizer, schedule, batch assembly, and the staged S1 -> S2 -> S3
training pipeline.

Each projector trains separately: one optimizer state per projected
modality, covering its MLP parameters and its log-temperatures. The cosine
schedule anneals lr0 -> 0 over each stage's own step count. Batch shuffles
derive from (seed, stage, task, epoch) so a resumed pipeline reproduces a
straight-through run bitwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bindnet import (
    ProjectorParams,
    TemperatureSet,
    TrainBatch,
    batch_loss,
    init_projector,
)
from .core import (
    FROZEN_MODALITIES,
    PROJECTED_MODALITIES,
    EmbeddingStore,
    ItemId,
    Modality,
)
from .curate import Quintuple
from .errors import FormatError, MissingEmbedding, NonFiniteGradient

STAGES = ("S1", "S2", "S3")

_FROZEN_ORDER = (Modality.TEXT, Modality.IMAGE, Modality.VIDEO)


@dataclass
class OptimizerState:
    """AdamW moments for one projected modality's trainables."""

    m1: dict[str, np.ndarray]
    m2: dict[str, np.ndarray]
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    lr0: float = 0.001

    @classmethod
    def for_params(
        cls,
        params: dict[str, np.ndarray],
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=0.01,
        lr0=0.001,
    ) -> "OptimizerState":
        return cls(
            m1={k: np.zeros_like(v) for k, v in params.items()},
            m2={k: np.zeros_like(v) for k, v in params.items()},
            betas=tuple(betas),
            eps=eps,
            weight_decay=weight_decay,
            lr0=lr0,
        )


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


# weight decay hits projector weight matrices only, never biases or log-tau
DECAY_KEYS = frozenset({"W1", "W2"})


def adamw_step(
    state: OptimizerState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
) -> None:
    """Decoupled-weight-decay Adam update, in place, with bias correction."""
    for key, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"gradient for {key} is not finite")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for key, p in params.items():
        g = grads[key]
        m1 = state.m1[key]
        m2 = state.m2[key]
        m1 *= b1
        m1 += (1.0 - b1) * g
        m2 *= b2
        m2 += (1.0 - b2) * g * g
        if key in DECAY_KEYS and state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= lr * (m1 / c1) / (np.sqrt(m2 / c2) + state.eps)


@dataclass(frozen=True)
class TaskKey:
    projected: Modality
    frozen_set: frozenset[Modality]
    split: str

    def __post_init__(self):
        if self.projected not in PROJECTED_MODALITIES:
            raise ValueError(f"{self.projected} is not a projected modality")
        if not self.frozen_set:
            raise ValueError("frozen_set must be non-empty")
        if not self.frozen_set <= FROZEN_MODALITIES:
            raise ValueError(f"frozen_set {self.frozen_set} contains non-frozen modalities")
        if self.split not in STAGES:
            raise ValueError(f"split must be one of {STAGES}")

    @property
    def name(self) -> str:
        mods = "+".join(m.value for m in _FROZEN_ORDER if m in self.frozen_set)
        return f"{self.split}:{self.projected.value}->{mods}"


@dataclass(frozen=True)
class PairRecord:
    """One training pair: a projected item, its frozen partners, a target p."""

    projected_id: ItemId
    frozen_ids: tuple[tuple[Modality, ItemId], ...]
    p: float

    def frozen_id(self, mod: Modality) -> ItemId:
        for m, i in self.frozen_ids:
            if m is mod:
                return i
        raise KeyError(mod)


def records_from_quintuples(
    quintuples: list[Quintuple],
    projected: Modality,
    frozen_set: frozenset[Modality] = FROZEN_MODALITIES,
) -> list[PairRecord]:
    slots = {
        Modality.IMAGE: lambda q: q.image_id,
        Modality.VIDEO: lambda q: q.video_id,
        Modality.TEXT: lambda q: q.caption_id,
    }
    out = []
    for q in quintuples:
        frozen = tuple(
            (m, slots[m](q)) for m in _FROZEN_ORDER if m in frozen_set
        )
        out.append(PairRecord(q.slot(projected), frozen, 1.0))
    return out


def records_from_labeled_pairs(
    pairs: list[tuple[ItemId, ItemId, float]],
    frozen_modality: Modality = Modality.TEXT,
) -> list[PairRecord]:
    """(caption_id, candidate_id, p) rows -> single-frozen PairRecords."""
    return [
        PairRecord(cand, ((frozen_modality, cap),), float(p))
        for cap, cand, p in pairs
    ]


@dataclass
class StagePlan:
    stages: tuple[tuple[str, int], ...] = (("S1", 2), ("S2", 2), ("S3", 2))
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if tuple(s for s, _ in self.stages) != STAGES[: len(self.stages)]:
            raise ValueError("stage order is fixed as S1, S2, S3")

    def epochs_for(self, split: str) -> int:
        for s, e in self.stages:
            if s == split:
                return e
        return 0


def _epoch_rng(seed: int, split: str, task: TaskKey, epoch: int) -> np.random.Generator:
    material = [seed, STAGES.index(split), epoch]
    material.append(0 if task.projected is Modality.AUDIO else 1)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(material)))


def batches_per_epoch(n_records: int, batch_size: int) -> int:
    full, rem = divmod(n_records, batch_size)
    return full + (1 if rem >= 2 else 0)


def assemble_batches(
    records: list[PairRecord],
    stores: dict[Modality, EmbeddingStore],
    key: TaskKey,
    batch_size: int,
    seed: int,
    epoch: int,
):
    """Yield TrainBatches for one epoch: seeded shuffle, short tail dropped
    if it has fewer than 2 rows."""
    proj_store = stores.get(key.projected)
    if proj_store is None:
        raise MissingEmbedding("<store>", key.projected)
    rows_proj = []
    rows_frozen: dict[Modality, list[int]] = {m: [] for m in key.frozen_set}
    for rec in records:
        try:
            rows_proj.append(proj_store.row_of(rec.projected_id))
        except KeyError:
            raise MissingEmbedding(rec.projected_id, key.projected) from None
        for mod in key.frozen_set:
            store = stores.get(mod)
            if store is None:
                raise MissingEmbedding("<store>", mod)
            try:
                rows_frozen[mod].append(store.row_of(rec.frozen_id(mod)))
            except KeyError:
                raise MissingEmbedding(rec.frozen_id(mod), mod) from None
    rows_proj = np.array(rows_proj, dtype=np.int64)
    frozen_arr = {m: np.array(v, dtype=np.int64) for m, v in rows_frozen.items()}
    p_all = np.array([rec.p for rec in records], dtype=np.float64)
    order = _epoch_rng(seed, key.split, key, epoch).permutation(len(records))
    frozen_mods = [m for m in _FROZEN_ORDER if m in key.frozen_set]
    for start in range(0, len(records), batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < 2:
            break
        yield TrainBatch(
            projected=key.projected,
            a_in=proj_store.data[rows_proj[idx]],
            frozen=[(m, stores[m].data[frozen_arr[m][idx]]) for m in frozen_mods],
            p=p_all[idx],
        )


@dataclass
class BindModel:
    projectors: dict[Modality, ProjectorParams]
    temps: TemperatureSet

    @classmethod
    def fresh(
        cls, dim_in: int, dim_hidden: int, dim_out: int, seed: int = 0
    ) -> "BindModel":
        return cls(
            projectors={
                Modality.AUDIO: init_projector(dim_in, dim_hidden, dim_out, seed=seed),
                Modality.POINTS: init_projector(
                    dim_in, dim_hidden, dim_out, seed=seed + 1
                ),
            },
            temps=TemperatureSet.default(),
        )


def _trainables(model: BindModel, projected: Modality) -> dict[str, np.ndarray]:
    """Parameter dict for one projector, log-taus as a fixed-order vector."""
    proj = model.projectors[projected]
    d = proj.as_dict()
    d["log_tau"] = np.array(
        [model.temps.log_tau[(projected, m)] for m in _FROZEN_ORDER], dtype=np.float64
    )
    return d


def _write_back_taus(model: BindModel, projected: Modality, vec: np.ndarray) -> None:
    for i, m in enumerate(_FROZEN_ORDER):
        model.temps.log_tau[(projected, m)] = float(vec[i])


def train_stage(
    model: BindModel,
    tasks: list[tuple[TaskKey, list[PairRecord]]],
    stores: dict[Modality, EmbeddingStore],
    plan: StagePlan,
    opt_states: dict[Modality, OptimizerState],
    metrics: list[dict] | None = None,
) -> list[dict]:
    """Run one stage: round-robin over task keys per step, cosine schedule
    over each task's own total step count. Mutates model and opt_states."""
    if metrics is None:
        metrics = []
    tasks = [(k, r) for k, r in tasks if r]
    if not tasks:
        return metrics
    split = tasks[0][0].split
    epochs = plan.epochs_for(split)
    if epochs <= 0:
        return metrics
    streams = []
    for key, records in tasks:
        per_epoch = batches_per_epoch(len(records), plan.batch_size)
        total = epochs * per_epoch

        def gen(key=key, records=records):
            for epoch in range(epochs):
                yield from assemble_batches(
                    records, stores, key, plan.batch_size, plan.seed, epoch
                )

        streams.append({"key": key, "iter": gen(), "total": total, "step": 0})
    active = True
    while active:
        active = False
        for stream in streams:
            batch = next(stream["iter"], None)
            if batch is None:
                continue
            active = True
            key: TaskKey = stream["key"]
            lr = cosine_lr(stream["step"], stream["total"], opt_states[key.projected].lr0)
            params = _trainables(model, key.projected)
            loss, grads = batch_loss(
                model.projectors[key.projected], model.temps, batch
            )
            grad_dict = {
                "W1": grads.dW1,
                "b1": grads.db1,
                "W2": grads.dW2,
                "b2": grads.db2,
                "log_tau": np.array(
                    [
                        grads.dlog_tau.get((key.projected, m), 0.0)
                        for m in _FROZEN_ORDER
                    ],
                    dtype=np.float64,
                ),
            }
            adamw_step(opt_states[key.projected], params, grad_dict, lr)
            _write_back_taus(model, key.projected, params["log_tau"])
            model.temps.clamp()
            stream["step"] += 1
            metrics.append(
                {
                    "step": stream["step"],
                    "stage": split,
                    "task": key.name,
                    "loss": loss,
                    "lr": lr,
                    "tau_values": {
                        f"{key.projected.value}->{m.value}": float(
                            np.exp(model.temps.log_tau[(key.projected, m)])
                        )
                        for m in _FROZEN_ORDER
                    },
                }
            )
    return metrics


# -- checkpointing -----------------------------------------------------------

_PARAM_KEYS = ("W1", "b1", "W2", "b2")


def save_checkpoint(
    path: str | Path,
    model: BindModel,
    opt_states: dict[Modality, OptimizerState],
    stage_tag: str,
) -> None:
    if stage_tag not in STAGES:
        raise ValueError(f"stage tag must be one of {STAGES}")
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {"stage": stage_tag, "projected": [], "pairs": []}
    for mod in sorted(model.projectors, key=lambda m: m.value):
        meta["projected"].append(mod.value)
        proj = model.projectors[mod]
        for k in _PARAM_KEYS:
            arrays[f"proj_{mod.value}_{k}"] = getattr(proj, k)
    for (p, f), lt in sorted(
        model.temps.log_tau.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value)
    ):
        meta["pairs"].append([p.value, f.value])
        arrays[f"temp_{p.value}_{f.value}"] = np.float64(lt)
    for mod, state in sorted(opt_states.items(), key=lambda kv: kv[0].value):
        tag = mod.value
        arrays[f"opt_{tag}_step"] = np.int64(state.step)
        arrays[f"opt_{tag}_hyper"] = np.array(
            [state.betas[0], state.betas[1], state.eps, state.weight_decay, state.lr0]
        )
        for k in state.m1:
            arrays[f"opt_{tag}_m1_{k}"] = state.m1[k]
            arrays[f"opt_{tag}_m2_{k}"] = state.m2[k]
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(
    path: str | Path,
) -> tuple[BindModel, dict[Modality, OptimizerState], str]:
    try:
        blob = np.load(path)
    except (OSError, ValueError) as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from e
    with blob:
        try:
            meta = json.loads(bytes(blob["meta"]).decode())
        except KeyError:
            raise FormatError(f"{path} is not a checkpoint (no meta)") from None
        projectors = {}
        for mod_name in meta["projected"]:
            mod = Modality(mod_name)
            projectors[mod] = ProjectorParams(
                *(blob[f"proj_{mod_name}_{k}"].copy() for k in _PARAM_KEYS)
            )
        log_tau = {}
        for p_name, f_name in meta["pairs"]:
            log_tau[(Modality(p_name), Modality(f_name))] = float(
                blob[f"temp_{p_name}_{f_name}"]
            )
        model = BindModel(projectors, TemperatureSet(log_tau))
        opt_states = {}
        for mod in projectors:
            tag = mod.value
            hyper = blob[f"opt_{tag}_hyper"]
            keys = list(_PARAM_KEYS) + ["log_tau"]
            opt_states[mod] = OptimizerState(
                m1={k: blob[f"opt_{tag}_m1_{k}"].copy() for k in keys},
                m2={k: blob[f"opt_{tag}_m2_{k}"].copy() for k in keys},
                step=int(blob[f"opt_{tag}_step"]),
                betas=(float(hyper[0]), float(hyper[1])),
                eps=float(hyper[2]),
                weight_decay=float(hyper[3]),
                lr0=float(hyper[4]),
            )
        return model, opt_states, meta["stage"]


# -- pipeline ----------------------------------------------------------------


@dataclass
class StageData:
    """Per-stage task list: (task key, records) pairs."""

    tasks: list[tuple[TaskKey, list[PairRecord]]] = field(default_factory=list)


@dataclass
class PipelineConfig:
    out_dir: Path
    stores: dict[Modality, EmbeddingStore]
    stage_data: dict[str, StageData]
    dim_hidden: int = 2048
    plan: StagePlan = field(default_factory=StagePlan)
    lr0: float = 0.001
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    init_seed: int = 0


def _fresh_opt_states(model: BindModel, cfg: PipelineConfig) -> dict[Modality, OptimizerState]:
    return {
        mod: OptimizerState.for_params(
            _trainables(model, mod),
            betas=cfg.betas,
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
            lr0=cfg.lr0,
        )
        for mod in model.projectors
    }


def checkpoint_path(out_dir: str | Path, stage: str) -> Path:
    return Path(out_dir) / f"checkpoint_{stage.lower()}.npz"


def run_pipeline(
    cfg: PipelineConfig, resume_from: str | Path | None = None
) -> dict[str, Path]:
    """Sequential S1 -> S2 -> S3 training; a tagged checkpoint after each
    stage. Resuming from a stage's checkpoint reruns only the later stages
    and reproduces a straight-through run bitwise."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        model, opt_states, done_tag = load_checkpoint(resume_from)
        start = STAGES.index(done_tag) + 1
    else:
        some_store = next(iter(cfg.stores.values()))
        dim = some_store.dim
        model = BindModel.fresh(dim, cfg.dim_hidden, dim, seed=cfg.init_seed)
        opt_states = _fresh_opt_states(model, cfg)
        start = 0
    metrics: list[dict] = []
    written: dict[str, Path] = {}
    for stage in STAGES[start:]:
        data = cfg.stage_data.get(stage, StageData())
        train_stage(model, data.tasks, cfg.stores, cfg.plan, opt_states, metrics)
        path = checkpoint_path(out, stage)
        save_checkpoint(path, model, opt_states, stage)
        written[stage] = path
    mode = "a" if resume_from is not None else "w"
    with open(out / "metrics.jsonl", mode, encoding="utf-8") as f:
        for entry in metrics:
            f.write(json.dumps(entry) + "\n")
    return written
