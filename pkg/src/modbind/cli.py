"""Command-line entry point.

Subcommand tree: index build|search, pair quintuples|candidates|match,
annotate serve|export, train run|resume, eval retrieval|zeroshot|map|eshot,
synth world|corrupt, and query (cross-modal retrieval over mixed stores,
projecting audio/points queries through a checkpoint).

Exit codes: 0 success, 1 usage error, 2 runtime error. Heavy imports happen
inside commands so --threads can cap BLAS pools before numpy spins them up.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = str(n)


@click.group()
@click.option("--seed", type=int, default=0, show_default=True, help="Default seed for seedable subcommands.")
@click.option("--threads", type=int, default=None, help="Cap internal numeric parallelism (default: all cores).")
@click.option("--log-level", default="warning", show_default=True)
@click.pass_context
def cli(ctx, seed, threads, log_level):
    """Bind pre-embedded modalities into one space."""
    _set_threads(threads)
    logging.basicConfig(level=getattr(logging, log_level.upper(), logging.WARNING))
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed


def _echo_json(obj) -> None:
    click.echo(json.dumps(obj))


def _load_normalized(path):
    from .core import load_store

    return load_store(path, ensure_normalized=True)


def _modality(name: str):
    from .core import Modality

    try:
        return Modality(name)
    except ValueError:
        raise click.UsageError(f"unknown modality {name!r}") from None


def _parse_mod_paths(pairs: tuple[str, ...]) -> dict:
    out = {}
    for spec in pairs:
        name, _, path = spec.partition("=")
        if not path:
            raise click.UsageError(f"expected modality=path, got {spec!r}")
        out[_modality(name)] = path
    return out


# -- index --------------------------------------------------------------------


@cli.group()
def index():
    """Build and query similarity indices."""


@index.command("build")
@click.option("--store", "store_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--m", "m_links", type=int, default=32, show_default=True)
@click.option("--ef-construction", type=int, default=200, show_default=True)
@click.option("--ef-search", type=int, default=64, show_default=True)
@click.option("--index-seed", type=int, default=None, help="Defaults to the global --seed.")
@click.pass_context
def index_build(ctx, store_path, out_path, m_links, ef_construction, ef_search, index_seed):
    from .simindex import HnswConfig, build_hnsw, save_hnsw

    store = _load_normalized(store_path)
    cfg = HnswConfig(
        M=m_links,
        ef_construction=ef_construction,
        ef_search=ef_search,
        seed=ctx.obj["seed"] if index_seed is None else index_seed,
    )
    idx = build_hnsw(store, cfg)
    save_hnsw(idx, out_path)
    _echo_json({"indexed": store.count, "dim": store.dim, "out": str(out_path)})


@index.command("search")
@click.option("--store", "store_path", required=True, type=click.Path(exists=True))
@click.option("--queries", "query_path", required=True, type=click.Path(exists=True))
@click.option("--index", "index_path", type=click.Path(exists=True), default=None,
              help="HNSW blob from `index build`; exact scan when omitted.")
@click.option("--k", type=int, default=8, show_default=True)
def index_search(store_path, query_path, index_path, k):
    from .simindex import build_exact, load_hnsw, search

    store = _load_normalized(store_path)
    queries = _load_normalized(query_path)
    idx = build_exact(store) if index_path is None else load_hnsw(index_path, store)
    for qi, hits in enumerate(search(idx, queries, k)):
        _echo_json(
            {
                "query": str(queries.records[qi].id),
                "hits": [{"id": str(h.id), "score": h.score} for h in hits],
            }
        )


# -- pair ---------------------------------------------------------------------


@cli.group()
def pair():
    """Construct training pairings."""


@pair.command("quintuples")
@click.option("--captions", "captions_path", required=True, type=click.Path(exists=True))
@click.option("--pool", "pools", multiple=True, required=True, help="modality=path, one per non-text modality.")
@click.option("--view", "views", multiple=True, help="modality=path caption view for that pool's space.")
@click.option("--denylist", "denylist_path", type=click.Path(exists=True), default=None,
              help="Text file of one dataset-qualified id per line to exclude from pools.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--hnsw/--exact", default=False, show_default=True)
@click.pass_context
def pair_quintuples(ctx, captions_path, pools, views, denylist_path, out_path, hnsw):
    from .curate import apply_exclusions, build_quintuples, load_denylist, save_quintuples
    from .simindex import HnswConfig

    captions = _load_normalized(captions_path)
    pool_stores = {m: _load_normalized(p) for m, p in _parse_mod_paths(pools).items()}
    if denylist_path:
        deny = load_denylist(denylist_path)
        pool_stores = {m: apply_exclusions(s, deny) for m, s in pool_stores.items()}
    view_stores = {m: _load_normalized(p) for m, p in _parse_mod_paths(views).items()}
    cfg = HnswConfig(seed=ctx.obj["seed"]) if hnsw else None
    quintuples = build_quintuples(captions, pool_stores, cfg, view_stores or None)
    save_quintuples(quintuples, out_path)
    _echo_json({"quintuples": len(quintuples), "out": str(out_path)})


@pair.command("candidates")
@click.option("--captions", "captions_path", required=True, type=click.Path(exists=True))
@click.option("--pool", "pool_path", required=True, type=click.Path(exists=True))
@click.option("--view", "view_path", type=click.Path(exists=True), default=None)
@click.option("--denylist", "denylist_path", type=click.Path(exists=True), default=None)
@click.option("--k", type=int, default=8, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def pair_candidates(captions_path, pool_path, view_path, denylist_path, k, out_path):
    from .curate import apply_exclusions, load_denylist, save_pairs, top_k_candidates

    captions = _load_normalized(captions_path)
    pool = _load_normalized(pool_path)
    if denylist_path:
        pool = apply_exclusions(pool, load_denylist(denylist_path))
    view = _load_normalized(view_path) if view_path else None
    pairs = top_k_candidates(captions, pool, k, caption_view=view)
    save_pairs(pairs, out_path)
    _echo_json({"pairs": len(pairs), "out": str(out_path)})


@pair.command("match")
@click.option("--candidates", "cand_path", required=True, type=click.Path(exists=True))
@click.option("--k", type=int, default=8, show_default=True)
@click.option("--n", type=int, default=3, show_default=True, help="Max accepted pairs per caption.")
@click.option("--m-cap", type=int, default=1, show_default=True, help="Max accepted pairs per candidate.")
@click.option("--per-caption", type=int, default=None,
              help="Also run diversity selection, keeping this many per caption.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_context
def pair_match(ctx, cand_path, k, n, m_cap, per_caption, out_path):
    from .core import MatchConfig
    from .curate import greedy_match, load_pairs, save_pairs, save_triples, select_diverse

    pairs = load_pairs(cand_path)
    result = greedy_match(pairs, MatchConfig(k=k, n=n, m_cap=m_cap))
    if per_caption is None:
        save_pairs(result.pairs, out_path)
        _echo_json({"accepted": len(result.pairs), "out": str(out_path)})
    else:
        triples = select_diverse(result, per_caption, seed=ctx.obj["seed"])
        save_triples(triples, out_path)
        _echo_json({"accepted": len(result.pairs), "triples": len(triples), "out": str(out_path)})


# -- annotate -----------------------------------------------------------------


@cli.group()
def annotate():
    """Human-verification service and exports."""


@annotate.command("serve")
@click.option("--state-dir", required=True, type=click.Path())
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8781, show_default=True)
def annotate_serve(state_dir, host, port):
    import uvicorn

    from .annotate import AnnotationService, create_app

    service = AnnotationService(state_dir)
    app = create_app(service)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@annotate.command("export")
@click.option("--state-dir", required=True, type=click.Path(exists=True))
@click.option("--project", required=True)
@click.option("--kind", type=click.Choice(["split2", "consensus"]), required=True)
@click.option("--required", type=int, default=3, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def annotate_export(state_dir, project, kind, required, out_path):
    from .annotate import AnnotationService, ConsensusRule

    service = AnnotationService(state_dir)
    if kind == "split2":
        export = service.export_split2(project)
    else:
        export = service.export_consensus(project, ConsensusRule(required))
    with open(out_path, "w", encoding="utf-8") as f:
        for row in export["pairs"]:
            f.write(json.dumps(row) + "\n")
    summary = {k: v for k, v in export.items() if k != "pairs"}
    summary["pairs"] = len(export["pairs"])
    summary["out"] = str(out_path)
    _echo_json(summary)


# -- train ----------------------------------------------------------------------


def _load_training_config(path: str):
    from .core import Modality, load_store
    from .curate import load_quintuples
    from .train import (
        FROZEN_MODALITIES,
        PipelineConfig,
        StageData,
        StagePlan,
        TaskKey,
        records_from_labeled_pairs,
        records_from_quintuples,
    )

    cfg = json.loads(Path(path).read_text())
    base = Path(path).parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    stores = {
        Modality(name): load_store(resolve(p), ensure_normalized=True)
        for name, p in cfg["stores"].items()
    }
    epochs = cfg.get("epochs", {"S1": 2, "S2": 2, "S3": 2})
    stage_data: dict[str, StageData] = {}
    if cfg.get("s1_quintuples"):
        quintuples = load_quintuples(resolve(cfg["s1_quintuples"]))
        tasks = []
        for mod in (Modality.AUDIO, Modality.POINTS):
            tasks.append(
                (
                    TaskKey(mod, FROZEN_MODALITIES, "S1"),
                    records_from_quintuples(quintuples, mod),
                )
            )
        stage_data["S1"] = StageData(tasks)

    def labeled_stage(entries, split):
        from .core import ItemId

        tasks = []
        for entry in entries:
            frozen = Modality(entry.get("frozen", "text"))
            projected = Modality(entry["projected"])
            rows = []
            for line in resolve(entry["pairs"]).read_text().splitlines():
                if line.strip():
                    obj = json.loads(line)
                    rows.append(
                        (
                            ItemId.parse(obj["caption"]),
                            ItemId.parse(obj["candidate"]),
                            float(obj.get("p", 1.0)),
                        )
                    )
            tasks.append(
                (
                    TaskKey(projected, frozenset({frozen}), split),
                    records_from_labeled_pairs(rows, frozen),
                )
            )
        return StageData(tasks)

    if cfg.get("s2"):
        stage_data["S2"] = labeled_stage(cfg["s2"], "S2")
    if cfg.get("s3"):
        stage_data["S3"] = labeled_stage(cfg["s3"], "S3")
    plan = StagePlan(
        stages=tuple((s, int(epochs.get(s, 2))) for s in ("S1", "S2", "S3")),
        batch_size=int(cfg.get("batch_size", 256)),
        seed=int(cfg.get("seed", 0)),
    )
    return PipelineConfig(
        out_dir=resolve(cfg["out_dir"]),
        stores=stores,
        stage_data=stage_data,
        dim_hidden=int(cfg.get("dim_hidden", 2048)),
        plan=plan,
        lr0=float(cfg.get("lr0", 0.001)),
        betas=tuple(cfg.get("betas", (0.9, 0.999))),
        eps=float(cfg.get("eps", 1e-8)),
        weight_decay=float(cfg.get("weight_decay", 0.01)),
        init_seed=int(cfg.get("seed", 0)),
    )


@cli.group()
def train():
    """Staged projector training."""


@train.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def train_run(config_path):
    from .train import run_pipeline

    cfg = _load_training_config(config_path)
    written = run_pipeline(cfg)
    _echo_json({stage: str(p) for stage, p in written.items()})


@train.command("resume")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
def train_resume(config_path, ckpt_path):
    from .train import run_pipeline

    cfg = _load_training_config(config_path)
    written = run_pipeline(cfg, resume_from=ckpt_path)
    _echo_json({stage: str(p) for stage, p in written.items()})


# -- eval -----------------------------------------------------------------------


@cli.group("eval")
def eval_group():
    """Retrieval and classification metrics."""


def _parse_ks(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise click.UsageError(f"bad k list {text!r}") from None


def _config_hash(*parts) -> str:
    import hashlib

    h = hashlib.sha256()
    for part in parts:
        h.update(str(part).encode())
        h.update(b"\x00")
    return h.hexdigest()[:16]


def _echo_reports(reports, config_hash: str, extra: dict | None = None) -> None:
    for r in reports:
        obj = r.to_json()
        obj["config_hash"] = config_hash
        if extra:
            obj.update(extra)
        _echo_json(obj)


@eval_group.command("retrieval")
@click.option("--queries", "query_path", required=True, type=click.Path(exists=True))
@click.option("--gallery", "gallery_path", required=True, type=click.Path(exists=True))
@click.option("--gt", "gt_path", required=True, type=click.Path(exists=True),
              help="JSONL: {query, relevant: [...]}.")
@click.option("--k", "ks", default="1,5", show_default=True)
def eval_retrieval(query_path, gallery_path, gt_path, ks):
    from .core import ItemId
    from .evaluation import GroundTruth, retrieval_recall

    queries = _load_normalized(query_path)
    gallery = _load_normalized(gallery_path)
    relevant = {}
    for line in Path(gt_path).read_text().splitlines():
        if line.strip():
            obj = json.loads(line)
            relevant[ItemId.parse(obj["query"])] = {
                ItemId.parse(r) for r in obj["relevant"]
            }
    reports = retrieval_recall(queries, gallery, GroundTruth(relevant), _parse_ks(ks))
    _echo_reports(reports, _config_hash("retrieval", query_path, gallery_path, gt_path, ks))


@eval_group.command("zeroshot")
@click.option("--items", "items_path", required=True, type=click.Path(exists=True))
@click.option("--reps", "reps_path", required=True, type=click.Path(exists=True))
@click.option("--labels", "labels_path", required=True, type=click.Path(exists=True),
              help="JSON array of class indices aligned to item rows.")
@click.option("--k", "ks", default="1,5", show_default=True)
def eval_zeroshot(items_path, reps_path, labels_path, ks):
    import numpy as np

    from .evaluation import zeroshot_classify

    items = _load_normalized(items_path)
    reps = _load_normalized(reps_path)
    labels = np.asarray(json.loads(Path(labels_path).read_text()), dtype=np.int64)
    reports = zeroshot_classify(items, reps, labels, _parse_ks(ks))
    _echo_reports(reports, _config_hash("zeroshot", items_path, reps_path, labels_path, ks))


@eval_group.command("map")
@click.option("--scores", "scores_path", required=True, type=click.Path(exists=True),
              help=".npy items x classes score matrix.")
@click.option("--labels", "labels_path", required=True, type=click.Path(exists=True),
              help=".npy binary items x classes matrix.")
def eval_map(scores_path, labels_path):
    import numpy as np

    from .evaluation import map_multilabel

    report = map_multilabel(np.load(scores_path), np.load(labels_path))
    _echo_reports([report], _config_hash("map", scores_path, labels_path))


@eval_group.command("eshot")
@click.option("--audio", "audio_path", required=True, type=click.Path(exists=True))
@click.option("--points", "points_path", required=True, type=click.Path(exists=True))
@click.option("--audio-classes", required=True, type=click.Path(exists=True),
              help="JSON array of class names aligned to audio rows.")
@click.option("--points-classes", required=True, type=click.Path(exists=True))
@click.option("--k", "ks", default="1,5", show_default=True)
def eval_eshot(audio_path, points_path, audio_classes, points_classes, ks):
    from .evaluation import eshot_eval

    audio = _load_normalized(audio_path)
    points = _load_normalized(points_path)
    a_cls = json.loads(Path(audio_classes).read_text())
    p_cls = json.loads(Path(points_classes).read_text())
    out = eshot_eval(audio, points, a_cls, p_cls, _parse_ks(ks))
    chash = _config_hash("eshot", audio_path, points_path, audio_classes, points_classes, ks)
    for direction, reports in out.items():
        _echo_reports(reports, chash, {"direction": direction})


# -- synth ------------------------------------------------------------------------


@cli.group()
def synth():
    """Synthetic worlds with known ground truth."""


@synth.command("world")
@click.option("--concepts", "n_concepts", type=int, default=32, show_default=True)
@click.option("--dim", type=int, default=64, show_default=True)
@click.option("--items", type=int, default=4000, show_default=True)
@click.option("--sigma", type=float, default=0.05, show_default=True)
@click.option("--eval-count", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_context
def synth_world(ctx, n_concepts, dim, items, sigma, eval_count, out_dir):
    from .synth import gen_world, save_world

    bundle = gen_world(n_concepts, dim, items, sigma, ctx.obj["seed"], eval_count)
    save_world(bundle, out_dir)
    _echo_json(
        {
            "out": str(out_dir),
            "concepts": n_concepts,
            "dim": dim,
            "items": items,
            "eval_count": eval_count,
        }
    )


@synth.command("corrupt")
@click.option("--world", "world_dir", required=True, type=click.Path(exists=True))
@click.option("--quintuples", "quint_path", required=True, type=click.Path(exists=True))
@click.option("--slot", required=True, type=click.Choice(["audio", "points", "image", "video"]))
@click.option("--fraction", type=float, required=True)
@click.option("--partial-fraction", type=float, default=0.0, show_default=True)
@click.option("--out-quintuples", required=True, type=click.Path())
@click.option("--out-labels", required=True, type=click.Path())
@click.pass_context
def synth_corrupt(ctx, world_dir, quint_path, slot, fraction, partial_fraction,
                  out_quintuples, out_labels):
    from .curate import load_quintuples, save_quintuples
    from .synth import corrupt_pairs, load_world

    bundle = load_world(world_dir)
    slot_mod = _modality(slot)
    quintuples = load_quintuples(quint_path)
    corrupted, labels = corrupt_pairs(
        quintuples,
        slot_mod,
        bundle.world,
        bundle.stores[slot_mod],
        fraction,
        ctx.obj["seed"],
        partial_fraction,
        caption_view=bundle.caption_views.get(slot_mod),
    )
    save_quintuples(corrupted, out_quintuples)
    with open(out_labels, "w", encoding="utf-8") as f:
        for label in labels:
            f.write(
                json.dumps(
                    {
                        "caption": str(label.caption_id),
                        "candidate": str(label.candidate_id),
                        "p": label.p,
                    }
                )
                + "\n"
            )
    negatives = sum(1 for l in labels if l.p == 0.0)
    _echo_json({"pairs": len(labels), "negatives": negatives, "out": str(out_quintuples)})


# -- query --------------------------------------------------------------------------


@cli.command("query")
@click.option("--from", "from_path", required=True, type=click.Path(exists=True),
              help="Store holding the query items.")
@click.option("--against", required=True,
              help="Comma-separated target store paths.")
@click.option("--k", type=int, default=5, show_default=True)
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True), default=None,
              help="Projects audio/points queries into the bound space first.")
@click.option("--rows", default=None, help="Comma-separated query row subset.")
def query_cmd(from_path, against, k, ckpt_path, rows):
    """Cross-modal retrieval over a mixed database of stores."""
    import numpy as np

    from .bindnet import projector_forward
    from .core import EmbeddingStore, l2_normalize
    from .simindex import build_exact, search

    queries = _load_normalized(from_path)
    if rows:
        queries = queries.take([int(r) for r in rows.split(",")])
    if queries.modality.is_projected:
        if ckpt_path is None:
            raise click.UsageError(
                f"{queries.modality.value} queries need --checkpoint to project"
            )
        from .train import load_checkpoint

        model, _, _ = load_checkpoint(ckpt_path)
        projected = projector_forward(
            model.projectors[queries.modality], queries.data.astype(np.float64)
        )
        queries = l2_normalize(
            EmbeddingStore(
                queries.modality,
                projected.astype(np.float32),
                queries.records,
            )
        )
    for target_path in against.split(","):
        gallery = _load_normalized(target_path)
        results = search(build_exact(gallery), queries, k)
        for qi, hits in enumerate(results):
            _echo_json(
                {
                    "query": str(queries.records[qi].id),
                    "target": gallery.modality.value,
                    "hits": [
                        {
                            "id": str(h.id),
                            "score": h.score,
                            "caption": gallery.records[h.row].caption,
                        }
                        for h in hits
                    ],
                }
            )


def run(argv: list[str] | None = None) -> int:
    """Dispatch argv; returns the process exit code instead of raising."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cli.main(args=argv, standalone_mode=False, obj={})
        return 0
    except click.UsageError as e:
        e.show(file=sys.stderr)
        return 1
    except click.ClickException as e:
        e.show(file=sys.stderr)
        return 1
    except click.exceptions.Abort:
        return 1
    except SystemExit as e:  # --help and friends
        return int(e.code or 0)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
