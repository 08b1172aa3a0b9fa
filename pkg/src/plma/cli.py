"""``plma`` command line: tokenizer, splits, training, ranking and the report commands.

Exit codes: 0 success, 2 input or validation error, 3 runtime failure.
``PLMA_THREADS`` caps worker threads for the numeric libraries.
"""

from __future__ import annotations

import os
import sys

_threads = os.environ.get("PLMA_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import hashlib  # noqa: E402
import logging  # noqa: E402
import warnings  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import config as cfgmod  # noqa: E402
from .checkpoint import Checkpoint, CheckpointError, atomic_write_text, load_checkpoint, save_checkpoint  # noqa: E402
from .data import DatasetError, LabCatalog, parse_dataset, write_csv  # noqa: E402
from .evaluation import (few_shot_protocol, mutation_robustness, one_shot_quantiles, rank_many,  # noqa: E402
                         top_k_accuracy)
from .grouping import group_lab_sequences, make_cv_folds, read_split, split_grouped, write_split  # noqa: E402
from .interpret import (elbow_scores, embedding_rows, export_embeddings, furthest_lab, kmeans,  # noqa: E402
                        lab_token_importance, normalize_nti, nti_difference, top_tokens)
from .model import AttributionModel, lab_matrix  # noqa: E402
from .reports import FULL_CORPUS_REFERENCE, provenance_lines, render_csv  # noqa: E402
from .tokenizer import BpeModel, bpe_train  # noqa: E402
from .training import METRICS_COLUMNS, TrainingDiverged, fit  # noqa: E402

log = logging.getLogger("plma")


class UsageError(ValueError):
    """Bad combination of inputs; reported with exit code 2."""


INPUT_ERRORS = (UsageError, cfgmod.ConfigError, DatasetError, CheckpointError, FileNotFoundError, ValueError,
                KeyError)


# ---------------------------------------------------------------------------
# helpers


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_data(path, sidecar=None, strict: bool = False):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input file not found: {p}")
    ds = parse_dataset(p, sidecar=sidecar)
    for rej in ds.rejected:
        print(f"{p}: rejected {rej}", file=sys.stderr)
    if strict and ds.rejected:
        raise DatasetError(f"{p}: {len(ds.rejected)} record(s) rejected")
    return ds


def _load_ckpt(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    ckpt = load_checkpoint(p)
    return ckpt, BpeModel.from_text(ckpt.tokenizer), LabCatalog(list(ckpt.labs)), _sha(p)


def _int_list(text: str) -> list[int]:
    return list(cfgmod.parse_kernel_sizes(text)) if text.strip() != "0" else [0]


def _emit(path, header, rows, run: dict, sha=None, notes=()) -> None:
    atomic_write_text(path, render_csv(header, rows, provenance_lines(run, sha, notes)))


def _args_dict(args) -> dict:
    """Resolved command options; output paths are left out so reports do not depend on where they go."""
    return {k: v for k, v in sorted(vars(args).items())
            if k not in ("func", "verbose", "metrics") and not k.endswith("out")}


def _truth_pairs(records, catalog: LabCatalog):
    keep, truths, skipped = [], [], 0
    for r in records:
        if r.lab_id in catalog.index:
            keep.append(r)
            truths.append(catalog.index[r.lab_id])
        else:
            skipped += 1
    if skipped:
        warnings.warn(f"{skipped} record(s) belong to labs absent from the checkpoint and were skipped",
                      stacklevel=2)
    return keep, truths


# ---------------------------------------------------------------------------
# commands


def cmd_bpe_train(args) -> None:
    ds = _load_data(args.data, args.sidecar)
    records = ds.records
    if args.split:
        plan = read_split(args.split)
        records = [r for r in records if plan.assignment.get(r.sequence_id) == "train"]
    if not records:
        raise UsageError("no sequences to train the tokenizer on")
    bpe = bpe_train([r.sequence for r in records], target_vocab=args.vocab)
    atomic_write_text(args.out, bpe.to_text())


def cmd_split(args) -> None:
    ds = _load_data(args.data, args.sidecar)
    threshold = float(args.threshold) if "." in args.threshold else int(args.threshold)
    groups = group_lab_sequences(ds.records, threshold)
    test_ids = [r.sequence_id for r in ds.records if r.split == "test"]
    plan = split_grouped(groups, args.val_frac, seed=args.seed, test_ids=test_ids)
    folds = make_cv_folds(groups, args.folds, seed=args.seed, test_ids=test_ids) if args.folds > 1 else ()
    write_split(args.out, plan, folds, order=[r.sequence_id for r in ds.records])


def _train_config(args):
    over = {k: getattr(args, k) for k in ("head", "epochs", "batch_size", "max_lr", "seed", "margin", "filters",
                                         "metric_dim", "embed_dim", "kernel_sizes", "dropout", "precision")}
    return cfgmod.load_config(args.config, **over)


def cmd_train(args) -> None:
    cfg = _train_config(args)
    ds = _load_data(args.data, args.sidecar)
    plan = read_split(args.split, fold=args.fold)
    bpe = BpeModel.load(args.bpe)
    used = [r for r in ds.records if plan.assignment.get(r.sequence_id) in ("train", "validation")]
    if not used:
        raise UsageError("split selects no training or validation records")
    catalog = LabCatalog.from_records(used)
    dtype = np.float64 if cfg.precision == "float64" else np.float32
    model = AttributionModel.initialize(cfg.encoder_config(bpe.vocab_size, len(catalog)), seed=cfg.seed,
                                        dtype=dtype)

    def progress(m):
        log.info("epoch %d train_loss %.4f val_loss %.4f top1 %.3f top10 %.3f", m.epoch, m.train_loss,
                 m.val_loss, m.val_top1, m.val_top10)

    try:
        result = fit(model, used, plan, bpe, catalog, cfg, progress=progress)
    except TrainingDiverged as exc:
        raise RuntimeError(str(exc)) from exc
    run = {"config": cfg.to_dict(), "best_epoch": result.best_epoch, "fold": args.fold,
           "data_sha256": _sha(args.data), "split_sha256": _sha(args.split), "bpe_sha256": _sha(args.bpe)}
    sha = save_checkpoint(args.out, Checkpoint(result.model, list(catalog.labs), bpe.to_text(), run))
    metrics_path = args.metrics or f"{args.out}.metrics.csv"
    rows = [[getattr(m, c) for c in METRICS_COLUMNS] for m in result.log]
    _emit(metrics_path, METRICS_COLUMNS, rows, cfg.to_dict(), sha)


def cmd_rank(args) -> None:
    ckpt, bpe, catalog, sha = _load_ckpt(args.checkpoint)
    ds = _load_data(args.query, args.sidecar, strict=True)
    if not ds.records:
        raise UsageError("no query sequences")
    top = min(args.top, len(catalog))
    results = rank_many(ckpt.model, ds.records, bpe, tta_rounds=args.tta)
    rows = [[res.sequence_id, pos + 1, catalog.labs[lab], sim]
            for res in results for pos, (lab, sim) in enumerate(res.entries[:top])]
    _emit(args.out, ["sequence_id", "rank", "lab_id", "similarity"], rows, _args_dict(args), sha)


def cmd_eval(args) -> None:
    ckpt, bpe, catalog, sha = _load_ckpt(args.checkpoint)
    ds = _load_data(args.data, args.sidecar)
    if args.split:
        plan = read_split(args.split)
        chosen = [r for r in ds.records if plan.assignment.get(r.sequence_id) == args.which]
    else:
        chosen = [r for r in ds.records if (r.split or "") == args.which] if args.which == "test" else ds.records
    records, truths = _truth_pairs(chosen, catalog)
    if not records:
        raise UsageError(f"no {args.which} records to evaluate")
    results = rank_many(ckpt.model, records, bpe, tta_rounds=args.tta)
    positions = [res.position_of(t) for res, t in zip(results, truths)]
    rows = [["n", len(records)], ["top1", top_k_accuracy(results, truths, 1)],
            ["top10", top_k_accuracy(results, truths, 10)]]
    rows += [[f"rank_q{q}", v] for q, v in one_shot_quantiles(positions).items()]
    notes = [f"reference_top10_{ckpt.model.head}: {FULL_CORPUS_REFERENCE['top10_' + ckpt.model.head]} "
             "(full corpus, not reproduced here)"]
    _emit(args.out, ["metric", "value"], rows, _args_dict(args), sha, notes)
    if args.ranks_out:
        rank_rows = [[r.sequence_id, r.lab_id, p] for r, p in zip(records, positions)]
        _emit(args.ranks_out, ["sequence_id", "lab_id", "true_rank"], rank_rows, _args_dict(args), sha)


def cmd_fewshot(args) -> None:
    ckpt, bpe, catalog, sha = _load_ckpt(args.checkpoint)
    if ckpt.model.head != "triplet":
        raise UsageError("fewshot needs a triplet checkpoint")
    ds = _load_data(args.data, args.sidecar)
    if args.heldout:
        heldout = [s for s in args.heldout.split(",") if s]
    else:
        heldout = sorted({r.lab_id for r in ds.records} - set(catalog.labs))
        if not heldout:
            raise UsageError("no held-out labs: pass --heldout or data with labs unseen by the checkpoint")
    missing = [lab for lab in heldout if not any(r.lab_id == lab for r in ds.records)]
    if missing:
        raise UsageError(f"held-out labs without plasmids: {', '.join(missing)}")
    sample = float(args.samples) if "." in args.samples else int(args.samples)
    report = few_shot_protocol(ckpt.model, ds.records, catalog, bpe, heldout, sample, args.repetitions,
                               seed=args.seed, aggregate=args.aggregate, tta_rounds=args.tta)
    rows = [[i, v] for i, v in enumerate(report.top10)] + [["mean", report.mean], ["std", report.std]]
    notes = [f"heldout_labs: {','.join(report.heldout_labs)}",
             f"rank_quantiles: {one_shot_quantiles(report.positions) if report.positions else {}}",
             f"reference_one_shot_top10: {FULL_CORPUS_REFERENCE['one_shot_top10']} (full corpus, not reproduced here)"]
    _emit(args.out, ["repetition", "top10_accuracy"], rows, _args_dict(args), sha, notes)


def cmd_mutate(args) -> None:
    ckpt, bpe, catalog, sha = _load_ckpt(args.checkpoint)
    ds = _load_data(args.data, args.sidecar)
    by_id = {r.sequence_id: r for r in ds.records}
    if args.id not in by_id:
        raise UsageError(f"sequence {args.id!r} not in {args.data}")
    rec = by_id[args.id]
    if rec.lab_id not in catalog.index:
        raise UsageError(f"lab {rec.lab_id!r} unknown to the checkpoint")
    n_list = _int_list(args.n)
    rows = mutation_robustness(ckpt.model, rec, bpe, catalog.index[rec.lab_id], n_list, args.runs,
                               seed=args.seed, tta_rounds=args.tta)
    _emit(args.out, ["n", "mean_rank", "median_rank"], [[r.n, r.mean_rank, r.median_rank] for r in rows],
          _args_dict(args), sha)


def cmd_explain(args) -> None:
    ckpt, bpe, catalog, sha = _load_ckpt(args.checkpoint)
    ds = _load_data(args.data, args.sidecar)
    model = ckpt.model
    lab_records = [r for r in ds.records if r.lab_id == args.lab]
    if not lab_records:
        raise UsageError(f"no sequences for lab {args.lab!r}")
    pool = ds.records
    if args.split:
        plan = read_split(args.split)
        pool = [r for r in ds.records if plan.assignment.get(r.sequence_id) == "validation"] or ds.records
    target = catalog.index[args.target_lab] if args.target_lab else None
    lab_imp = lab_token_importance(model, lab_records, bpe, target)
    lab_nti = normalize_nti(lab_imp)
    global_nti = normalize_nti(lab_token_importance(model, pool, bpe, target))
    diff = nti_difference(lab_nti, global_nti)
    notes = [f"lab: {args.lab}"]
    if model.head == "triplet" and args.lab in catalog.index and len(catalog) > 1:
        notes.append(f"furthest_lab: {catalog.labs[furthest_lab(model, catalog.index[args.lab])]}")
    run = _args_dict(args)
    _emit(args.out, ["token_id", "importance", "nti"],
          [[i, float(lab_imp[i]), float(lab_nti[i])] for i in range(len(lab_imp))], run, sha, notes)
    top_path = args.top_out or f"{args.out}.top30.csv"
    best = [i for i in top_tokens(diff, 30) if diff[i] > 0]
    token = lambda i: bpe.vocab[i] if i < len(bpe.vocab) else ""  # noqa: E731
    _emit(top_path, ["rank", "token_id", "token", "lab_nti", "global_nti", "difference"],
          [[n + 1, i, token(i), float(lab_nti[i]), float(global_nti[i]), float(diff[i])]
           for n, i in enumerate(best)], run, sha, notes)


def cmd_cluster(args) -> None:
    ckpt, _, catalog, sha = _load_ckpt(args.checkpoint)
    if ckpt.model.head != "triplet":
        raise UsageError("cluster needs a triplet checkpoint (lab embeddings)")
    points = lab_matrix(ckpt.model)
    k_max = min(args.k_max, points.shape[0])
    if k_max < args.k_min:
        raise UsageError(f"{points.shape[0]} labs cannot fill k={args.k_min}")
    table = elbow_scores(points, range(args.k_min, k_max + 1), seed=args.seed)
    notes = [f"reference_elbow_k: {FULL_CORPUS_REFERENCE['elbow_k']} (full corpus, not reproduced here)"]
    _emit(args.out, ["k", "distortion"], table, _args_dict(args), sha, notes)
    if args.assign_k:
        res = kmeans(points, args.assign_k, seed=args.seed)
        _emit(args.assign_out or f"{args.out}.assign.csv", ["lab_id", "cluster"],
              [[lab, int(c)] for lab, c in zip(catalog.labs, res.labels)], _args_dict(args), sha)


def cmd_export(args) -> None:
    ckpt, bpe, catalog, sha = _load_ckpt(args.checkpoint)
    records = _load_data(args.data, args.sidecar).records if args.data else []
    rows = embedding_rows(ckpt.model, records, bpe, include_labs=True, labs=catalog.labs)
    export_embeddings(args.out, rows, provenance_lines(_args_dict(args), sha))


def cmd_synth(args) -> None:
    from .synthetic import make_motif_dataset

    records, _ = make_motif_dataset(args.labs, args.per_lab, args.motif_len, args.backbone_len, seed=args.seed)
    if args.test_frac > 0:
        rng = np.random.default_rng([args.seed, 7])
        test = set(rng.permutation(len(records))[: int(round(args.test_frac * len(records)))].tolist())
        records = [replace(r, split="test" if i in test else None) for i, r in enumerate(records)]
    write_csv(records, args.out)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plma", description="Lab-of-origin attribution for plasmid sequences.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp, name="data"):
        sp.add_argument(name)
        sp.add_argument("--sidecar", help="metadata CSV for FASTA input")

    sp = sub.add_parser("bpe-train", help="train the BPE tokenizer")
    data_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--vocab", type=int, default=1001)
    sp.add_argument("--split", help="restrict the corpus to the train side of this split")
    sp.set_defaults(func=cmd_bpe_train)

    sp = sub.add_parser("split", help="group by edit distance and write a split file")
    data_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", default="0.1", help="fraction of the shorter length (<1) or absolute edits")
    sp.add_argument("--val-frac", type=float, default=0.15)
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("train", help="train an encoder and write a checkpoint")
    data_args(sp)
    sp.add_argument("--split", required=True)
    sp.add_argument("--bpe", required=True)
    sp.add_argument("--config")
    sp.add_argument("--head", choices=["triplet", "softmax"])
    sp.add_argument("--out", required=True)
    sp.add_argument("--metrics")
    sp.add_argument("--fold", type=int)
    for flag, typ in (("--epochs", int), ("--batch-size", int), ("--max-lr", float), ("--seed", int),
                      ("--margin", float), ("--filters", int), ("--metric-dim", int), ("--embed-dim", int),
                      ("--kernel-sizes", str), ("--dropout", float), ("--precision", str)):
        sp.add_argument(flag, type=typ)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("rank", help="rank labs for query sequences")
    sp.add_argument("checkpoint")
    data_args(sp, "query")
    sp.add_argument("--tta", type=int, default=8)
    sp.add_argument("--top", type=int, default=10)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_rank)

    sp = sub.add_parser("eval", help="top-1/top-10 accuracy and rank quantiles")
    sp.add_argument("checkpoint")
    data_args(sp)
    sp.add_argument("--split")
    sp.add_argument("--which", default="test", choices=["test", "validation", "train"])
    sp.add_argument("--tta", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ranks-out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("fewshot", help="few-shot protocol on held-out labs")
    sp.add_argument("checkpoint")
    data_args(sp)
    sp.add_argument("--heldout", help="comma-separated lab ids (default: labs unseen by the checkpoint)")
    sp.add_argument("--samples", default="1", help="exemplars per lab: count, or fraction like 0.1")
    sp.add_argument("--repetitions", type=int, default=20)
    sp.add_argument("--aggregate", choices=["max", "mean"], default="max")
    sp.add_argument("--tta", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fewshot)

    sp = sub.add_parser("mutate", help="point-mutation robustness sweep for one sequence")
    sp.add_argument("checkpoint")
    data_args(sp)
    sp.add_argument("--id", required=True)
    sp.add_argument("--n", default="1-1000", help="mutation counts, e.g. 1-10 or 1,5,10")
    sp.add_argument("--runs", type=int, default=100)
    sp.add_argument("--tta", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_mutate)

    sp = sub.add_parser("explain", help="token importance for one lab")
    sp.add_argument("checkpoint")
    data_args(sp)
    sp.add_argument("--lab", required=True)
    sp.add_argument("--target-lab", help="explain the score of this lab instead of the top-ranked one")
    sp.add_argument("--split", help="global NTI over this split's validation side")
    sp.add_argument("--out", required=True)
    sp.add_argument("--top-out")
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("cluster", help="elbow table of k-means over lab embeddings")
    sp.add_argument("checkpoint")
    sp.add_argument("--k-min", type=int, default=2)
    sp.add_argument("--k-max", type=int, default=30)
    sp.add_argument("--assign-k", type=int)
    sp.add_argument("--assign-out")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_cluster)

    sp = sub.add_parser("export", help="export lab and sequence embeddings")
    sp.add_argument("checkpoint")
    sp.add_argument("data", nargs="?")
    sp.add_argument("--sidecar")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("synth", help="write the synthetic motif benchmark as a dataset CSV")
    sp.add_argument("--out", required=True)
    sp.add_argument("--labs", type=int, default=20)
    sp.add_argument("--per-lab", type=int, default=30)
    sp.add_argument("--motif-len", type=int, default=30)
    sp.add_argument("--backbone-len", type=int, default=2000)
    sp.add_argument("--test-frac", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    try:
        args.func(args)
    except INPUT_ERRORS as exc:
        print(f"plma {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"plma {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
