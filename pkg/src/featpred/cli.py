"""Command-line entry point.

The CLI never computes anything itself: it validates inputs, dispatches to
the library, and serializes results, so every number it prints is
byte-identical to the corresponding library call. All randomness flows
from the config seed.

Exit codes: 0 success, 2 configuration/usage errors, 3 data or contract
errors, 4 divergence, 1 anything else. Failures emit one JSON object on
stderr: {"error", "message", and "violations" for config errors}.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .ablation import AblationSpec, run_ablation, train_and_evaluate
from .config import (archive_from_config, build_run_config, default_run_config,
                     load_run_config, run_config_to_dict)
from .data import load_archive, read_image_raw, split_archive
from .errors import (ConfigError, ContractError, DivergenceError,
                     EvaluationError, IngestionError)
from .model import pooled_embedding
from .retrieval import (build_index, evaluate_archive, evaluation_to_json,
                        load_index, query, save_index)
from .training import fit, load_checkpoint

METRICS_DIR_ENV = "FEATPRED_METRICS_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route usage errors through the JSON channel
        raise ConfigError([{"field": "args", "message": message}])


def _out_dir(args, default: str) -> str:
    if getattr(args, "out", None):
        return args.out
    return os.environ.get(METRICS_DIR_ENV, default)


def _load_run(args):
    if getattr(args, "config", None):
        return load_run_config(args.config)
    return default_run_config()


def _records_for(archive_arg: str, run):
    """Archive records from a manifest directory or the literal 'synthetic'."""
    if archive_arg == "synthetic":
        return archive_from_config(run.data, run.seed)
    records = load_archive(archive_arg)
    n_eval = min(run.data.n_eval, max(1, len(records) // 5))
    train, eval_ = split_archive(records, n_eval)
    return records, train, eval_


def _run_from_checkpoint(state):
    doc = state.extra_meta
    if not doc:
        raise ConfigError([{
            "field": "checkpoint",
            "message": "checkpoint carries no run config; pass an archive path",
        }])
    return build_run_config(doc)


def cmd_train(args) -> int:
    run = _load_run(args)
    out_dir = _out_dir(args, "featpred_run")
    if args.archive == "synthetic":
        _, train_recs, _ = archive_from_config(run.data, run.seed)
    else:
        _, train_recs, _ = _records_for(args.archive, run)
    state = fit(run.encoder, run.predictor, run.train, train_recs,
                out_dir=out_dir, resume_from=args.resume, quiet=args.quiet,
                extra_meta=run_config_to_dict(run))
    if not args.quiet:
        last = state.history[-1] if state.history else {}
        print(f"trained {state.step} steps; final total loss "
              f"{last.get('total', float('nan')):.6f}")
        print(f"checkpoint: {os.path.join(out_dir, 'final.npz')}")
        print(f"metrics: {os.path.join(out_dir, 'metrics.ndjson')}")
    return 0


def cmd_embed(args) -> int:
    state = load_checkpoint(args.checkpoint)
    run = _run_from_checkpoint(state) if args.archive == "synthetic" else None
    if run is not None:
        records, _, _ = archive_from_config(run.data, run.seed)
    else:
        records = load_archive(args.archive)
    metric = args.metric
    index = build_index(state.model, records, metric=metric, which=args.which)
    save_index(index, args.out)
    if not args.quiet:
        print(f"indexed {len(index.ids)} records -> {args.out}")
    return 0


def cmd_query(args) -> int:
    state = load_checkpoint(args.checkpoint)
    index = load_index(args.index)
    image = read_image_raw(args.image)
    vector = pooled_embedding(state.model, image, which=args.which)
    neighbors = query(index, vector, args.k, exclude_id=args.exclude_id)
    print(json.dumps({"k": args.k, "metric": index.metric,
                      "neighbors": [[nid, nd] for nid, nd in neighbors]}))
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    run = _run_from_checkpoint(state)
    records, _, eval_recs = _records_for(args.archive, run)
    index = build_index(state.model, records, metric=run.retrieval.metric,
                        which=run.retrieval.which)
    result = evaluate_archive(state.model, index, eval_recs, k=args.k,
                              which=run.retrieval.which)
    report = evaluation_to_json(result)
    text = json.dumps(report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_ablate(args) -> int:
    try:
        with open(args.spec, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError([{"field": "$file",
                            "message": f"cannot read {args.spec}: {e}"}]) from e
    except json.JSONDecodeError as e:
        raise ConfigError([{"field": "$file",
                            "message": f"invalid JSON in {args.spec}: {e}"}]) from e
    if not isinstance(doc, dict):
        raise ConfigError([{"field": "$", "message": "spec must be an object"}])
    known = {"axis", "values", "trials", "base"}
    bad = [{"field": k, "message": "unknown key"} for k in doc if k not in known]
    if bad:
        raise ConfigError(bad)
    base = build_run_config(doc["base"]) if "base" in doc else default_run_config()
    spec = AblationSpec(axis=doc.get("axis", ""),
                        values=tuple(doc.get("values", ())),
                        base=base, trials=doc.get("trials", 3))
    records, _, _ = archive_from_config(base.data, base.seed)
    out_dir = _out_dir(args, "featpred_ablation")
    result = run_ablation(spec, records, out_dir=out_dir, quiet=args.quiet)
    if not args.quiet:
        print(f"axis: {result.axis}")
        for row in result.ranked():
            print(f"  {row.setting}: mean_f1={row.mean_f1:.4f} "
                  f"std={row.std:.4f} n={row.n_trials}")
        for f in result.failures:
            print(f"  FAILED {f['setting']} trial {f['trial']}: {f['error']}")
    csv_path = os.path.join(out_dir, f"ablation_{spec.axis}.csv")
    if not args.quiet:
        print(f"table: {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="featpred",
                description="Masked feature-prediction pretraining and "
                            "image retrieval on multi-band archives.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="pretrain on an archive")
    t.add_argument("--config", help="run config JSON (defaults if omitted)")
    t.add_argument("--archive", default="synthetic",
                   help="archive directory, or 'synthetic' (default)")
    t.add_argument("--out", help=f"output directory (or ${METRICS_DIR_ENV})")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="build a feature index from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--archive", default="synthetic")
    e.add_argument("--out", required=True, help="index file to write")
    e.add_argument("--metric", default="euclidean",
                   choices=["euclidean", "cosine"])
    e.add_argument("--which", default="target", choices=["target", "context"])
    e.add_argument("--quiet", action="store_true")
    e.set_defaults(func=cmd_embed)

    q = sub.add_parser("query", help="k-NN lookup for one image")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--index", required=True)
    q.add_argument("--image", required=True, help="raw image file")
    q.add_argument("--k", type=int, default=10)
    q.add_argument("--which", default="target", choices=["target", "context"])
    q.add_argument("--exclude-id", default=None)
    q.set_defaults(func=cmd_query)

    v = sub.add_parser("eval", help="mean F1@k over the eval split")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--archive", default="synthetic")
    v.add_argument("--k", type=int, default=10)
    v.add_argument("--out", help="also write the JSON report here")
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation matrix")
    a.add_argument("--spec", required=True, help="ablation spec JSON")
    a.add_argument("--out", help=f"output directory (or ${METRICS_DIR_ENV})")
    a.add_argument("--quiet", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def _emit_error(e: Exception) -> None:
    payload = {"error": type(e).__name__, "message": str(e)}
    if isinstance(e, ConfigError):
        payload["violations"] = e.violations
    print(json.dumps(payload), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        _emit_error(e)
        return 2
    except (ContractError, EvaluationError, IngestionError, OSError) as e:
        _emit_error(e)
        return 3
    except DivergenceError as e:
        _emit_error(e)
        return 4
    except Exception as e:  # last-resort: still machine-readable
        _emit_error(e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
