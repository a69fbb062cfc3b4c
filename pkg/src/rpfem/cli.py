"""Single executable for the full workflow.

Subcommands: gen-corpus, build-rpkg, inspect-rpkg, gradcheck, train-toy,
eval-toy, ablate, bench.  Exit codes: 0 success, 1 internal failure
(e.g. divergence or a failed gradient audit), 2 user/config error.  Every
artifact is deterministic under --seed; run directories are keyed by a hash
of the full configuration, and a finished run is never retrained.
"""
from __future__ import annotations

import argparse
import json
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

from .backend import active_backend
from .checkpoint import load_checkpoint, restore_params, save_checkpoint
from .diagnostics import SIZE_PRESETS, run_gradcheck_suite
from .errors import ConfigError, FormatError, RpfemError
from .rng import SplitRng
from .rpkg import (
    build_rpkg,
    ingest_file,
    load_class_embeddings,
    load_label_map,
    load_rpkg,
    normalize_relations,
    save_rpkg,
)
from .toy import (
    FULL_ABLATION_GRID,
    ModelDims,
    TrainConfig,
    config_hash,
    default_context_spec,
    evaluate,
    generate_corpus,
    independent_spec,
    init_baseline_head,
    init_enhanced_head,
    make_eval_scenes,
    run_ablation,
    spec_from_fingerprint,
    train,
)

METRIC_COLUMNS = ("step", "loss", "overall_acc", "ambiguous_acc", "duplicate_detection_rate")
ABLATION_COLUMNS = (
    "study",
    "config_hash",
    "heads",
    "layers",
    "relations",
    "overall_acc",
    "ambiguous_acc",
    "duplicate_detection_rate",
    "final_loss",
)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _dump_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shared argument helpers


def _add_task_flags(sub) -> None:
    sub.add_argument("--task", choices=("context", "independent"), default="context",
                     help="toy task preset (default: context)")
    sub.add_argument("--classes", type=int, default=8, help="class count")
    sub.add_argument("--dims", default="16",
                     help="feature widths F_p[,F_r[,F_e[,F_z]]] (defaults tie them together)")
    sub.add_argument("--proposals-per-scene", type=int, default=12)
    sub.add_argument("--noise", type=float, default=0.3)
    sub.add_argument("--ambiguity", type=float, default=None,
                     help="ambiguous-proposal rate (default: 0.5 context, 0 independent)")
    sub.add_argument("--duplicate-rate", type=float, default=None,
                     help="duplicate-proposal rate (default: 0.15 context, 0 independent)")


def _parse_dims(text: str) -> ModelDims:
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError:
        raise ConfigError(f"--dims must be comma-separated integers, got {text!r}")
    if not 1 <= len(parts) <= 4:
        raise ConfigError(f"--dims takes 1 to 4 widths, got {len(parts)}")
    fp = parts[0]
    fr = parts[1] if len(parts) > 1 else fp
    fe = parts[2] if len(parts) > 2 else fp
    fz = parts[3] if len(parts) > 3 else fp
    if fr != fp:
        raise ConfigError(
            f"toy class embeddings are the task prototypes, so F_r ({fr}) must equal F_p ({fp})"
        )
    return ModelDims(proposal=fp, class_embed=fr, edge=fe, context=fz)


def _task_spec(args):
    dims = _parse_dims(args.dims)
    common = dict(
        n_classes=args.classes,
        feature_dim=dims.proposal,
        proposals_per_scene=args.proposals_per_scene,
        noise_scale=args.noise,
    )
    if args.task == "context":
        amb = 0.5 if args.ambiguity is None else args.ambiguity
        dup = 0.15 if args.duplicate_rate is None else args.duplicate_rate
        spec = default_context_spec(ambiguity_rate=amb, duplicate_rate=dup, **common)
    else:
        amb = 0.0 if args.ambiguity is None else args.ambiguity
        dup = 0.0 if args.duplicate_rate is None else args.duplicate_rate
        if amb > 0:
            raise ConfigError("the independent task has no confusable structure; --ambiguity must be 0")
        spec = independent_spec(ambiguity_rate=amb, duplicate_rate=dup, **common)
    return spec, dims


def _parse_relations(text: str) -> tuple[str, ...]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    if names == ["all"]:
        return normalize_relations(("cooccurrence", "orientation", "distance"))
    return normalize_relations(names)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(args) -> int:
    spec, _ = _task_spec(args)
    paths = generate_corpus(spec, args.images, args.seed, args.out)
    print(f"wrote {paths.annotations}")
    print(f"wrote {paths.labelmap}")
    print(f"wrote {paths.embeddings}")
    print(f"{args.images} images, {spec.n_classes} classes, task={args.task}, seed={args.seed}")
    return 0


def cmd_build_rpkg(args) -> int:
    label_map = load_label_map(args.labelmap)
    corpus = ingest_file(args.annotations, label_map)
    embeddings = load_class_embeddings(args.embeddings, label_map.target_classes)
    relations = _parse_relations(args.relations)
    rpkg = build_rpkg(corpus, label_map.target_classes, embeddings, relations)
    save_rpkg(rpkg, args.out)
    n_objects = sum(len(img.objects) for img in corpus)
    print(
        f"rpkg written to {args.out}: C={rpkg.n_classes} R={rpkg.prior_width} "
        f"relations={','.join(rpkg.relations)} corpus={len(corpus)} images / {n_objects} objects"
    )
    return 0


def cmd_inspect_rpkg(args) -> int:
    rpkg = load_rpkg(args.rpkg)
    vector = rpkg.prior_vector(args.class_a, args.class_b)
    labels = rpkg.channel_labels()
    if args.json:
        print(json.dumps(
            {
                "class_a": args.class_a,
                "class_b": args.class_b,
                "channels": {lab: float(v) for lab, v in zip(labels, vector)},
            },
            sort_keys=True,
        ))
    else:
        print(f"K[{args.class_a}, {args.class_b}]:")
        for lab, v in zip(labels, vector):
            print(f"  {lab:<14} {v:.17g}")
    return 0


def cmd_gradcheck(args) -> int:
    from .kernels import warmup

    warmup()  # keep JIT compilation out of the audited runtime
    worst: dict[str, float] = {}
    tol = None
    for k in range(args.repeat):
        for res in run_gradcheck_suite(args.seed + k, sizes=args.sizes):
            worst[res.name] = max(worst.get(res.name, 0.0), res.max_rel_err)
            tol = res.tol
    failed = [name for name, err in worst.items() if err > tol]
    if args.json:
        print(json.dumps(
            {
                "seeds": args.repeat,
                "tol": tol,
                "results": {name: err for name, err in worst.items()},
                "passed": not failed,
            },
            sort_keys=True,
        ))
    else:
        print(f"{'op':<16} {'max rel err':>12}   status")
        for name, err in worst.items():
            status = "ok" if err <= tol else "FAIL"
            print(f"{name:<16} {err:>12.3e}   {status}")
        print(f"gradcheck: {len(worst) - len(failed)}/{len(worst)} ops ok "
              f"over {args.repeat} seed(s), tol {tol:g}")
    return 1 if failed else 0


def _train_payload(args, spec, dims, baseline: bool, relations) -> dict:
    return {
        "command": "train-toy",
        "task": spec.fingerprint(),
        "dims": asdict(dims),
        "heads": args.heads,
        "layers": args.layers,
        "relations": list(relations),
        "steps": args.steps,
        "lr": args.lr,
        "batch": args.batch,
        "seed": args.seed,
        "baseline": baseline,
        "eval_every": args.eval_every,
        "eval_proposals": args.eval_proposals,
    }


def cmd_train_toy(args) -> int:
    spec, dims = _task_spec(args)
    if dims.proposal != spec.feature_dim:
        raise ConfigError("--dims proposal width must match the task feature width")
    rpkg = None
    relations: tuple[str, ...] = ()
    if not args.baseline:
        if not args.rpkg:
            raise ConfigError("train-toy needs --rpkg (or --baseline for the context-free model)")
        rpkg = load_rpkg(args.rpkg)
        relations = rpkg.relations
    payload = _train_payload(args, spec, dims, args.baseline, relations)
    run_hash = config_hash(payload)
    run_dir = Path(args.out) / f"run-{run_hash}"
    summary_path = run_dir / "summary.json"
    if summary_path.exists():
        print(f"cached: {run_dir} (config hash {run_hash})")
        return 0
    run_dir.mkdir(parents=True, exist_ok=True)
    config = TrainConfig(
        steps=args.steps,
        lr=args.lr,
        batch_scenes=args.batch,
        seed=args.seed,
        n_heads=args.heads,
        n_layers=args.layers,
        eval_every=args.eval_every,
        eval_proposals=args.eval_proposals,
    )
    result = train(spec, rpkg, config, baseline=args.baseline)
    scenes = make_eval_scenes(spec, args.eval_proposals, args.seed)
    final = evaluate(result.model, scenes, rpkg)
    _dump_json(run_dir / "config.json", payload)
    _write_csv(
        run_dir / "metrics.csv",
        METRIC_COLUMNS,
        [
            (r.step, r.loss, r.overall_acc, r.ambiguous_acc, r.duplicate_detection_rate)
            for r in result.rows
        ],
    )
    save_checkpoint(result.model.named_params(), run_dir / "model")
    if args.rpkg and not args.baseline:
        shutil.copyfile(args.rpkg, run_dir / "rpkg.bin")
    _dump_json(
        run_dir / "summary.json",
        {
            "config_hash": run_hash,
            "baseline": args.baseline,
            "first_loss": result.rows[0].loss,
            "final_loss": result.rows[-1].loss,
            "eval": final.as_dict(),
            "eval_proposals": args.eval_proposals,
        },
    )
    amb = "absent" if final.ambiguous_acc is None else f"{final.ambiguous_acc:.4f}"
    print(
        f"run {run_hash}: loss {result.rows[0].loss:.4f} -> {result.rows[-1].loss:.4f}, "
        f"overall {final.overall_acc:.4f}, ambiguous {amb} -> {run_dir}"
    )
    return 0


def _load_run(run_dir: Path):
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise ConfigError(f"{run_dir} is not a finished run directory (no config.json)")
    payload = json.loads(config_path.read_text())
    spec = spec_from_fingerprint(payload["task"])
    root = SplitRng(payload["seed"])
    if payload["baseline"]:
        model = init_baseline_head(root.child("init"), spec.feature_dim, spec.n_classes + 1)
        rpkg = None
    else:
        rpkg = load_rpkg(run_dir / "rpkg.bin")
        model = init_enhanced_head(
            root.child("init"),
            ModelDims.square(spec.feature_dim),
            rpkg,
            payload["heads"],
            payload["layers"],
            spec.n_classes + 1,
        )
    restore_params(model.named_params(), load_checkpoint(run_dir / "model"))
    return payload, spec, model, rpkg


def cmd_eval_toy(args) -> int:
    run_dir = Path(args.run)
    payload, spec, model, rpkg = _load_run(run_dir)
    scenes = make_eval_scenes(spec, args.proposals, args.seed)
    metrics = evaluate(model, scenes, rpkg)
    report = {
        "run": run_dir.name,
        "config_hash": config_hash(payload),
        "seed": args.seed,
        "proposals": args.proposals,
        "metrics": metrics.as_dict(),
    }
    if args.baseline_run:
        b_payload, b_spec, b_model, b_rpkg = _load_run(Path(args.baseline_run))
        if b_spec != spec:
            raise ConfigError("--baseline-run was trained on a different task spec")
        b_metrics = evaluate(b_model, scenes, b_rpkg)
        comparison = {
            "baseline_metrics": b_metrics.as_dict(),
            "overall_margin": metrics.overall_acc - b_metrics.overall_acc,
        }
        if metrics.ambiguous_acc is not None and b_metrics.ambiguous_acc is not None:
            comparison["ambiguous_margin"] = metrics.ambiguous_acc - b_metrics.ambiguous_acc
        report["comparison"] = comparison
    _dump_json(run_dir / "eval.json", report)
    if args.json:
        print(json.dumps(report, sort_keys=True))
    else:
        amb = "absent" if metrics.ambiguous_acc is None else f"{metrics.ambiguous_acc:.4f}"
        line = f"overall {metrics.overall_acc:.4f}, ambiguous {amb}"
        if "comparison" in report and "ambiguous_margin" in report["comparison"]:
            line += f", ambiguous margin {report['comparison']['ambiguous_margin']:+.4f}"
        print(line)
    return 0


def _parse_axis_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}")


def _parse_relation_subsets(text: str) -> tuple[tuple[str, ...], ...]:
    subsets = []
    for chunk in text.split(":"):
        chunk = chunk.strip()
        if chunk:
            subsets.append(_parse_relations(chunk))
    if not subsets:
        raise ConfigError(f"no relation subsets in {text!r}")
    return tuple(subsets)


def cmd_ablate(args) -> int:
    spec, _ = _task_spec(args)
    grid: dict = {}
    if args.heads:
        grid["heads"] = _parse_axis_ints(args.heads)
    if args.layers:
        grid["layers"] = _parse_axis_ints(args.layers)
    if args.relations:
        grid["relations"] = _parse_relation_subsets(args.relations)
    if not grid:
        grid = dict(FULL_ABLATION_GRID)
    config = TrainConfig(steps=args.steps, lr=args.lr, batch_scenes=args.batch, seed=args.seed)
    rows = run_ablation(
        grid,
        spec,
        args.seed,
        config,
        n_corpus_images=args.corpus_images,
        eval_proposals=args.eval_proposals,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "ablation.csv"
    merged: dict[tuple[str, str], tuple] = {}
    if table_path.exists():
        lines = table_path.read_text().strip().splitlines()
        for line in lines[1:]:
            cells = line.split(",")
            merged[(cells[0], cells[1])] = tuple(cells)
    for row in rows:
        m = row.metrics
        cells = (
            row.study,
            row.run_hash,
            _fmt(row.heads),
            _fmt(row.layers),
            "+".join(row.relations),
            _fmt(m.overall_acc),
            _fmt(m.ambiguous_acc),
            _fmt(m.duplicate_detection_rate),
            _fmt(row.final_loss),
        )
        merged[(row.study, row.run_hash)] = cells
    ordered = sorted(merged.values(), key=lambda c: (c[0], c[2], c[3], c[4]))
    _write_csv(table_path, ABLATION_COLUMNS, ordered)
    _write_csv(
        out / "ablation_timing.csv",
        ("study", "config_hash", "wall_seconds"),
        [(r.study, r.run_hash, r.wall_seconds) for r in rows],
    )
    print(f"{len(rows)} ablation rows -> {table_path} (timings in ablation_timing.csv)")
    return 0


def cmd_bench(args) -> int:
    from .bench import format_rows, run_benchmark

    rows = run_benchmark(repeats=args.repeats, full=args.full)
    print(f"active backend: {active_backend()}")
    print(format_rows(rows))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rpfem",
        description="Relational-prior feature enhancement workbench: build and "
        "inspect prior graphs, audit gradients, train and ablate the toy task.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a synthetic annotation corpus")
    _add_task_flags(p)
    p.add_argument("--images", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("build-rpkg", help="build a relational prior knowledge graph")
    p.add_argument("--annotations", required=True)
    p.add_argument("--labelmap", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--relations", default="all",
                   help="comma-separated subset of cooccurrence,orientation,distance (or 'all')")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_rpkg)

    p = sub.add_parser("inspect-rpkg", help="print the prior vector for a class pair")
    p.add_argument("--rpkg", required=True)
    p.add_argument("class_a")
    p.add_argument("class_b")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect_rpkg)

    p = sub.add_parser("gradcheck", help="finite-difference audit of every op and stack")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeat", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--sizes", choices=sorted(SIZE_PRESETS), default="small")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="train the enhanced (or baseline) toy model")
    _add_task_flags(p)
    p.add_argument("--rpkg", help="prior graph file (omit with --baseline)")
    p.add_argument("--baseline", action="store_true", help="context-free classifier on P alone")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch", type=int, default=6)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--eval-every", type=int, default=50)
    p.add_argument("--eval-proposals", type=int, default=2000)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eval-toy", help="evaluate a finished run (optionally vs a baseline run)")
    p.add_argument("--run", required=True)
    p.add_argument("--baseline-run")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--proposals", type=int, default=2000)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval_toy)

    p = sub.add_parser("ablate", help="run the ablation grid (default mirrors the three studies)")
    _add_task_flags(p)
    p.add_argument("--heads", help="comma-separated head counts, e.g. 1,2,4")
    p.add_argument("--layers", help="comma-separated layer counts, e.g. 1,2,3")
    p.add_argument("--relations",
                   help="colon-separated relation subsets, e.g. 'cooccurrence:orientation:distance:all'")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=120)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch", type=int, default=6)
    p.add_argument("--corpus-images", type=int, default=300)
    p.add_argument("--eval-proposals", type=int, default=1200)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="compare the numba kernels against the numpy fallbacks")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--full", action="store_true", help="include the largest size")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RpfemError as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
