"""Command-line surface for the warm-start pipeline.

Subcommands: ``taskgen``, ``tas``, ``embed``, ``similarity``, ``select``,
``warmstart``, ``eval``, ``export-dot``.  Stdout carries human-readable
text; machine output lives only in files.  Every output file gains a
``<file>.prov.json`` sidecar recording the producing command line and seed.
Exit codes: 0 success, 1 runtime or IO failure (machine-readable JSON error
on stderr), 2 bad flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .distance import SimilarityMatrix, build_similarity_matrix
from .evaluation import retrain_genotype
from .fim import FimEstimatorConfig, TaskEmbedding, empirical_fim_diag, robust_fim_diag
from .genotype import Genotype, export_dot, export_space_dot
from .optim import AdamConfig, SgdConfig
from .probe import fit_head
from .progressive import StagePlan, TransferArchitecture, tas_meta
from .search import DartsConfig, SearchReport, evaluate_accuracy
from .study import StudyDir
from .taskgen import generate_task, load_bundle, save_bundle, stratified_split
from .warmstart import (
    WarmStartConfig,
    dropout_sweep,
    report_savings,
    select_most_similar,
    warm_start_search,
)

__all__ = ["main", "build_parser"]


class CliError(Exception):
    """Runtime failure reported as JSON on stderr with exit code 1."""


def _provenance(args) -> dict:
    return {
        "command": "wsnas " + " ".join(args._argv),
        "seed": getattr(args, "seed", None),
    }


def _refuse_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise CliError(f"{path} exists; pass --force to overwrite")


def _write_sidecar(path: Path, args) -> None:
    Path(str(path) + ".prov.json").write_text(
        json.dumps(_provenance(args), indent=2, sort_keys=True) + "\n"
    )


def _write_text(path: Path, text: str, args) -> Path:
    path = Path(path)
    _refuse_overwrite(path, args.force)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    _write_sidecar(path, args)
    return path


def _write_json(path: Path, payload: dict, args) -> Path:
    return _write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n", args)


def _load_task(path) -> tuple:
    bundle = load_bundle(path)
    return bundle, bundle.images.astype(np.float64), bundle.labels


def _darts_config(args) -> DartsConfig:
    return DartsConfig(
        epochs=args.epochs,
        warmup_epochs=args.warmup,
        batch_size=args.batch_size,
        w_opt=SgdConfig(lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay),
        alpha_opt=AdamConfig(lr=args.alpha_lr, weight_decay=args.alpha_weight_decay),
        dropout0=args.dropout0,
        seed=args.seed,
    )


def _add_search_flags(parser, epochs=8, warmup=3):
    parser.add_argument("--epochs", type=int, default=epochs)
    parser.add_argument("--warmup", type=int, default=warmup)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--lr", type=float, default=0.025, help="weight learning rate")
    parser.add_argument("--momentum", type=float, default=0.9)
    parser.add_argument("--weight-decay", type=float, default=3e-4)
    parser.add_argument("--alpha-lr", type=float, default=6e-4)
    parser.add_argument("--alpha-weight-decay", type=float, default=1e-3)
    parser.add_argument("--dropout0", type=float, default=0.0)


# -- commands -----------------------------------------------------------------


def cmd_taskgen(args) -> int:
    try:
        bundle = generate_task(
            args.family, seed=args.seed, n=args.n, classes=args.classes,
            size=args.size, noise=args.noise,
            style=args.style, task_id=args.task_id,
        )
    except ValueError as exc:
        raise CliError(str(exc))
    out = Path(args.out)
    _refuse_overwrite(out, args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, out)
    _write_sidecar(out, args)
    print(f"wrote task {bundle.task_id} ({bundle.n} samples) to {out}")
    return 0


def cmd_tas(args) -> int:
    plan = StagePlan.parse(args.stages)
    tasks = []
    for path in args.task:
        bundle, x, y = _load_task(path)
        tasks.append((bundle.task_id, x, y))
    if len(tasks) > 1 and not args.meta:
        raise CliError("multiple --task inputs require --meta")
    result = tas_meta(
        tasks,
        plan,
        init_channels=args.channels,
        batch_size=args.batch_size,
        w_opt=SgdConfig(lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay),
        alpha_opt=AdamConfig(lr=args.alpha_lr, weight_decay=args.alpha_weight_decay),
        dropout0=args.dropout0,
        seed=args.seed,
    )
    prefix = Path(args.out)
    lam = Path(f"{prefix}.lambda.wsta")
    lam_hat = Path(f"{prefix}.lambda-hat.wsta")
    report = Path(f"{prefix}.report.json")
    for path in (lam, lam_hat, report):
        _refuse_overwrite(path, args.force)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    result.transfer.save(lam)
    _write_sidecar(lam, args)
    result.trained.save(lam_hat)
    _write_sidecar(lam_hat, args)
    report.write_text(json.dumps(result.report_json_dict(), indent=2, sort_keys=True) + "\n")
    _write_sidecar(report, args)
    print(
        f"transfer architecture: {lam}\n"
        f"trained transfer architecture: {lam_hat}\n"
        f"report ({result.total_op_evals} op evals): {report}"
    )
    return 0


def cmd_embed(args) -> int:
    study = StudyDir(args.study)
    bundle, x, y = _load_task(args.task)
    with study.lock():
        probe = study.load_or_create_probe(seed=args.probe_seed)
        head = fit_head(probe, x, y, epochs=args.head_epochs, seed=args.seed)
        if args.estimator == "empirical":
            emb = empirical_fim_diag(
                probe, head, x, mc_draws=args.mc_draws, seed=args.seed,
                task_id=bundle.task_id,
            )
        else:
            emb = robust_fim_diag(
                probe, head, x, y,
                cfg=FimEstimatorConfig(beta=args.beta, lambda_sq=args.lambda_sq),
                seed=args.seed, task_id=bundle.task_id,
            )
        out = Path(args.out) if args.out else study.path("archive") / f"{bundle.task_id}.emb"
        _refuse_overwrite(out, args.force)
        out.parent.mkdir(parents=True, exist_ok=True)
        emb.save(out)
        _write_sidecar(out, args)
    print(f"embedded {bundle.task_id} with the {emb.estimator} estimator: {out}")
    return 0


def cmd_similarity(args) -> int:
    study = StudyDir(args.study)
    with study.lock():
        paths = [Path(p) for p in args.emb] if args.emb else sorted(
            study.path("archive").glob("*.emb")
        )
        if len(paths) < 2:
            raise CliError("need at least 2 embeddings to build a similarity matrix")
        embeddings = [TaskEmbedding.load(p) for p in paths]
        matrix = build_similarity_matrix(embeddings)
        out = Path(args.out) if args.out else study.path("matrices") / "similarity.csv"
        _refuse_overwrite(out, args.force)
        out.parent.mkdir(parents=True, exist_ok=True)
        matrix.save_csv(out)
        _write_sidecar(out, args)
    print(f"similarity matrix over {len(embeddings)} tasks: {out}")
    return 0


def cmd_select(args) -> int:
    matrix = SimilarityMatrix.load_csv(args.matrix)
    try:
        other, dist = select_most_similar(matrix, args.task)
    except KeyError as exc:
        raise CliError(str(exc))
    print(f"most similar to {args.task}: {other} (d_sym={dist:.6f})")
    if args.out:
        _write_json(Path(args.out), {"task": args.task, "selected": other,
                                     "d_sym": dist}, args)
    return 0


def cmd_warmstart(args) -> int:
    bundle, x, y = _load_task(args.task)
    transfer = TransferArchitecture.load(args.transfer)
    if args.mode == "lambda":
        transfer = transfer.structure_only()
    cfg = WarmStartConfig(
        mode=args.mode,
        darts=_darts_config(args),
        max_skips=args.max_skips,
        dropout_sweep=tuple(float(v) for v in args.sweep.split(",")) if args.sweep else (args.dropout0,),
        apply_refinement=not args.no_refinement,
        expected_width=args.width,
        num_cells=args.cells,
        init_channels=args.channels,
    )
    prefix = Path(args.out)
    genotype_path = Path(f"{prefix}.genotype.json")
    report_path = Path(f"{prefix}.report.json")
    for path in (genotype_path, report_path):
        _refuse_overwrite(path, args.force)

    if args.sweep:
        outcome = dropout_sweep(
            x, y, transfer, cfg,
            retrain_epochs=args.retrain_epochs,
        )
        genotype = outcome.best_genotype
        best = outcome.best_dropout0
        chosen = [e for e in outcome.accuracies if e[0] == best][0]
        report = chosen[2]
        extra = {
            "sweep": [
                {"dropout0": d0, "retrain_accuracy": acc} for d0, acc, _ in outcome.accuracies
            ],
            "best_dropout0": best,
        }
    else:
        result = warm_start_search(x, y, transfer, cfg)
        genotype = result.genotype
        report = result.report
        extra = {"best_dropout0": result.dropout0}

    prefix.parent.mkdir(parents=True, exist_ok=True)
    genotype_path.write_text(genotype.to_json())
    _write_sidecar(genotype_path, args)
    payload = report.to_json_dict()
    payload.update(extra)
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _write_sidecar(report_path, args)
    lines = [f"genotype: {genotype_path}", f"report: {report_path}"]
    if args.baseline_report:
        baseline = json.loads(Path(args.baseline_report).read_text())
        baseline_report = SearchReport(
            epochs=0,
            op_evals=baseline.get("total_op_evals", baseline.get("op_evals", 0)),
            wall_seconds=baseline.get("total_wall_seconds", baseline.get("wall_seconds", 0.0)),
            final_train_loss=float("nan"),
            final_val_acc=float("nan"),
        )
        try:
            savings = report_savings(report, baseline_report)
        except ValueError as exc:
            raise CliError(str(exc))
        savings_path = _write_json(Path(f"{prefix}.savings.json"), savings, args)
        lines.append(f"savings: {savings_path}")
    print("\n".join(lines))
    return 0


def cmd_eval(args) -> int:
    bundle, x, y = _load_task(args.task)
    genotype = Genotype.from_json(Path(args.genotype).read_text())
    split = stratified_split(bundle, seed=args.seed)
    train_idx = np.concatenate([split.train_w, split.train_alpha])
    trained = retrain_genotype(
        genotype, x[train_idx], y[train_idx],
        num_cells=args.cells, init_channels=args.channels,
        epochs=args.epochs, batch_size=args.batch_size,
        sgd=SgdConfig(lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay),
        seed=args.seed, num_classes=bundle.classes,
    )
    accuracy = evaluate_accuracy(
        trained.network, trained.alphas, x[split.validation], y[split.validation]
    )
    payload = {
        "task_id": bundle.task_id,
        "epochs": args.epochs,
        "validation_accuracy": accuracy,
        "train_losses": trained.train_losses,
    }
    if args.out:
        _write_json(Path(args.out), payload, args)
    print(f"validation accuracy after {args.epochs} retrain epochs: {accuracy:.4f}")
    return 0


def cmd_export_dot(args) -> int:
    if bool(args.genotype) == bool(args.transfer):
        raise CliError("pass exactly one of --genotype or --transfer")
    if args.genotype:
        genotype = Genotype.from_json(Path(args.genotype).read_text())
        text = export_dot(genotype, kind=args.kind)
    else:
        transfer = TransferArchitecture.load(args.transfer)
        spec = transfer.normal if args.kind == "normal" else transfer.reduce
        text = export_space_dot(spec)
    out = _write_text(Path(args.out), text, args)
    print(f"dot graph: {out}")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wsnas",
        description="Warm-started differentiable architecture search toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("taskgen", help="generate a synthetic task bundle")
    p.add_argument("--family", required=True, choices=("stripes", "blobs"))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--style", type=float, default=None)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--task-id", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_taskgen)

    p = sub.add_parser("tas", help="progressive transfer architecture search")
    p.add_argument("--task", action="append", required=True, help="task bundle path (repeatable with --meta)")
    p.add_argument("--stages", required=True, help='stage plan "L:O:E[:W],..."')
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--meta", action="store_true", help="share weights and logits across tasks")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.025)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=3e-4)
    p.add_argument("--alpha-lr", type=float, default=6e-4)
    p.add_argument("--alpha-weight-decay", type=float, default=1e-3)
    p.add_argument("--dropout0", type=float, default=0.0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_tas)

    p = sub.add_parser("embed", help="compute a task embedding against the study probe")
    p.add_argument("--task", required=True)
    p.add_argument("--study", required=True)
    p.add_argument("--estimator", choices=("empirical", "robust"), default="empirical")
    p.add_argument("--mc-draws", type=int, default=10)
    p.add_argument("--head-epochs", type=int, default=40)
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--lambda-sq", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probe-seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("similarity", help="pairwise distance matrix over embeddings")
    p.add_argument("--study", required=True)
    p.add_argument("--emb", action="append", default=None, help="embedding path (repeatable)")
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_similarity)

    p = sub.add_parser("select", help="most similar task from a similarity CSV")
    p.add_argument("--matrix", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("warmstart", help="warm-started search on a restricted space")
    p.add_argument("--task", required=True)
    p.add_argument("--transfer", required=True, help="transfer architecture file")
    p.add_argument("--mode", choices=("lambda", "lambda_hat", "meta"), default="lambda")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--seed", type=int, default=0)
    _add_search_flags(p)
    p.add_argument("--sweep", default=None, help='dropout sweep, e.g. "0,0.3,0.6"')
    p.add_argument("--retrain-epochs", type=int, default=10)
    p.add_argument("--max-skips", type=int, default=2)
    p.add_argument("--no-refinement", action="store_true")
    p.add_argument("--width", type=int, default=3, help="expected ops per edge; 0 disables the check")
    p.add_argument("--cells", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--baseline-report", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_warmstart)

    p = sub.add_parser("eval", help="retrain a genotype from scratch and score it")
    p.add_argument("--task", required=True)
    p.add_argument("--genotype", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--cells", type=int, default=8)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.025)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=3e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-dot", help="render a cell as Graphviz DOT text")
    p.add_argument("--genotype", default=None)
    p.add_argument("--transfer", default=None)
    p.add_argument("--kind", choices=("normal", "reduce"), default="normal")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_export_dot)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = argv
    if getattr(args, "width", None) == 0:
        args.width = None
    try:
        return args.func(args)
    except CliError as exc:
        print(json.dumps({"error": str(exc), "command": args.command}), file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        print(json.dumps({"error": str(exc), "command": args.command}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
