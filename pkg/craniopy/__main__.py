#!/usr/bin/env python3
"""Command-line interface for craniopy"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table
from rich.text import Text

from .attention import global_embed
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import write_graph
from .config import DEFAULT_PRESET, RUN_PRESETS, RunConfig, resolve_config
from .dataset import load_paired, load_side, record_graph
from .errors import ConfigError, CranioError, NonFiniteLossError, RetrievalError
from .gradcheck import DEFAULT_PROBES, DEFAULT_STEP, TOLERANCE, check_pipeline
from .manifest import check_disjoint, load_manifest, merge_manifests
from .models import DatasetManifest, MetricReport, Modality, View
from .network import CranioNet
from .projection import pca_project, write_projection_csv
from .retrieval import evaluate, headline, score_gallery
from .synthetic import generate_synthetic, write_synthetic
from .training import fit, pair_transport
from .transport import write_plan_csv
from .utils import deterministic_torch, ensure_dir, parse_int_list

logger = logging.getLogger(__name__)

console = Console()

CHECKPOINT_NAME = "checkpoint.ckpt"
TRAIN_LOG_NAME = "train_log.jsonl"
DIAGNOSTICS_NAME = "diagnostics.json"

ABLATION_STUDIES = ("modules", "margin", "dim")
MODULE_VARIANTS = {
    "neither": {"use_ca": False, "use_ot": False},
    "CA": {"use_ca": True, "use_ot": False},
    "OT": {"use_ca": False, "use_ot": True},
    "OT+CA": {"use_ca": True, "use_ot": True},
}

# argparse dest -> RunConfig field
_CONFIG_FLAGS = (
    "half_size", "d_feat", "k", "normalize_coords", "feature_mode", "views", "hidden", "d_embed", "d_g",
    "gcn_layers", "relu_last", "heads", "ffn_mult", "use_layer_norm", "use_ca", "use_ot", "envelope",
    "epsilon", "sinkhorn_iters", "sinkhorn_tol", "margin", "beta", "lambda_ot", "batch_size",
    "learning_rate", "weight_decay", "epochs", "seed", "dtype", "train", "val", "out_dir", "ks",
)


def _comma_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _int_list(text: str) -> List[int]:
    try:
        return parse_int_list(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def config_parent(default_preset: str = DEFAULT_PRESET) -> argparse.ArgumentParser:
    """Flags shared by every subcommand; each mirrors a RunConfig field."""
    parser = argparse.ArgumentParser(add_help=False)
    group = parser.add_argument_group("run configuration")
    group.add_argument('--config', help='Flat JSON config file (overrides the preset)')
    group.add_argument('--preset', choices=list(RUN_PRESETS.keys()), default=default_preset,
                       help=f'Named preset (default: {default_preset})')
    group.add_argument('--seed', type=int, help='Run seed (default: 0)')
    group.add_argument('--debug', action='store_true', help='Enable debug logging')
    group.add_argument('--half-size', dest='half_size', type=int, help='Patch half-size P in pixels')
    group.add_argument('--d-feat', dest='d_feat', type=int, help='Patch feature dimension')
    group.add_argument('--k', type=int, help='Neighbours per landmark in the kNN graph')
    group.add_argument('--raw-coords', dest='normalize_coords', action='store_const', const=False,
                       help='Keep pixel coordinates in node features')
    group.add_argument('--feature-mode', dest='feature_mode', choices=['ingested', 'toy'],
                       help='Use precomputed feature files or the toy extractors on image_ref')
    group.add_argument('--views', type=_comma_list, help='Comma-separated views, e.g. front,side')
    group.add_argument('--hidden', type=int, help='GCN hidden dimension')
    group.add_argument('--d-embed', dest='d_embed', type=int, help='GCN output dimension')
    group.add_argument('--d-g', dest='d_g', type=int, help='Global feature dimension')
    group.add_argument('--gcn-layers', dest='gcn_layers', type=int, help='Number of GCN layers')
    group.add_argument('--linear-last', dest='relu_last', action='store_const', const=False,
                       help='No ReLU after the final GCN layer')
    group.add_argument('--heads', type=int, help='Attention heads')
    group.add_argument('--ffn-mult', dest='ffn_mult', type=int, help='FFN inner width as a multiple of d')
    group.add_argument('--no-layer-norm', dest='use_layer_norm', action='store_const', const=False,
                       help='Disable the layer norms of the attention block')
    group.add_argument('--no-ca', dest='use_ca', action='store_const', const=False,
                       help='Disable cross-attention')
    group.add_argument('--no-ot', dest='use_ot', action='store_const', const=False,
                       help='Disable optimal-transport alignment')
    group.add_argument('--envelope', action='store_const', const=True,
                       help='Treat transport plans as constants when differentiating')
    group.add_argument('--epsilon', type=float, help='Entropic regularisation (default: 0.1)')
    group.add_argument('--sinkhorn-iters', dest='sinkhorn_iters', type=int, help='Sinkhorn iterations (default: 80)')
    group.add_argument('--sinkhorn-tol', dest='sinkhorn_tol', type=float, help='Early-stop marginal tolerance')
    group.add_argument('--margin', type=float, help='Triplet margin m (default: 0.3)')
    group.add_argument('--beta', type=float, help='Global/OT similarity mix (default: 0.5)')
    group.add_argument('--lambda-ot', dest='lambda_ot', type=float, help='OT loss weight (default: 0.1)')
    group.add_argument('--batch-size', dest='batch_size', type=int, help='Identities per batch (default: 16)')
    group.add_argument('--lr', dest='learning_rate', type=float, help='Learning rate (default: 1e-4)')
    group.add_argument('--weight-decay', dest='weight_decay', type=float, help='Weight decay (default: 1e-5)')
    group.add_argument('--epochs', type=int, help='Training epochs (default: 50)')
    group.add_argument('--dtype', choices=['float32', 'float64'], help='Tensor precision')
    group.add_argument('--train', nargs='+', help='Training manifest(s)')
    group.add_argument('--val', nargs='+', help='Validation manifest(s)')
    group.add_argument('--out', dest='out_dir', help='Output directory')
    group.add_argument('--ks', type=_int_list, help='Cut-offs for R@K and mAP@K (default: 1,5,10,20)')
    return parser


def explicit_overrides(args: argparse.Namespace) -> Dict[str, object]:
    return {name: getattr(args, name) for name in _CONFIG_FLAGS if getattr(args, name, None) is not None}


def config_from_args(args: argparse.Namespace) -> RunConfig:
    config = resolve_config(args.preset, args.config, explicit_overrides(args))
    logger.info(f"Run seed {config.seed} (init, sampling and probe streams derived from it)")
    return config


def load_manifests(paths: Sequence[str]) -> DatasetManifest:
    if not paths:
        raise ConfigError("no manifest given")
    return merge_manifests(load_manifest(p) for p in paths)


def load_model(checkpoint: Optional[str], config: RunConfig, args: argparse.Namespace) -> CranioNet:
    """Model from a checkpoint, or the seeded untrained model without one."""
    if checkpoint is None:
        logger.warning(f"No checkpoint given; using untrained parameters (seed {config.seed})")
        return CranioNet(config)
    return CranioNet.from_checkpoint(load_checkpoint(checkpoint), explicit_overrides(args))


def report_table(reports: Dict[str, MetricReport], title: str = "Cross-domain retrieval") -> Table:
    table = Table(title=title)
    table.add_column("Gallery")
    table.add_column("Queries", justify="right")
    first = next(iter(reports.values()))
    for column in first.as_row():
        table.add_column(column, justify="right")
    for label, report in reports.items():
        table.add_row(label, str(report.queries), *[f"{100 * v:.1f}" for v in report.as_row().values()])
    return table


def cmd_synth(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    views = config.view_set
    dataset = generate_synthetic(
        n_identities=args.identities,
        n_landmarks=args.landmarks,
        d_feat=config.d_feat,
        seed=config.seed,
        cross_modal_noise=args.noise,
        d_g=config.d_g,
        views=views,
        identity_transforms=args.identity_transforms,
    )
    ratios = [float(v) for v in _comma_list(args.ratios)] if args.ratios else None
    counts = [int(v) for v in _comma_list(args.counts)] if args.counts else None
    written = write_synthetic(dataset, config.out_dir, ratios=ratios, counts=counts, seed=config.seed)

    table = Table(title="Synthetic dataset")
    table.add_column("Manifest")
    table.add_column("Records", justify="right")
    for path in written:
        table.add_row(str(path), str(len(load_manifest(path).records)))
    console.print(table)
    return 0


def cmd_build_graphs(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    manifest = load_manifests(args.manifest)
    out = ensure_dir(config.out_dir)
    counts: Dict[str, int] = {}
    for record in sorted(manifest.records, key=lambda r: (r.view.value, r.modality.value, r.id)):
        if record.view not in config.view_set:
            continue
        graph, _ = record_graph(record, config)
        write_graph(out / f"{record.id}_{record.modality.value}_{record.view.value}.graph", graph)
        key = f"{record.view.value}/{record.modality.value}"
        counts[key] = counts.get(key, 0) + 1

    table = Table(title=f"Graphs written to {out}")
    table.add_column("View/modality")
    table.add_column("Graphs", justify="right")
    for key, count in sorted(counts.items()):
        table.add_row(key, str(count))
    console.print(table)
    logger.info(f"Wrote {sum(counts.values())} graphs (k={config.k}, P={config.half_size})")
    return 0


def _validator(config: RunConfig, train: DatasetManifest):
    """R@1 on the validation manifests, or None when there are none."""
    if not config.val:
        return None
    manifest = load_manifests(config.val)
    check_disjoint(train, manifest)
    queries = load_side(manifest, config, Modality.A)
    gallery = load_side(manifest, config, Modality.B)

    def validate(model: CranioNet) -> float:
        return headline(evaluate(model, queries, gallery, ks=[1])).recall[1]

    return validate


def cmd_train(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    if config.epochs < 1:
        raise ConfigError("nothing to train: --epochs must be at least 1")
    if not config.train:
        raise ConfigError("no training manifest; pass --train")
    deterministic_torch()

    train_manifest = load_manifests(config.train)
    validate = _validator(config, train_manifest)
    train = load_paired(train_manifest, config)
    out = ensure_dir(config.out_dir)
    model = CranioNet(config)

    with Progress(
        TextColumn("[bold]Training"), BarColumn(), TextColumn("{task.completed}/{task.total} epochs"),
        TextColumn("{task.fields[status]}"), TimeElapsedColumn(), console=console,
    ) as progress:
        task = progress.add_task("train", total=config.epochs, status="")

        def on_epoch(metrics):
            status = f"loss {metrics.l_total:.4f}"
            if metrics.val_r1 is not None:
                status += f", val R@1 {metrics.val_r1:.3f}"
            progress.update(task, advance=1, status=status)

        try:
            result = fit(model, train, validate, out / TRAIN_LOG_NAME, on_epoch)
        except NonFiniteLossError as e:
            (out / DIAGNOSTICS_NAME).write_text(json.dumps(e.diagnostics, indent=2, sort_keys=True))
            logger.error(f"Diagnostics written to {out / DIAGNOSTICS_NAME}")
            raise

    save_checkpoint(result.checkpoint, out / CHECKPOINT_NAME)
    summary = Table(title="Training summary")
    summary.add_column("Parameter")
    summary.add_column("Value")
    last = result.history[-1]
    summary.add_row("Epochs", str(len(result.history)))
    summary.add_row("Selected epoch", str(result.best_epoch))
    summary.add_row("Final L_total", f"{last.l_total:.4f}")
    summary.add_row("Final batch R@1", f"{last.batch_r1:.3f}")
    summary.add_row("Checkpoint", str(out / CHECKPOINT_NAME))
    summary.add_row("Epoch log", str(out / TRAIN_LOG_NAME))
    console.print(summary)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    deterministic_torch()
    model = load_model(args.checkpoint, config, args)
    queries = load_side(load_manifests(args.queries), model.config, Modality.A)
    gallery = load_side(load_manifests(args.gallery or args.queries), model.config, Modality.B)
    if not queries:
        raise RetrievalError("no modality A queries for the configured views")
    reports = evaluate(model, queries, gallery, ks=config.ks)
    console.print(report_table(reports))
    if args.json_out:
        payload = {label: {"queries": r.queries, **r.as_row()} for label, r in reports.items()}
        Path(args.json_out).write_text(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_retrieve(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    deterministic_torch()
    model = load_model(args.checkpoint, config, args)
    queries = load_side(load_manifests(args.queries), model.config, Modality.A)
    gallery = load_side(load_manifests(args.gallery or args.queries), model.config, Modality.B)

    view = View(args.view) if args.view else next((v for v in View if v in queries), None)
    if view is None or view not in queries or view not in gallery:
        raise RetrievalError(f"no {args.view or 'usable'} view in the query and gallery manifests")
    query_batch, gallery_batch = queries[view], gallery[view]
    index = query_batch.index_of(args.query_id)
    if index is None:
        raise RetrievalError(f"unknown query id {args.query_id!r} ({view.value})")

    with torch.no_grad():
        tokens_s = model.encode(query_batch).tokens
        tokens_f = model.encode(gallery_batch).tokens
        ranking = score_gallery(model, tokens_s[index], tokens_f, gallery_batch.ids, args.query_id)

    topk = min(args.topk, len(ranking.gallery_ids))
    table = Table(title=f"Top {topk} for {args.query_id} ({view.value})")
    table.add_column("Rank", justify="right")
    table.add_column("Gallery id")
    table.add_column("Score", justify="right")
    for rank, (gallery_id, score) in enumerate(zip(ranking.gallery_ids[:topk], ranking.scores[:topk]), start=1):
        style = "green bold" if gallery_id == args.query_id else None
        table.add_row(str(rank), Text(gallery_id, style=style or ""), f"{score:.4f}")
    console.print(table)

    if args.dump_plan:
        best = gallery_batch.index_of(ranking.gallery_ids[0])
        with torch.no_grad():
            out = model.pair_forward(tokens_s[index:index + 1], tokens_f[best:best + 1], aligned=True)
            zero = torch.zeros(1, dtype=torch.long)
            transport, _ = pair_transport(out, zero, zero, model.config)
        write_plan_csv(args.dump_plan, transport.plan[0])
        logger.info(f"Transport plan against {ranking.gallery_ids[0]} written to {args.dump_plan}")
    return 0


def cmd_project(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    deterministic_torch()
    model = load_model(args.checkpoint, config, args)
    manifest = load_manifests(args.manifest)

    rows, embeddings = [], []
    with torch.no_grad():
        for modality in Modality:
            for view, batch in load_side(manifest, model.config, modality).items():
                g = global_embed(model.encode(batch).tokens).g
                embeddings.append(g.double())
                rows.extend((identity, modality.value) for identity in batch.ids)
    coords, projector = pca_project(torch.cat(embeddings).numpy(), seed=model.config.seed)

    state = f"trained ({args.checkpoint})" if args.checkpoint else f"untrained (seed {model.config.seed})"
    written = write_projection_csv(
        args.csv, [(i, m, float(x), float(y)) for (i, m), (x, y) in zip(rows, coords)], state, projector
    )
    console.print(f"Wrote {written} projected embeddings ({state}) to {args.csv}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.h <= 0:
        raise ConfigError(f"finite-difference step --h must be positive, got {args.h}")
    config = config_from_args(args)
    result = check_pipeline(config, probe_count=args.probes, h=args.h)
    if result.passed:
        console.print(f"[green]Gradient check passed: max relative error {result.max_rel_error:.3e}")
        return 0
    console.print(
        f"[red]Gradient check failed: max relative error {result.max_rel_error:.3e} > {TOLERANCE:g} "
        f"at {result.worst_param}[{result.worst_index}]"
    )
    return 1


def cmd_ablate(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    if not config.train:
        raise ConfigError("no training manifest; pass --train")
    deterministic_torch()

    if args.study == "modules":
        variants = {name: dict(changes) for name, changes in MODULE_VARIANTS.items()}
    elif args.study == "margin":
        values = [float(v) for v in _comma_list(args.values or "0.1,0.2,0.3,0.4")]
        variants = {f"m={v:g}": {"margin": v} for v in values}
    else:
        values = parse_int_list(args.values or "32,64,128")
        variants = {f"d_embed={v}": {"d_embed": v} for v in values}

    train_manifest = load_manifests(config.train)
    held_out = load_manifests(args.test or config.val or config.train)
    if args.test or config.val:
        check_disjoint(train_manifest, held_out)
    else:
        logger.warning("No held-out manifest given; ablation scores use the training identities")
    reports: Dict[str, MetricReport] = {}
    for name, changes in variants.items():
        variant = config.replace(**changes)
        logger.info(f"Ablation {args.study}: training variant {name}")
        train = load_paired(train_manifest, variant)
        model = CranioNet(variant)
        result = fit(model, train, _validator(variant, train_manifest))
        model.load_tensors(result.checkpoint.tensors)
        queries = load_side(held_out, variant, Modality.A)
        gallery = load_side(held_out, variant, Modality.B)
        reports[name] = headline(evaluate(model, queries, gallery, ks=variant.ks))

    console.print(report_table(reports, title=f"Ablation: {args.study}"))
    if args.study == "modules" and 5 in config.ks:
        delta = reports["OT+CA"].recall[5] - reports["neither"].recall[5]
        style = "green" if delta >= 0 else "red"
        console.print(Text(f"Held-out R@5 delta (OT+CA vs neither): {100 * delta:+.1f}", style=style))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Cross-modal landmark-graph matching')
    subparsers = parser.add_subparsers(dest='command', required=True)
    common = config_parent()

    synth = subparsers.add_parser('synth', parents=[common], help='Generate a synthetic paired dataset')
    synth.add_argument('--identities', type=int, default=64, help='Number of identities (default: 64)')
    synth.add_argument('--landmarks', type=int, help='Landmarks per sample (default: 18 front, 13 side)')
    synth.add_argument('--noise', type=float, default=0.05, help='Cross-modal noise sigma (default: 0.05)')
    synth.add_argument('--identity-transforms', action='store_true', help='Use identity modality transforms')
    synth.add_argument('--ratios', help='Train/val/test ratios, e.g. 0.7,0.2,0.1')
    synth.add_argument('--counts', help='Explicit train/val/test identity counts, e.g. 48,16,0')
    synth.set_defaults(handler=cmd_synth)

    graphs = subparsers.add_parser('build-graphs', parents=[common], help='Build and cache landmark graphs')
    graphs.add_argument('--manifest', nargs='+', required=True, help='Manifest file(s)')
    graphs.set_defaults(handler=cmd_build_graphs)

    train = subparsers.add_parser('train', parents=[common], help='Train and keep the best-validation checkpoint')
    train.set_defaults(handler=cmd_train)

    for name, help_text, handler in (
        ('eval', 'Score queries against a gallery and report R@K / mAP@K', cmd_eval),
        ('retrieve', 'Show the top-ranked gallery items for one query', cmd_retrieve),
    ):
        sub = subparsers.add_parser(name, parents=[common], help=help_text)
        sub.add_argument('--checkpoint', help='Checkpoint file (default: untrained parameters)')
        sub.add_argument('--queries', nargs='+', required=True, help='Manifest(s) holding modality A queries')
        sub.add_argument('--gallery', nargs='+', help='Manifest(s) holding modality B gallery items')
        sub.set_defaults(handler=handler)
        if name == 'eval':
            sub.add_argument('--json-out', help='Also write the report as JSON')
        else:
            sub.add_argument('--query-id', required=True, help='Identity to query')
            sub.add_argument('--view', choices=[v.value for v in View], help='View of the query')
            sub.add_argument('--topk', type=int, default=10, help='Results to list (default: 10)')
            sub.add_argument('--dump-plan', help='Write the transport plan against the top match as CSV')

    project = subparsers.add_parser('project', parents=[common], help='Export a 2D PCA projection of embeddings')
    project.add_argument('--checkpoint', help='Checkpoint file (default: untrained parameters)')
    project.add_argument('--manifest', nargs='+', required=True, help='Manifest file(s)')
    project.add_argument('--csv', required=True, help='Output CSV path')
    project.set_defaults(handler=cmd_project)

    gradcheck = subparsers.add_parser('gradcheck', parents=[config_parent('tiny')],
                                      help='Finite-difference check of the full pipeline')
    gradcheck.add_argument('--h', type=float, default=DEFAULT_STEP, help=f'Step size (default: {DEFAULT_STEP:g})')
    gradcheck.add_argument('--probes', type=int, default=DEFAULT_PROBES,
                           help=f'Parameters probed (default: {DEFAULT_PROBES})')
    gradcheck.set_defaults(handler=cmd_gradcheck)

    ablate = subparsers.add_parser('ablate', parents=[common], help='Train and compare pipeline variants')
    ablate.add_argument('--study', choices=ABLATION_STUDIES, default='modules', help='Which study (default: modules)')
    ablate.add_argument('--values', help='Comma-separated values for the margin or dim study')
    ablate.add_argument('--test', nargs='+', help='Held-out manifest(s) (default: --val, then --train)')
    ablate.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    # Configure logging
    log_level = logging.DEBUG if args.debug else logging.INFO
    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[RichHandler(console=console, show_time=False, show_level=False, show_path=False)],
        force=True,
    )

    try:
        return args.handler(args)
    except NonFiniteLossError as e:
        logger.error(f"Numeric abort: {e}")
        console.print(f"[red]Error: {str(e)}")
        if e.diagnostics:
            console.print_json(data=e.diagnostics, default=str, sort_keys=True)
        return 2
    except CranioError as e:
        logger.error(str(e))
        console.print(f"[red]Error: {str(e)}")
        return 1
    except KeyboardInterrupt:
        console.print("\nStopped by user")
        return 1


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
