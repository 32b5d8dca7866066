"""Command-line interface: detect, simulate, evaluate, stability."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import dataio, metrics, selection, simulate
from .engine import FitOptions, Hyperparameters, fit_gene
from .splines import BasisSpec, build_design, normalize_coords, select_degree

log = logging.getLogger("svjoint")

WORKERS_ENV = "SVJOINT_WORKERS"
_DEGREE_SUBSET_SIZE = 50
_FAILURE_BUDGET = 0.01

# Per-process state for the gene-fit worker pool.
_CTX = {}


def _init_worker(counts, designs, hp, fit_kwargs, base_seed):
    _CTX["counts"] = counts
    _CTX["designs"] = designs
    _CTX["hp"] = hp
    _CTX["fit_kwargs"] = fit_kwargs
    _CTX["base_seed"] = base_seed


def _fit_gene_task(gene_index: int):
    opts = FitOptions(seed=_CTX["base_seed"] ^ gene_index, **_CTX["fit_kwargs"])
    ys = [c[gene_index] for c in _CTX["counts"]]
    return fit_gene(ys, _CTX["designs"], _CTX["hp"], opts)


def _default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            value = int(env)
            if value >= 1:
                return value
        except ValueError:
            pass
    return 1


def run_detect(args) -> int:
    manifest = dataio.Manifest.read(args.manifest)
    ds = dataio.load_dataset(manifest)
    log.info(
        "loaded %d samples, %d shared genes", ds.n_samples, ds.n_genes
    )
    ds = dataio.filter_dataset(ds, args.min_spots_per_gene, args.min_genes_per_spot)
    log.info("after filtering: %d genes", ds.n_genes)

    if args.degree == "auto":
        rng = np.random.default_rng(args.seed)
        size = min(_DEGREE_SUBSET_SIZE, ds.n_genes)
        subset = rng.choice(ds.n_genes, size=size, replace=False).tolist()
        degree = select_degree(ds, (1, 2, 3, 4), subset)
        log.info("selected spline degree %d by AIC", degree)
    else:
        degree = int(args.degree)

    gamma2 = None if args.gamma2 == "auto" else float(args.gamma2)
    hp = Hyperparameters.default(ds.n_samples, degree, gamma2=gamma2)
    spec = BasisSpec(degree)
    norm_samples = [replace(s, coords=normalize_coords(s.coords)) for s in ds.samples]
    designs = [build_design(s, spec) for s in norm_samples]
    counts = [s.counts for s in ds.samples]

    fit_kwargs = dict(max_iter=args.max_iter, elbo_tol=args.tol)
    workers = args.workers
    indices = list(range(ds.n_genes))
    if workers <= 1:
        _init_worker(counts, designs, hp, fit_kwargs, args.seed)
        results = [_fit_gene_task(i) for i in indices]
    else:
        chunk = max(1, ds.n_genes // (workers * 8))
        with ProcessPoolExecutor(
            max_workers=workers,
            initializer=_init_worker,
            initargs=(counts, designs, hp, fit_kwargs, args.seed),
        ) as pool:
            results = list(pool.map(_fit_gene_task, indices, chunksize=chunk))

    n_failed = 0
    for gid, res in zip(ds.gene_ids, results):
        if res.failure is not None:
            n_failed += 1
            log.warning("gene %s failed: %s", gid, res.failure)
    level = None if args.bfdr_level is None else args.bfdr_level
    meta = {
        "degree": degree,
        "gamma2": hp.gamma2,
        "seed": args.seed,
        "max_iter": args.max_iter,
        "tol": args.tol,
    }
    report = selection.build_report(ds.gene_ids, results, bfdr_level=level, meta=meta)
    dataio.write_report(report, args.out)
    n_sel = len(report.selected_ids)
    log.info(
        "wrote %s: %d/%d genes selected (u0=%.6g), %d failed",
        args.out, n_sel, ds.n_genes, report.threshold_u0, n_failed,
    )
    if n_failed > _FAILURE_BUDGET * ds.n_genes:
        log.error("more than %.0f%% of genes failed", 100 * _FAILURE_BUDGET)
        return 1
    return 0


def run_simulate(args) -> int:
    rows, cols = (int(v) for v in args.grid.lower().split("x"))
    cfg = simulate.SimConfig(
        M=args.samples,
        grid=(rows, cols),
        G=args.genes,
        n_sv=args.sv_genes,
        pattern=args.pattern,
        signal_setting=args.setting,
        dropout_pi=args.dropout,
        seed=args.seed,
        beta0_override=args.beta0,
    )
    dataset, truth = simulate.generate(cfg)
    manifest_path = dataio.write_dataset(dataset, args.out, counts_format=args.counts_format)
    truth_path = os.path.join(args.out, "truth.tsv")
    dataio.write_truth(truth, truth_path)
    log.info("wrote dataset under %s (manifest %s)", args.out, manifest_path)
    return 0


def run_evaluate(args) -> int:
    meta, rows = dataio.read_report(args.report)
    truth_meta, gene_ids, sv_flags = dataio.read_truth(args.truth)
    report_genes = {r["gene_id"] for r in rows}
    if report_genes - set(gene_ids):
        raise dataio.DataError("report contains genes absent from the ground truth")
    selected = {r["gene_id"] for r in rows if r["selected"]}
    # Genes filtered out before fitting count as unselected.
    conf = metrics.confusion(selected, gene_ids, sv_flags)
    tpr, fpr, f1 = metrics.metrics(conf)
    with open(args.out, "w") as fh:
        fh.write("seed\tsetting\tpattern\tdropout\ttpr\tfpr\tf1\n")
        fh.write(
            "\t".join(
                [
                    str(truth_meta.get("seed", "NA")),
                    str(truth_meta.get("setting", "NA")),
                    str(truth_meta.get("pattern", "NA")),
                    str(truth_meta.get("dropout", "NA")),
                    "%.10g" % tpr,
                    "%.10g" % fpr,
                    "%.10g" % f1,
                ]
            )
            + "\n"
        )
    log.info("tpr=%.4f fpr=%.4f f1=%.4f -> %s", tpr, fpr, f1, args.out)
    return 0


def run_stability(args) -> int:
    _, rows_a = dataio.read_report(args.report)
    _, rows_b = dataio.read_report(args.report2)
    sel_a = {r["gene_id"] for r in rows_a if r["selected"]}
    sel_b = {r["gene_id"] for r in rows_b if r["selected"]}
    value = metrics.jaccard(sel_a, sel_b)
    with open(args.out, "w") as fh:
        fh.write("n_selected_a\tn_selected_b\tjaccard\n")
        fh.write(f"{len(sel_a)}\t{len(sel_b)}\t{'%.10g' % value}\n")
    log.info("jaccard=%.4f -> %s", value, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svjoint",
        description="Joint multi-sample detection of spatially variable genes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_det = sub.add_parser("detect", help="fit all genes and write a detection report")
    p_det.add_argument("--manifest", required=True)
    p_det.add_argument("--out", required=True)
    p_det.add_argument("--degree", default="auto", choices=["auto", "1", "2", "3", "4"])
    p_det.add_argument("--gamma2", default="auto")
    p_det.add_argument("--bfdr-level", type=float, default=None, dest="bfdr_level")
    p_det.add_argument("--max-iter", type=int, default=500, dest="max_iter")
    p_det.add_argument("--tol", type=float, default=1e-2)
    p_det.add_argument("--workers", type=int, default=_default_workers())
    p_det.add_argument("--seed", type=int, default=0)
    p_det.add_argument(
        "--min-spots-per-gene", type=int, default=100, dest="min_spots_per_gene"
    )
    p_det.add_argument(
        "--min-genes-per-spot", type=int, default=100, dest="min_genes_per_spot"
    )
    p_det.set_defaults(func=run_detect)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--setting", type=int, default=1, choices=[1, 2, 3, 4])
    p_sim.add_argument("--pattern", default="linear", choices=list(simulate.PATTERN_KINDS))
    p_sim.add_argument("--dropout", type=float, default=0.3)
    p_sim.add_argument("--grid", default="32x32")
    p_sim.add_argument("--genes", type=int, default=5000)
    p_sim.add_argument("--sv-genes", type=int, default=500, dest="sv_genes")
    p_sim.add_argument("--samples", type=int, default=4)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--beta0", type=float, default=None)
    p_sim.add_argument(
        "--counts-format", default="dense", choices=["dense", "triplet"],
        dest="counts_format",
    )
    p_sim.set_defaults(func=run_simulate)

    p_eval = sub.add_parser("evaluate", help="score a report against ground truth")
    p_eval.add_argument("--report", required=True)
    p_eval.add_argument("--truth", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=run_evaluate)

    p_stab = sub.add_parser("stability", help="Jaccard overlap of two reports")
    p_stab.add_argument("--report", required=True)
    p_stab.add_argument("--report2", required=True)
    p_stab.add_argument("--out", required=True)
    p_stab.set_defaults(func=run_stability)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (dataio.DataError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
