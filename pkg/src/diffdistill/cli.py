"""Command-line surface: train, diffuse, eval, gradcheck, sweep.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
Failures emit a one-line JSON error record on stderr. Every artifact embeds
the hash of the configuration that produced it (JSON meta field, or a leading
``# config_hash=...`` comment in CSVs).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, default_config_text, load_config
from .diffusion import (
    DiffusionParams,
    build_affinity_batch,
    build_affinity_knn,
    diffuse_closed_form,
    refinement_objective,
    transition_matrix,
)
from .distill import psd_grad, psd_loss, row_softmax
from .embeddings import EmbeddingBatch, cosine_similarity_matrix, normalize_rows
from .errors import DegenerateGraphWarning, DiffDistillError, KTooLarge
from .io import (
    EmbeddingTable,
    FormatError,
    atomic_write_text,
    read_embeddings_auto,
    write_embeddings_csv,
    write_json,
    write_neighbors_csv,
    write_similarity_csv,
)
from .metrics import evaluate_batch
from .training import baseline_contrastive_loss_and_grad, train, zero_shot_task

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class CliValidationError(ValueError):
    pass


def _error_record(exc: Exception, exit_code: int) -> int:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": exit_code}
    print(json.dumps(record), file=sys.stderr)
    return exit_code


def _params_hash(parts: dict) -> str:
    canonical = "\n".join(f"{k}={parts[k]}" for k in sorted(parts))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _normalized_batch(table: EmbeddingTable) -> EmbeddingBatch:
    return EmbeddingBatch(normalize_rows(table.vectors), table.labels)


# ---------------------------------------------------------------------------
# train


def _history_rows(result, ks):
    header = (
        ["epoch", "distill_weight", "dml_loss", "distill_loss"]
        + [f"recall@{k}" for k in ks]
        + ["nmi", "density_ratio", "spectral_decay", "train_density_ratio", "train_spectral_decay"]
    )
    rows = [header]
    for rec in result.history:
        rows.append(
            [rec.epoch, repr(rec.distill_weight), repr(rec.dml_loss), repr(rec.distill_loss)]
            + [repr(rec.test_report.recall_at[k]) for k in ks]
            + [
                repr(rec.test_report.nmi),
                repr(rec.test_report.density_ratio),
                repr(rec.test_report.spectral_decay),
                repr(rec.train_density_ratio),
                repr(rec.train_spectral_decay),
            ]
        )
    return rows


def _write_history_csv(path, result, ks, config_hash):
    lines = [f"# config_hash={config_hash}"]
    lines += [",".join(str(cell) for cell in row) for row in _history_rows(result, ks)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def _embedding_table(batch: EmbeddingBatch) -> EmbeddingTable:
    return EmbeddingTable(
        ids=[str(i) for i in range(batch.n)], labels=batch.labels, vectors=batch.vectors
    )


def run_training(config: RunConfig, seed: int, distill_mode: str | None = None):
    train_set, test_set = zero_shot_task(
        config.dataset_spec(seed), config["num_train_classes"]
    )
    return train(train_set, test_set, config.trainer_config(distill_mode), seed=seed)


def _final_metrics_dict(result) -> dict:
    final = result.history[-1]
    return {
        "recall": {str(k): v for k, v in sorted(final.test_report.recall_at.items())},
        "nmi": final.test_report.nmi,
        "density_ratio": final.test_report.density_ratio,
        "spectral_decay": final.test_report.spectral_decay,
        "train_density_ratio": final.train_density_ratio,
        "train_spectral_decay": final.train_spectral_decay,
        "diffusion_seconds": result.diffusion_seconds,
    }


def cmd_train(args) -> int:
    if args.emit_default_config:
        sys.stdout.write(default_config_text())
        return EXIT_OK
    if args.config is None:
        raise CliValidationError("train requires a config file (or --emit-default-config)")
    config = load_config(args.config)
    if args.out_dir is not None:
        config = config.with_overrides(out_dir=args.out_dir)
    seeds = [args.seed] if args.seed is not None else list(config["seeds"])
    chash = config.config_hash()
    out_dir = Path(config["out_dir"])
    ks = list(config["recall_ks"])

    per_seed = {}
    for seed in seeds:
        result = run_training(config, seed)
        _write_history_csv(out_dir / f"history_seed{seed}.csv", result, ks, chash)
        write_embeddings_csv(
            out_dir / f"embeddings_train_seed{seed}.csv",
            _embedding_table(result.final_train),
            config_hash=chash,
        )
        write_embeddings_csv(
            out_dir / f"embeddings_test_seed{seed}.csv",
            _embedding_table(result.final_test),
            config_hash=chash,
        )
        final = _final_metrics_dict(result)
        write_json(
            out_dir / f"run_seed{seed}.json",
            {
                "meta": {
                    "config_hash": chash,
                    "version": __version__,
                    "seed": seed,
                    "optimizer": "gradient_descent_fixed_step",
                    "config": config.as_flat_dict(),
                },
                "final": final,
                "history": [
                    {
                        "epoch": rec.epoch,
                        "distill_weight": rec.distill_weight,
                        "dml_loss": rec.dml_loss,
                        "distill_loss": rec.distill_loss,
                        "recall": {str(k): v for k, v in sorted(rec.test_report.recall_at.items())},
                        "nmi": rec.test_report.nmi,
                        "density_ratio": rec.test_report.density_ratio,
                        "spectral_decay": rec.test_report.spectral_decay,
                        "train_density_ratio": rec.train_density_ratio,
                        "train_spectral_decay": rec.train_spectral_decay,
                    }
                    for rec in result.history
                ],
            },
        )
        per_seed[str(seed)] = final
        print(f"seed {seed}: final recall@{ks[0]} = {final['recall'][str(ks[0])]:.4f}")

    def agg(path):
        values = [path(v) for v in per_seed.values()]
        return {"mean": float(np.mean(values)), "std": float(np.std(values))}

    summary = {
        "meta": {
            "config_hash": chash,
            "version": __version__,
            "seeds": seeds,
            "config": config.as_flat_dict(),
        },
        "per_seed": per_seed,
        "aggregate": {
            **{f"recall@{k}": agg(lambda v, k=k: v["recall"][str(k)]) for k in ks},
            "nmi": agg(lambda v: v["nmi"]),
            "density_ratio": agg(lambda v: v["density_ratio"]),
            "spectral_decay": agg(lambda v: v["spectral_decay"]),
        },
    }
    write_json(out_dir / "summary.json", summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# diffuse


def cmd_diffuse(args) -> int:
    if not 0.0 < args.omega < 1.0:
        raise CliValidationError(f"omega must lie in (0, 1), got {args.omega}")
    table = read_embeddings_auto(args.embeddings)
    batch_all = _normalized_batch(table)
    n = batch_all.n
    params = DiffusionParams(omega=args.omega, degree_epsilon=args.degree_epsilon)
    chash = _params_hash(
        {
            "command": "diffuse",
            "input": Path(args.embeddings).name,
            "omega": repr(args.omega),
            "mode": args.mode,
            "knn_k": args.knn_k,
            "batch_size": args.batch_size,
            "degree_epsilon": repr(args.degree_epsilon),
        }
    )

    blocks = []
    if args.mode == "global":
        if not 1 <= args.knn_k < n:
            raise CliValidationError(f"knn_k must satisfy 1 <= k < n={n}, got {args.knn_k}")
        D = cosine_similarity_matrix(batch_all)
        graph = build_affinity_knn(batch_all, args.knn_k, params)
        if graph.degenerate_rows:
            print(
                json.dumps({"warning": "DegenerateGraph", "batch": 0, "rows": list(graph.degenerate_rows)}),
                file=sys.stderr,
            )
        A = diffuse_closed_form(transition_matrix(graph), D, args.omega)
        blocks.append((0, np.arange(n), A))
    else:
        if args.batch_size < 2:
            raise CliValidationError("batch_size must be >= 2")
        starts = list(range(0, n, args.batch_size))
        spans = []
        for start in starts:
            stop = min(start + args.batch_size, n)
            spans.append((start, stop))
        # a trailing single row cannot form a graph; fold it into the last batch
        if len(spans) > 1 and spans[-1][1] - spans[-1][0] < 2:
            prev_start, _ = spans[-2]
            spans[-2:] = [(prev_start, n)]
        if spans[0][1] - spans[0][0] < 2:
            raise CliValidationError("need at least 2 rows to diffuse")
        for batch_index, (start, stop) in enumerate(spans):
            sub = EmbeddingBatch(batch_all.vectors[start:stop], batch_all.labels[start:stop])
            D = cosine_similarity_matrix(sub)
            graph = build_affinity_batch(sub, params)
            if graph.degenerate_rows:
                rows = [start + r for r in graph.degenerate_rows]
                print(
                    json.dumps({"warning": "DegenerateGraph", "batch": batch_index, "rows": rows}),
                    file=sys.stderr,
                )
            A = diffuse_closed_form(transition_matrix(graph), D, args.omega)
            blocks.append((batch_index, np.arange(start, stop), A))

    out_dir = Path(args.out_dir)
    write_similarity_csv(out_dir / "refined_similarity.csv", blocks, config_hash=chash)
    if args.neighbors > 0:
        ranked = []
        for _, indices, A in blocks:
            for local, gi in enumerate(indices):
                scores = [(int(indices[j]), float(A[local, j])) for j in range(len(indices)) if j != local]
                scores.sort(key=lambda pair: (-pair[1], pair[0]))
                ranked.append((int(gi), scores[: args.neighbors]))
        write_neighbors_csv(out_dir / "neighbors.csv", ranked, config_hash=chash)
    print(f"wrote {len(blocks)} refined block(s) for {n} rows")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    table = read_embeddings_auto(args.embeddings)
    batch = _normalized_batch(table)
    ks = sorted(set(args.ks))
    report = evaluate_batch(
        batch,
        ks=ks,
        kmeans_restarts=args.kmeans_restarts,
        seed=args.seed if args.seed is not None else 0,
        density_distance=args.density_distance,
    )
    payload = report.to_json_dict()
    payload["meta"]["config_hash"] = _params_hash(
        {
            "command": "eval",
            "input": Path(args.embeddings).name,
            "ks": ",".join(str(k) for k in ks),
            "kmeans_restarts": args.kmeans_restarts,
            "seed": args.seed if args.seed is not None else 0,
            "density_distance": args.density_distance,
        }
    )
    payload["meta"]["version"] = __version__
    write_json(Path(args.out_dir) / "metrics.json", payload)
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def _gradcheck_distill(rng, trials, corrupt=False):
    worst = 0.0
    worst_case = None
    for _ in range(trials):
        n = int(rng.integers(3, 9))
        d = int(rng.integers(2, 7))
        tau = float(rng.choice([0.5, 1.0, 2.0]))
        V = rng.standard_normal((n, d)) * float(rng.uniform(0.5, 2.0))
        target = rng.standard_normal((n, n))
        target = (target + target.T) / 2.0
        analytic = psd_grad(V, row_softmax(target, tau), tau)
        if corrupt:
            analytic = analytic + 1e-3
        step = 1e-6
        fd = np.zeros_like(V)
        for idx in np.ndindex(V.shape):
            plus, minus = V.copy(), V.copy()
            plus[idx] += step
            minus[idx] -= step
            fd[idx] = (
                psd_loss(target, cosine_similarity_matrix(normalize_rows(plus)), tau)
                - psd_loss(target, cosine_similarity_matrix(normalize_rows(minus)), tau)
            ) / (2 * step)
        rel = float(np.abs(analytic - fd).max() / (np.abs(fd).max() + 1e-12))
        if rel > worst:
            worst = rel
            worst_case = {"V": V.tolist(), "target": target.tolist(), "tau": tau}
    return worst, worst_case


def _gradcheck_baseline(rng, trials, corrupt=False):
    worst = 0.0
    worst_case = None
    for _ in range(trials):
        n = int(rng.integers(4, 9))
        d = int(rng.integers(2, 7))
        margin = float(rng.uniform(0.1, 0.8))
        V = rng.standard_normal((n, d))
        labels = rng.integers(0, max(2, n // 2), size=n)
        if np.unique(labels).size < 2 or np.unique(labels).size == n:
            labels[0] = labels[1]  # guarantee one positive pair
            labels[-1] = labels[0] + 1  # and one negative
        _, analytic = baseline_contrastive_loss_and_grad(V, labels, margin)
        if corrupt:
            analytic = analytic + 1e-3
        step = 1e-6
        fd = np.zeros_like(V)
        for idx in np.ndindex(V.shape):
            plus, minus = V.copy(), V.copy()
            plus[idx] += step
            minus[idx] -= step
            fd[idx] = (
                baseline_contrastive_loss_and_grad(plus, labels, margin)[0]
                - baseline_contrastive_loss_and_grad(minus, labels, margin)[0]
            ) / (2 * step)
        rel = float(np.abs(analytic - fd).max() / (np.abs(fd).max() + 1e-12))
        if rel > worst:
            worst = rel
            worst_case = {"V": V.tolist(), "labels": labels.tolist(), "margin": margin}
    return worst, worst_case


def _gradcheck_stationarity(rng, trials, corrupt=False):
    worst = 0.0
    worst_case = None
    for _ in range(trials):
        n = int(rng.integers(4, 11))
        d = int(rng.integers(3, 7))
        omega = float(rng.choice([0.1, 0.5, 0.9]))
        params = DiffusionParams(omega=omega)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateGraphWarning)
            while True:
                # stationarity holds on graphs whose degrees needed no flooring
                Z = normalize_rows(rng.standard_normal((n, d)))
                batch = EmbeddingBatch(Z, np.zeros(n, dtype=np.int64))
                graph = build_affinity_batch(batch, params)
                if not graph.degenerate_rows:
                    break
        D = cosine_similarity_matrix(batch)
        S = transition_matrix(graph)
        A = diffuse_closed_form(S, D, omega)
        if corrupt:
            A = A + 1e-3
        step = 1e-5
        max_grad = 0.0
        for idx in np.ndindex(A.shape):
            plus, minus = A.copy(), A.copy()
            plus[idx] += step
            minus[idx] -= step
            grad = (
                refinement_objective(plus, graph.W, graph.degrees, D, omega)
                - refinement_objective(minus, graph.W, graph.degrees, D, omega)
            ) / (2 * step)
            max_grad = max(max_grad, abs(grad))
        bound = 1e-6 * (1.0 + float(np.abs(D).max()))
        ratio = max_grad / bound
        if ratio > worst:
            worst = ratio
            worst_case = {"Z": Z.tolist(), "omega": omega, "max_grad": max_grad, "bound": bound}
    return worst, worst_case


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise CliValidationError("trials must be >= 1")
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    chash = _params_hash({"command": "gradcheck", "seed": seed, "trials": args.trials})
    checks = [
        ("distill_grad_rel_err", _gradcheck_distill, 1e-5),
        ("baseline_grad_rel_err", _gradcheck_baseline, 1e-5),
        ("stationarity_over_bound", _gradcheck_stationarity, 1.0),
    ]
    failed = False
    results = {}
    for name, fn, threshold in checks:
        worst, worst_case = fn(rng, args.trials, corrupt=args.corrupt)
        ok = worst < threshold
        results[name] = {"max": worst, "threshold": threshold, "pass": bool(ok)}
        print(f"{name}: max={worst:.3e} threshold={threshold:.3e} -> {'PASS' if ok else 'FAIL'}")
        if not ok:
            failed = True
            write_json(
                Path(args.out_dir) / f"gradcheck_failure_{name}.json",
                {
                    "meta": {"config_hash": chash, "version": __version__},
                    "check": name,
                    "value": worst,
                    "threshold": threshold,
                    "instance": worst_case,
                },
            )
    write_json(
        Path(args.out_dir) / "gradcheck.json",
        {
            "meta": {
                "config_hash": chash,
                "version": __version__,
                "seed": seed,
                "trials": args.trials,
            },
            "results": results,
        },
    )
    if failed:
        raise DiffDistillError("gradient check failed; failing instance serialized")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    if args.out_dir is not None:
        config = config.with_overrides(out_dir=args.out_dir)
    values = []
    for piece in args.values.split(","):
        piece = piece.strip()
        if piece:
            try:
                values.append(float(piece))
            except ValueError as exc:
                raise CliValidationError(f"bad sweep value {piece!r}") from exc
    if not values:
        raise CliValidationError("sweep needs at least one value")
    if args.parameter == "omega" and not all(0.0 < v < 1.0 for v in values):
        raise CliValidationError("omega values must lie in (0, 1)")
    if args.parameter == "lambda" and not all(v >= 0.0 for v in values):
        raise CliValidationError("lambda values must be nonnegative")

    seeds = [args.seed] if args.seed is not None else list(config["seeds"])
    out_dir = Path(config["out_dir"])
    chash = _params_hash(
        {
            "command": "sweep",
            "base_config": config.config_hash(),
            "parameter": args.parameter,
            "values": ",".join(repr(v) for v in values),
            "seeds": ",".join(str(s) for s in seeds),
        }
    )
    rows = [["parameter", "value", "seeds", "recall@1_mean", "recall@1_std", "nmi_mean", "nmi_std", "status"]]
    for value in values:
        swept = config.with_overrides(**{args.parameter: value})
        r1s, nmis, status = [], [], "ok"
        for seed in seeds:
            try:
                result = run_training(swept, seed)
            except Exception as exc:  # keep partial sweep results on individual failures
                status = f"failed: {type(exc).__name__}"
                print(
                    json.dumps({"warning": "run_failed", "value": value, "seed": seed, "error": str(exc)}),
                    file=sys.stderr,
                )
                break
            final = result.history[-1]
            r1s.append(final.test_report.recall_at[min(final.test_report.recall_at)])
            nmis.append(final.test_report.nmi)
        if r1s:
            rows.append(
                [
                    args.parameter,
                    repr(value),
                    len(r1s),
                    repr(float(np.mean(r1s))),
                    repr(float(np.std(r1s))),
                    repr(float(np.mean(nmis))),
                    repr(float(np.std(nmis))),
                    status,
                ]
            )
        else:
            rows.append([args.parameter, repr(value), 0, "", "", "", "", status])
        # partial results survive later failures
        lines = [f"# config_hash={chash}"] + [",".join(str(c) for c in row) for row in rows]
        atomic_write_text(out_dir / "sweep.csv", "\n".join(lines) + "\n")
    print(f"swept {args.parameter} over {len(values)} value(s); results in {out_dir / 'sweep.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffdistill",
        description="Diffusion-refined self-distillation for metric learning (desk scale).",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=None, help="override the config seed list")
        p.add_argument("--out-dir", default=None, help="output directory")

    p_train = sub.add_parser("train", help="run the self-distillation training loop")
    p_train.add_argument("config", nargs="?", default=None, help="path to a key = value config file")
    p_train.add_argument(
        "--emit-default-config", action="store_true", help="print the default config and exit"
    )
    add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_diff = sub.add_parser("diffuse", help="refine a similarity matrix by diffusion")
    p_diff.add_argument("embeddings", help="embedding file (CSV or OBSD binary)")
    p_diff.add_argument("--omega", type=float, required=True)
    p_diff.add_argument("--mode", choices=["batch", "global"], default="batch")
    p_diff.add_argument("--knn-k", type=int, default=10, dest="knn_k")
    p_diff.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    p_diff.add_argument("--degree-epsilon", type=float, default=1e-8, dest="degree_epsilon")
    p_diff.add_argument("--neighbors", type=int, default=0, help="also write top-N neighbor lists")
    add_common(p_diff)
    p_diff.set_defaults(func=cmd_diffuse)

    p_eval = sub.add_parser("eval", help="compute the embedding-space metric suite")
    p_eval.add_argument("embeddings", help="embedding file (CSV or OBSD binary)")
    p_eval.add_argument("--ks", type=int, nargs="+", default=[1, 2, 4, 8])
    p_eval.add_argument("--kmeans-restarts", type=int, default=10, dest="kmeans_restarts")
    p_eval.add_argument(
        "--density-distance", choices=["euclidean", "cosine"], default="euclidean",
        dest="density_distance",
    )
    add_common(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p_grad.add_argument("--trials", type=int, default=50)
    p_grad.add_argument(
        "--corrupt", action="store_true", help=argparse.SUPPRESS  # negative-control test hook
    )
    add_common(p_grad)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_sweep = sub.add_parser("sweep", help="train once per parameter value per seed")
    p_sweep.add_argument("config", help="path to a key = value config file")
    p_sweep.add_argument("parameter", choices=["omega", "lambda"])
    p_sweep.add_argument("values", help="comma-separated values")
    add_common(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.out_dir is None and args.command in ("diffuse", "eval", "gradcheck"):
        args.out_dir = "."
    try:
        return args.func(args)
    except (ConfigError, FormatError, CliValidationError, KTooLarge, ValueError) as exc:
        return _error_record(exc, EXIT_VALIDATION)
    except DiffDistillError as exc:
        return _error_record(exc, EXIT_NUMERICAL)
    except np.linalg.LinAlgError as exc:
        return _error_record(exc, EXIT_NUMERICAL)
    except OSError as exc:
        return _error_record(exc, EXIT_IO)


if __name__ == "__main__":
    sys.exit(main())
