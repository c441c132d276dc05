"""Command-line front end.

Every command writes its outputs plus a ``*.config.json`` holding the fully
resolved arguments; ``taskbasis --config that.json`` replays the run.

Exit codes: 0 success, 2 invalid input, 3 a theorem or invariant check
failed, 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .arithmetic import (
    DEFAULT_ALPHA_GRID,
    LnsConfig,
    MergeSpec,
    dumps,
    merge_lns,
    merge_ta,
    merge_ties,
    negate,
    ood_merge,
    parse_alpha_grid,
    save_masks,
    save_merged,
)
from .bases import (
    AeConfig,
    Method,
    UnsupportedOperation,
    achievability_certificate,
    fit_ae,
    fit_pca,
    fit_rand_proj,
    fit_rand_select,
    load_model,
    parse_anneal,
    save_model,
)
from .bases.model import SIMPLEX_TOL
from .online import ONLINE_AE, run_stream
from .testbed import (
    Profile,
    generate_suite,
    load_suite,
    measure_constants,
    random_simplex,
    save_suite,
    verify_addition_bound,
    verify_negation_bound,
    verify_ood_bound,
)
from .vecstore import FormatError, TaskVectorMatrix, gram, load_collection, save_collection, spectral_bounds

log = logging.getLogger("taskbasis")

EXIT_OK, EXIT_INVALID, EXIT_THEOREM, EXIT_IO = 0, 2, 3, 4


class TheoremFailure(Exception):
    pass


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _write_config(out: Path, args: argparse.Namespace, resolved: dict | None = None) -> None:
    cfg = {"args": {k: v for k, v in vars(args).items() if k not in ("func", "config")}}
    if resolved:
        cfg["resolved"] = resolved
    _write(out.with_name(out.name + ".config.json"), dumps(cfg))


def _suite(args) -> object:
    """A suite directory, or a profile string generated on the fly."""
    path = Path(args.suite)
    if path.is_dir():
        return load_suite(path)
    if path.suffix or "/" in args.suite:
        raise FileNotFoundError(f"suite directory {args.suite} does not exist")
    return generate_suite(Profile.parse(args.suite), d=args.d, T=args.T, seed=args.seed)


def _source(args, suite):
    if getattr(args, "model", None):
        model = load_model(args.model)
        if model.T != suite.T:
            raise ValueError(f"model encodes {model.T} tasks but the suite has {suite.T}")
        if model.theta0 is None:
            model = replace(model, theta0=suite.theta0)
        return model
    return suite.matrix()


def _grid(text: str) -> tuple[float, ...]:
    return parse_alpha_grid(text) if text else DEFAULT_ALPHA_GRID


# ---- commands -------------------------------------------------------------------


def cmd_generate(args) -> int:
    prof = Profile.parse(args.profile)
    suite = generate_suite(prof, d=args.d, T=args.T, norm_range=(args.norm_low, args.norm_high),
                           seed=args.seed, target_gamma=args.target_gamma, hessian_rank=args.hessian_rank)
    out = Path(args.out)
    save_suite(suite, out)
    if args.stream:
        sdir = out / "stream"
        sdir.mkdir(parents=True, exist_ok=True)
        m = suite.matrix()
        files = []
        for i, name in enumerate(m.names):
            f = f"{i:04d}_{name}.tvb"
            save_collection(TaskVectorMatrix(m.columns[:, i:i + 1], (name,)), sdir / f)
            files.append(f)
        save_collection(TaskVectorMatrix(suite.theta0[:, None], ("theta0",)), sdir / "theta0.tvb")
        _write(sdir / "manifest.json", dumps({"order": files, "theta0": "theta0.tvb"}))
    k = measure_constants(suite, suite.target)
    _write(out / "constants.json", dumps(k.to_dict()))
    _write_config(out / "generate", args, {"profile": prof.to_dict()})
    print(f"wrote suite with {suite.T} tasks (d={suite.d}) to {out}")
    return EXIT_OK


def cmd_build(args) -> int:
    m = load_suite(args.input).matrix() if Path(args.input).is_dir() else load_collection(args.input)
    g = gram(m)
    resolved: dict = {}
    if args.method == "ae":
        cfg = AeConfig(M=args.m, steps=args.steps, lr=args.lr, tau0=args.tau, anneal=parse_anneal(args.anneal),
                       weight_decay=args.weight_decay, seed=args.seed, decoder_mode=args.decoder_mode)
        resolved["ae"] = cfg.to_dict()
        model = fit_ae(m, cfg, g=g)
    elif args.method == "pca":
        model = fit_pca(m, args.m, center=not args.no_center, weighting=args.weighting)
    elif args.method == "rand-select":
        model = fit_rand_select(m, args.m, seed=args.seed, g=g)
    else:
        model = fit_rand_proj(m, args.m, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    lb = spectral_bounds(g, min(model.M, m.T)).frobenius_lb
    if model.method is Method.PCA:
        lb = model.metadata["frobenius_lb"]  # centered PCA is judged against the centered Gram
    cert = achievability_certificate(g, min(model.M, m.T), seed=args.seed)
    report = {
        "method": model.method.value,
        "M": model.M,
        "T": model.T,
        "loss": model.loss,
        "frobenius_lb": lb,
        "gap": model.loss - lb,
        "achievability": cert.summary(),
        "metadata": {k: v for k, v in model.metadata.items() if k != "loss_trace"},
    }
    _write(out.with_name(out.name + ".json"), dumps(report))
    _write_config(out, args, resolved)
    print(f"{model.method.value}: loss={model.loss:.6g} lower bound={lb:.6g} gap={model.loss - lb:.3e}")
    return EXIT_OK


def _merge_spec(args) -> MergeSpec:
    lns = LnsConfig(sigmoid_bias=args.lns_bias, l1_strength=args.lns_l1, lr=args.lns_lr, epochs=args.lns_epochs,
                    binarize_threshold=args.lns_threshold)
    return MergeSpec(method=args.method, alpha_grid=_grid(args.alpha_grid), ties_topk_fraction=args.topk,
                     lns=lns, seed=args.seed)


def cmd_merge(args) -> int:
    suite = _suite(args)
    src = _source(args, suite)
    spec = _merge_spec(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if spec.method == "lns":
        merged, masks = merge_lns(src, suite.tasks, spec)
        save_masks(masks, out.with_name(out.name + ".masks"))
    elif spec.method == "ties":
        merged = merge_ties(src, suite.evaluator(), spec)
    else:
        merged = merge_ta(src, suite.evaluator(), spec)
    save_merged(merged, out)
    _write_config(out, args, {"merge_spec": spec.to_dict()})
    print(f"merged ({spec.method}) mean score {suite.mean_score(merged.theta):.6f}")
    return EXIT_OK


def cmd_negate(args) -> int:
    suite = _suite(args)
    src = _source(args, suite)
    grid = _grid(args.alpha_grid)
    merged = negate(src, args.task, suite.task_evaluator(args.task), suite.control_evaluator(), grid,
                    args.control_floor)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_merged(merged, out)
    _write_config(out, args, {"alpha_grid": list(grid)})
    p = merged.provenance
    print(f"task {args.task}: alpha={p['alpha']:g} target loss {p['target_loss_theta0']:.4g} -> {p['target_loss']:.4g}")
    return EXIT_OK


def cmd_ood(args) -> int:
    suite = _suite(args)
    src = _source(args, suite)
    if suite.target is None:
        raise ValueError("suite has no target task")
    grid = _grid(args.alpha_grid)
    ev = suite.target.loss if args.mode == "grid" else None
    merged = ood_merge(src, suite.target_vector(), args.mode, evaluator=ev, alpha_grid=grid, sources=suite.matrix())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_merged(merged, out)
    _write_config(out, args, {"alpha_grid": list(grid)})
    p = merged.provenance
    print(f"selected {p['selected_name']} gamma_hat={p['gamma_hat']:.4f} target loss {suite.target.loss(merged.theta):.6g}")
    return EXIT_OK


def _load_stream(directory: Path) -> TaskVectorMatrix:
    manifest = json.loads((directory / "manifest.json").read_text())
    cols, names = [], []
    for f in manifest["order"]:
        c = load_collection(directory / f)
        if c.T != 1:
            raise ValueError(f"stream file {f} holds {c.T} vectors, expected 1")
        cols.append(c.column(0))
        names.append(c.names[0])
    theta0 = None
    if manifest.get("theta0"):
        theta0 = load_collection(directory / manifest["theta0"]).column(0)
    return TaskVectorMatrix(np.column_stack(cols), tuple(names), theta0)


def cmd_online(args) -> int:
    suite = None
    if args.stream:
        stream = _load_stream(Path(args.stream))
        losses = None
        if args.suite:
            suite = _suite(args)
            by_name = {t.name: t.loss for t in suite.tasks}
            losses = [by_name[n] for n in stream.names] if all(n in by_name for n in stream.names) else None
    else:
        if not args.suite:
            raise ValueError("online needs --suite or --stream")
        suite = _suite(args)
        stream = suite.matrix()
        losses = [t.loss for t in suite.tasks]
    spec = MergeSpec(method=args.merge, alpha_grid=(args.alpha,), ties_topk_fraction=args.topk)
    ae_cfg = AeConfig(steps=args.ae_steps, seed=args.seed)
    compaction = args.compaction.replace("-", "_")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    finals, summaries, timing = [], [], []
    for r in range(args.repeats):
        order = np.arange(stream.T) if r == 0 else np.random.default_rng([args.seed, r]).permutation(stream.T)
        cols = TaskVectorMatrix(stream.columns[:, order], tuple(stream.names[i] for i in order), stream.theta0)
        rl = [losses[i] for i in order] if losses is not None else None
        rep = run_stream(cols, args.m, spec, compaction, rl, ae_config=ae_cfg, seed=args.seed)
        summaries.append({"order": [int(i) for i in order], **rep.summary()})
        timing.append({k: v for k, v in rep.summary(include_timing=True).items() if k.endswith("_seconds")})
        if rep.summary()["final_mean_score"] is not None:
            finals.append(rep.summary()["final_mean_score"])
        with open(out / f"steps_{r}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "task", "score"])
            for step, task, sc in rep.csv_rows():
                w.writerow([step, int(order[task]), repr(sc)])
    summary = {
        "M": args.m,
        "compaction": compaction,
        "stream_length": stream.T,
        "runs": summaries,
        "zero_compactions": all(s["compaction_count"] == 0 for s in summaries),
    }
    if finals:
        summary["final_score_mean"] = float(np.mean(finals))
        summary["final_score_std"] = float(np.std(finals, ddof=1)) if len(finals) > 1 else 0.0
        summary["final_score_variance"] = float(np.var(finals, ddof=1)) if len(finals) > 1 else 0.0
    _write(out / "summary.json", dumps(summary))
    # wall-clock numbers live apart so summary.json stays reproducible byte for byte
    _write(out / "timing.json", dumps(timing))
    _write_config(out / "online", args, {"merge_spec": spec.to_dict(), "ae": ae_cfg.to_dict()})
    print(f"{args.repeats} run(s), compactions per run: {[s['compaction_count'] for s in summaries]}")
    return EXIT_OK


def cmd_verify(args) -> int:
    suite = _suite(args)
    m = suite.matrix()
    model = None
    failures: list[str] = []
    checks: dict = {}
    if args.model:
        model = _source(args, suite)
        inv = {}
        if model.method in (Method.AE, Method.RAND_SELECT):
            inv["simplex_violation"] = model.simplex_violation()
            inv["convexity_residual"] = model.convexity_residual(m)
            if inv["simplex_violation"] > SIMPLEX_TOL:
                failures.append(f"encoder columns leave the simplex (violation {inv['simplex_violation']:.3e})")
            if inv["convexity_residual"] > 1e-10:
                failures.append(f"B != T W_e (relative residual {inv['convexity_residual']:.3e})")
        checks["model_invariants"] = inv
        if failures:
            model = None  # bound premises are void for a corrupted model

    rng = np.random.default_rng(args.seed)
    consts = measure_constants(suite)
    checks["constants"] = consts.to_dict()
    summary: dict[str, dict] = {}
    rows: list[str] = []

    def tally(report):
        s = summary.setdefault(report.kind, {"checked": 0, "failed": 0, "not_applicable": 0, "min_slack": None})
        if not report.applicable:
            s["not_applicable"] += 1
            return
        s["checked"] += 1
        if not report.passed:
            s["failed"] += 1
            failures.append(f"{report.kind} bound violated: {report.details}")
        slacks = [r["slack"] for r in report.records if "slack" in r]
        if slacks:
            lo = min(slacks)
            s["min_slack"] = lo if s["min_slack"] is None else min(s["min_slack"], lo)
        rows.append(report.to_csv())

    use_basis = model is not None and model.method in (Method.AE, Method.RAND_SELECT)
    for _ in range(args.draws):
        tally(verify_addition_bound(suite, random_simplex(suite.T, rng), constants=consts))
        if use_basis:
            tally(verify_addition_bound(suite, random_simplex(model.M, rng), basis=model, constants=consts))
        j = int(rng.integers(suite.T))
        a = float(rng.uniform())
        tally(verify_negation_bound(suite, j, a))
        if model is not None and model.W_d is not None:
            tally(verify_negation_bound(suite, j, a, basis=model))
    if suite.target is not None:
        tally(verify_ood_bound(suite))
        if use_basis:
            tally(verify_ood_bound(suite, basis=model))
    checks["bounds"] = summary
    checks["failures"] = failures
    checks["passed"] = not failures
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "verify.json", dumps(checks))
    _write(out / "verify.csv", "".join(rows))
    _write_config(out / "verify", args)
    for kind, s in sorted(summary.items()):
        print(f"{kind}: {s['checked']} checked, {s['failed']} failed, {s['not_applicable']} not applicable")
    if failures:
        for f in failures[:10]:
            print("FAIL:", f, file=sys.stderr)
        raise TheoremFailure(f"{len(failures)} check(s) failed")
    return EXIT_OK


# ---- parser -----------------------------------------------------------------------


def _suite_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--suite", required=required,
                   help="suite directory, or a profile (orthogonal, clustered:k:cin:cout, planted_target:g)")
    p.add_argument("--d", type=int, default=256, help="dimension when generating a suite on the fly")
    p.add_argument("--T", type=int, default=8, help="task count when generating a suite on the fly")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taskbasis", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default="WARNING")
    parser.add_argument("--config", help="replay a run from its resolved *.config.json")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("generate", help="draw a synthetic quadratic task suite")
    p.add_argument("--profile", default="orthogonal")
    p.add_argument("--d", type=int, default=1024)
    p.add_argument("--T", type=int, default=8)
    p.add_argument("--norm-low", type=float, default=0.5)
    p.add_argument("--norm-high", type=float, default=1.0)
    p.add_argument("--target-gamma", type=float, default=None)
    p.add_argument("--hessian-rank", type=int, default=2)
    p.add_argument("--stream", action="store_true", help="also write a single-vector stream directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("build", help="fit a basis model")
    p.add_argument("--input", required=True, help="TVB1 collection or suite directory")
    p.add_argument("--method", choices=["ae", "pca", "rand-select", "rand-proj"], default="ae")
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--tau", type=float, default=5.0)
    p.add_argument("--anneal", default=None, help="PERIOD:FACTOR, e.g. 500:0.8")
    p.add_argument("--weight-decay", type=float, default=1e-6)
    p.add_argument("--decoder-mode", choices=["joint", "ols_refit"], default="joint")
    p.add_argument("--no-center", action="store_true", help="PCA without mean removal")
    p.add_argument("--weighting", choices=["uniform", "positive_softmax"], default="uniform")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("merge", help="merge task vectors or bases")
    _suite_args(p)
    p.add_argument("--model")
    p.add_argument("--method", choices=["ta", "ties", "lns"], default="ta")
    p.add_argument("--alpha-grid", default="0:1:21", help="START:STOP:COUNT or a comma list")
    p.add_argument("--topk", type=float, default=0.2)
    p.add_argument("--lns-bias", type=float, default=LnsConfig.sigmoid_bias)
    p.add_argument("--lns-l1", type=float, default=LnsConfig.l1_strength)
    p.add_argument("--lns-lr", type=float, default=LnsConfig.lr)
    p.add_argument("--lns-epochs", type=int, default=LnsConfig.epochs)
    p.add_argument("--lns-threshold", type=float, default=LnsConfig.binarize_threshold)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("negate", help="forget one task")
    _suite_args(p)
    p.add_argument("--model")
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--alpha-grid", default="0:1:21")
    p.add_argument("--control-floor", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_negate)

    p = sub.add_parser("ood", help="merge toward an unseen target task")
    _suite_args(p)
    p.add_argument("--model")
    p.add_argument("--mode", choices=["best_aligned", "grid"], default="best_aligned")
    p.add_argument("--alpha-grid", default="0:1:21")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ood)

    p = sub.add_parser("online", help="run fixed-budget online basis addition")
    _suite_args(p, required=False)
    p.add_argument("--stream", help="directory of single-vector TVB1 files with manifest.json")
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--compaction", choices=["ae", "rand-select"], default="ae")
    p.add_argument("--merge", choices=["ta", "ties"], default="ta")
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--topk", type=float, default=0.2)
    p.add_argument("--ae-steps", type=int, default=ONLINE_AE.steps)
    p.add_argument("--repeats", type=int, default=1, help="number of stream orders (first is the given order)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_online)

    p = sub.add_parser("verify", help="check the generalization bounds on a suite")
    _suite_args(p)
    p.add_argument("--model")
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_verify)
    return parser


COMMANDS = {"generate": cmd_generate, "build": cmd_build, "merge": cmd_merge, "negate": cmd_negate,
            "ood": cmd_ood, "online": cmd_online, "verify": cmd_verify}


def _replay_namespace(path: str) -> argparse.Namespace:
    cfg = json.loads(Path(path).read_text())
    ns = argparse.Namespace(**cfg["args"])
    if ns.command not in COMMANDS:
        raise ValueError(f"config names unknown command {ns.command!r}")
    ns.func = COMMANDS[ns.command]
    ns.config = None
    return ns


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            args = _replay_namespace(args.config)
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return EXIT_INVALID
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except TheoremFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_THEOREM
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, IndexError, KeyError, UnsupportedOperation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
