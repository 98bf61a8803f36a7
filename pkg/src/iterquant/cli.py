"""Command-line front end: quantize, prune, iterate, report, selftest.

Every command is deterministic given identical inputs, flags, and seed.
Exit codes: 0 success, 2 format or I/O error, 3 validation error,
4 numerical failure. Run directories always contain a manifest, finalized
on exit whether the run succeeded or not.
"""

import argparse
import dataclasses
import datetime
import fnmatch
import json
import os
import sys

import numpy as np

from . import __version__
from .corpus import load_corpus
from .errors import FormatError, NumericalError, ValidationError
from .lstm import TrainConfig
from .model_io import load_model
from .pipeline import PipelineConfig, run_pipeline
from .pruning import magnitude_prune, mask_from_bundle, mask_to_bundle
from .quantizer import (
    dequantize,
    load_quantized,
    quantize_tensor,
    save_quantized,
)
from .storage import storage_report

EXIT_OK = 0
EXIT_FORMAT = 2
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4


def _utcnow() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


class Manifest:
    """Written before a run starts, finalized on exit, success or failure."""

    def __init__(self, out_dir: str, command: str, config: dict):
        self.path = os.path.join(out_dir, "manifest.json")
        self.data = {
            "command": command,
            "config": config,
            "version": __version__,
            "started": _utcnow(),
            "finished": None,
            "status": "running",
        }
        os.makedirs(out_dir, exist_ok=True)
        self._write()

    def _write(self) -> None:
        with open(self.path, "w") as f:
            json.dump(self.data, f, indent=2, default=str)

    def finalize(self, status: str, **extra) -> None:
        self.data["status"] = status
        self.data["finished"] = _utcnow()
        self.data.update(extra)
        self._write()


def _match_any(name: str, patterns) -> bool:
    return any(fnmatch.fnmatch(name, p) for p in patterns)


def _emit(args, payload: dict, text: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2, default=str))
    else:
        print(text)


# ---------------------------------------------------------------------------
# quantize
# ---------------------------------------------------------------------------


def cmd_quantize(args) -> int:
    bundle = load_model(args.model)
    patterns = args.filter or ["*"]
    selected = [
        (name, m) for name, m in bundle.tensors if _match_any(name, patterns)
    ]
    if not selected:
        raise ValidationError("no tensors matched the filter")
    masks = {}
    if args.mask:
        masks = mask_from_bundle(load_model(args.mask)).masks
    single = len(selected) == 1 and args.out.endswith(".iqqt")
    out_dir = None if single else args.out
    manifest = None
    if out_dir is not None:
        manifest = Manifest(
            out_dir, "quantize",
            {"model": args.model, "bits": args.bits, "tables": args.tables,
             "method": args.method, "mask": args.mask,
             "alpha_dtype": args.alpha_dtype, "filter": patterns},
        )
    rows = []
    try:
        for name, m in selected:
            q = quantize_tensor(
                m, args.bits, args.tables, masks.get(name), args.method,
                threads=args.threads,
            )
            if single:
                path = args.out
            else:
                safe = name.replace("/", "_").replace(".", "_")
                path = os.path.join(out_dir, f"{safe}.iqqt")
            save_quantized(q, path, alpha_dtype=args.alpha_dtype)
            rows.append({
                "tensor": name, "rows": q.rows, "cols": q.cols,
                "sse": q.total_sse(), "empty_segments": len(q.empty_segments()),
                "artifact": path,
            })
    except Exception:
        if manifest:
            manifest.finalize("failed")
        raise
    if manifest:
        manifest.finalize("ok")
    total = sum(r["sse"] for r in rows)
    lines = [f"{'tensor':24s} {'shape':>12s} {'sse':>14s}"]
    for r in rows:
        lines.append(
            f"{r['tensor']:24s} {r['rows']:>5d}x{r['cols']:<6d} {r['sse']:>14.6f}"
        )
    lines.append(f"{'total':24s} {'':>12s} {total:>14.6f}")
    _emit(args, {"tensors": rows, "total_sse": total}, "\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# prune
# ---------------------------------------------------------------------------


def cmd_prune(args) -> int:
    bundle = load_model(args.model)
    patterns = args.filter or ["*"]
    if args.rate == 0.0:
        print("warning: rate 0 keeps every weight (identity mask)", file=sys.stderr)
    mask = magnitude_prune(
        bundle, args.rate, args.scope, lambda n: _match_any(n, patterns)
    )
    from .model_io import save_model

    save_model(mask_to_bundle(mask), args.out_mask)
    per_tensor = [
        {"tensor": name, "survivors": int(m.sum()), "size": int(m.size)}
        for name, m in mask.masks.items()
    ]
    payload = {
        "requested_rate": args.rate,
        "achieved_rate": mask.achieved_rate(),
        "survivors": mask.survivor_count(),
        "total": mask.total_count(),
        "tensors": per_tensor,
        "mask_file": args.out_mask,
    }
    lines = [
        f"requested rate {args.rate:.4f}, achieved {mask.achieved_rate():.6f}",
        f"survivors {mask.survivor_count()} / {mask.total_count()}",
    ]
    for row in per_tensor:
        lines.append(
            f"  {row['tensor']:24s} {row['survivors']:>9d} / {row['size']}"
        )
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# iterate
# ---------------------------------------------------------------------------

_PIPELINE_KEYS = {
    "k", "tables_per_row", "method", "iterations", "prune_rate", "prune_scope",
    "tensor_filter", "retrain_epochs", "early_stop_patience", "save_artifacts",
    "export_histograms", "histogram_bins", "alternating_tol",
    "alternating_max_iters", "threads",
}
_CONFIG_ONLY_KEYS = {"corpus", "splits", "trainer", "output_dir"}


def resolve_config(doc: dict, out_dir: str | None, threads: int | None):
    """Materialize a PipelineConfig from a JSON document; flags override."""
    unknown = set(doc) - _PIPELINE_KEYS - _CONFIG_ONLY_KEYS
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    trainer_doc = doc.get("trainer", {})
    t_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    bad = set(trainer_doc) - t_fields
    if bad:
        raise ValidationError(f"unknown trainer keys: {sorted(bad)}")
    trainer = TrainConfig(**trainer_doc)
    kwargs = {k: doc[k] for k in _PIPELINE_KEYS if k in doc}
    if "tensor_filter" in kwargs:
        kwargs["tensor_filter"] = tuple(kwargs["tensor_filter"])
    cfg = PipelineConfig(trainer=trainer, **kwargs)
    cfg.output_dir = out_dir or doc.get("output_dir")
    if threads is not None:
        cfg.threads = threads
    corpus_path = doc.get("corpus", "demo")
    splits = tuple(doc.get("splits", (0.9, 0.05, 0.05)))
    return cfg, corpus_path, splits


def cmd_iterate(args) -> int:
    with open(args.config) as f:
        doc = json.load(f)
    out_dir = args.out or doc.get("output_dir")
    if not out_dir:
        stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
        out_dir = os.path.join("runs", f"run-{stamp}")
    threads = args.threads if args.threads else (os.cpu_count() or 1)
    cfg, corpus_path, splits = resolve_config(doc, out_dir, threads)
    cfg.validate()
    corpus = load_corpus(corpus_path, splits)
    manifest = Manifest(
        out_dir, "iterate",
        {**dataclasses.asdict(cfg), "corpus": str(corpus_path), "splits": splits},
    )
    manifest.data["corpus_checksum"] = corpus.checksum
    manifest._write()

    def printer(rec):
        print(
            f"iter {rec.n:3d}  sse {rec.total_sse:12.4f}  "
            f"fp-ppl {rec.fp_ppl:9.4f}  q-ppl {rec.q_ppl:9.4f}  "
            f"drift {rec.drift:12.4f}  {rec.seconds:6.1f}s",
            flush=True,
        )

    try:
        result = run_pipeline(cfg, corpus, on_record=printer)
    except Exception:
        manifest.finalize("failed")
        raise
    manifest.finalize(
        "ok",
        iterations_completed=len(result.records),
        best_iteration=result.best_iteration,
        stopped_early=result.stopped_early,
    )
    print(f"run directory: {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(args) -> int:
    if args.run_dir:
        return _report_run_dir(args)
    if args.artifact:
        q = load_quantized(args.artifact)
        rows, cols, k, tables = q.rows, q.cols, q.k, q.tables_per_row
        prune_rate = 0.0
        if q.mask is not None:
            prune_rate = 1.0 - float(q.mask.sum()) / q.mask.size
        mask_bits = args.mask_bits if args.mask_bits is not None else (
            1.0 if prune_rate > 0 else 0.0
        )
        alpha_bits = args.alpha_bits
        if args.histograms:
            base = os.path.splitext(args.artifact)[0]
            from .pipeline import histogram_export

            histogram_export(q, args.bins, base + "_hist.csv")
            print(f"histogram written to {base}_hist.csv")
    else:
        required = {"rows": args.rows, "cols": args.cols, "bits": args.bits}
        missing = [name for name, v in required.items() if v is None]
        if missing:
            raise ValidationError(
                f"report needs --artifact or shape flags; missing {missing}"
            )
        rows, cols, k, tables = args.rows, args.cols, args.bits, args.tables
        prune_rate = args.prune_rate
        mask_bits = args.mask_bits if args.mask_bits is not None else (
            1.0 if prune_rate > 0 else 0.0
        )
        alpha_bits = args.alpha_bits
    report = storage_report(
        rows, cols, k, tables, prune_rate, mask_bits, alpha_bits
    )
    ternary = 2.0 / report.total_bits_per_weight if report.total_bits_per_weight else 0.0
    payload = report.as_dict()
    payload.update({
        "rows": rows, "cols": cols, "k": k, "tables_per_row": tables,
        "prune_rate": prune_rate, "alpha_bits": alpha_bits,
        "vs_2bit_ternary": ternary,
    })
    text = (
        f"shape {rows}x{cols}, k={k}, tables/row={tables}, "
        f"prune_rate={prune_rate:.4g}, alpha_bits={alpha_bits}\n"
        + report.text_block()
        + f"\nvs_2bit_ternary         {ternary:.4g}x"
    )
    _emit(args, payload, text)
    return EXIT_OK


def _report_run_dir(args) -> int:
    """Aggregate storage accounting over a pipeline run's quantized tensors."""
    with open(os.path.join(args.run_dir, "config.json")) as f:
        cfg = json.load(f)
    bundle = load_model(os.path.join(args.run_dir, "final_model.iqwt"))
    patterns = cfg.get("tensor_filter", ["*"])
    prune_rate = float(cfg.get("prune_rate", 0.0))
    mask_bits = args.mask_bits if args.mask_bits is not None else (
        1.0 if prune_rate > 0 else 0.0
    )
    reports = []
    for name, m in bundle.tensors:
        if not _match_any(name, patterns):
            continue
        rep = storage_report(
            m.shape[0], m.shape[1], int(cfg["k"]), int(cfg["tables_per_row"]),
            prune_rate, mask_bits, args.alpha_bits,
        )
        reports.append((name, m.shape, rep))
    if not reports:
        raise ValidationError("run config filter matched no tensors in final model")
    payload = []
    lines = []
    for name, shape, rep in reports:
        payload.append({"tensor": name, "rows": shape[0], "cols": shape[1],
                        **rep.as_dict()})
        lines.append(f"-- {name} ({shape[0]}x{shape[1]})")
        lines.append(rep.text_block())
    _emit(args, {"tensors": payload}, "\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------


def _exhaustive_1bit_sse(w: np.ndarray) -> float:
    # best SSE over all sign vectors b with per-b optimal alpha = w.b / n
    n = w.size
    codes = np.arange(1 << n, dtype=np.uint32)
    signs = (((codes[:, None] >> np.arange(n)) & 1) * 2 - 1).astype(np.float64)
    proj = signs @ w
    ww = float(np.dot(w, w))
    return ww - float(np.max(proj**2)) / n


def _exhaustive_fixed_alpha_sse(w: np.ndarray, alphas: np.ndarray) -> float:
    # best SSE over all sign matrices B for fixed alphas, enumerated directly
    n = w.size
    k = alphas.size
    m = 1 << k
    pattern_vals = (
        ((np.arange(m, dtype=np.uint32)[:, None] >> np.arange(k)) & 1) * 2 - 1
    ).astype(np.float64) @ alphas
    assignments = np.arange(m**n)
    digits = (assignments[:, None] // m ** np.arange(n)) % m   # (m^n, n)
    recon = pattern_vals[digits]
    return float(((w - recon) ** 2).sum(axis=1).min())


def cmd_selftest(args) -> int:
    from . import _kernels as K
    from .lstm import backward, forward, grad_check, init_params
    from .quantizer import alternating_quantize, build_codebook

    rng = np.random.default_rng(7)
    failures = []

    def check(label: str, ok: bool) -> None:
        print(f"{'PASS' if ok else 'FAIL'}  {label}", flush=True)
        if not ok:
            failures.append(label)

    # 1-bit closed form matches exhaustive enumeration
    ok = True
    for _ in range(200):
        n = int(rng.integers(2, 11))
        w = rng.normal(size=n)
        alphas, signs = K.greedy_quantize(w, 1)
        got = K.recon_sse(w, alphas, signs)
        ok &= got <= _exhaustive_1bit_sse(w) + 1e-9
    check("1-bit quantization matches exhaustive optimum", ok)

    # nearest-code sign step is optimal for fixed scale factors
    ok = True
    for _ in range(60):
        n = int(rng.integers(2, 6))
        k = int(rng.integers(1, 4))
        w = rng.normal(size=n)
        alphas = np.abs(rng.normal(size=k)) + 0.1
        cb = build_codebook(alphas)
        idx = K.assign_codes(w, cb.values)
        signs = np.ascontiguousarray(cb.signs[idx].T)
        got = K.recon_sse(w, alphas, signs)
        ok &= got <= _exhaustive_fixed_alpha_sse(w, alphas) + 1e-9
    check("nearest-code step matches exhaustive sign search", ok)

    # alternating never loses to greedy
    ok = True
    for _ in range(100):
        w = rng.normal(size=24)
        seg = alternating_quantize(w, 2)
        a_g, s_g = K.greedy_quantize(w, 2)
        ok &= seg.sse <= K.recon_sse(w, a_g, s_g) + 1e-12
    check("alternating SSE never exceeds greedy SSE", ok)

    # gradient check: clean passes, tampered fails. The fixture scales the
    # init and warms the carried state so no sampled coordinate sits at the
    # central-difference noise floor.
    from .lstm import TrainConfig as TC
    from .lstm import param_items

    cfg = TC(hidden=8, layers=1, bptt_len=4, batch=6, epochs=1, seed=15)
    vocab = 11
    params = init_params(cfg, vocab)
    for _, arr in param_items(params):
        arr *= 5.0
    warm_rng = np.random.default_rng(15 + 1000)
    _, state, _ = forward(
        params,
        warm_rng.integers(0, vocab, size=(6, 6)),
        warm_rng.integers(0, vocab, size=(6, 6)),
    )
    flat = np.tile(np.arange(vocab), 3)[: 6 * 4]
    inputs = flat.reshape(6, 4)
    targets = np.roll(flat, 1).reshape(6, 4)
    err = grad_check(params, inputs, targets, samples_per_tensor=200,
                     seed=15, state=state)
    check("gradient check under 1e-4", err < 1e-4)
    _, _, caches = forward(params, inputs, targets, state)
    bad = backward(caches)
    bad.w_h[0] = bad.w_h[0] * 1.5 + 0.01
    err_bad = grad_check(params, inputs, targets, samples_per_tensor=200,
                         seed=15, grads=bad, state=state)
    check("tampered gradients detected (error above 1e-2)", err_bad > 1e-2)

    # pack/unpack round trip
    from .bitpack import pack_bits, unpack_bits

    bits = rng.random(1000) < 0.5
    ok = bool(np.array_equal(unpack_bits(pack_bits(bits), 1000), bits))
    check("bit-plane pack/unpack round trip", ok)

    # golden fixture: hand-traced 2-bit example
    seg = alternating_quantize(np.array([1.0, -2.0, 3.0]), 2, tol=1e-9)
    ok = (
        np.allclose(seg.alphas, [2.25, 0.75], atol=1e-12)
        and abs(seg.sse - 0.5) < 1e-12
    )
    check("worked 2-bit fixture (alphas 2.25/0.75, sse 0.5)", ok)

    if failures:
        print(f"{len(failures)} selftest failure(s)", file=sys.stderr)
        return 1
    print("selftest ok")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iterquant",
        description="Iterative binary-code weight quantization toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="quantize an IQWT model into IQQT artifacts")
    p.add_argument("model")
    p.add_argument("--bits", type=int, default=1)
    p.add_argument("--tables", type=int, default=1)
    p.add_argument("--method", choices=["greedy", "refined", "alternating"],
                   default="alternating")
    p.add_argument("--mask", default=None, help="prune-mask bundle (IQWT)")
    p.add_argument("--out", required=True,
                   help="output .iqqt file (single tensor) or directory")
    p.add_argument("--alpha-dtype", choices=["f32", "f16"], default="f32")
    p.add_argument("--filter", action="append", default=None,
                   help="tensor name glob, repeatable (default: all)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("prune", help="build a magnitude prune mask")
    p.add_argument("model")
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--scope", choices=["per-tensor", "global"], default="per-tensor")
    p.add_argument("--out-mask", required=True)
    p.add_argument("--filter", action="append", default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("iterate", help="run the quantize/retrain pipeline")
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--out", default=None, help="run directory")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_iterate)

    p = sub.add_parser("report", help="storage accounting report")
    p.add_argument("--artifact", default=None, help="IQQT file to report on")
    p.add_argument("--run-dir", default=None)
    p.add_argument("--rows", type=int, default=None)
    p.add_argument("--cols", type=int, default=None)
    p.add_argument("--bits", type=int, default=None)
    p.add_argument("--tables", type=int, default=1)
    p.add_argument("--alpha-bits", type=int, default=16)
    p.add_argument("--prune-rate", type=float, default=0.0)
    p.add_argument("--mask-bits", type=float, default=None,
                   help="mask bits/weight (default: 1.0 raw bitmask if pruned)")
    p.add_argument("--histograms", action="store_true")
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="run built-in brute-force oracle checks")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as err:
        print(f"error: file not found: {err.filename}", file=sys.stderr)
        return EXIT_FORMAT
    except FormatError as err:
        print(f"format error: {err}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_FORMAT
    except ValidationError as err:
        print(f"validation error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as err:
        print(f"numerical failure: {err} {err.context}", file=sys.stderr)
        return EXIT_NUMERICAL


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
