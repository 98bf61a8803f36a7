"""The iterative quantize -> record -> dequantize -> retrain loop, with
optional up-front magnitude pruning, per-iteration SSE/perplexity tracking,
quantized-weight drift, early stopping, and histogram export.

Each loop pass quantizes the current full-precision weights, records the
quantization SSE and both perplexities, then restarts training from the
dequantized weights at the reduced retraining learning rate. Records are
flushed to CSV after every iteration so interrupted runs stay inspectable.
"""

import csv
import fnmatch
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import lstm
from .errors import DimensionError, ValidationError
from .lstm import LstmParams, TrainConfig
from .model_io import ModelBundle, as_matrix, save_model, sse
from .pruning import PruneMask, magnitude_prune
from .quantizer import QuantizedTensor, dequantize, quantize_tensor, save_quantized


@dataclass
class PipelineConfig:
    k: int = 1
    tables_per_row: int = 1
    method: str = "alternating"
    iterations: int = 5
    prune_rate: float = 0.0
    prune_scope: str = "per-tensor"
    tensor_filter: tuple[str, ...] = ("lstm*.w_*",)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    retrain_epochs: int | None = None
    early_stop_patience: int | None = None
    output_dir: str | None = None
    save_artifacts: bool = False
    export_histograms: bool = False
    histogram_bins: int = 100
    alternating_tol: float = 1e-6
    alternating_max_iters: int = 50
    threads: int = 1

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if not 0.0 <= self.prune_rate < 1.0:
            raise ValidationError("prune_rate must be in [0, 1)")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ValidationError("early-stop patience must be >= 1")
        if self.retrain_epochs is not None and self.retrain_epochs < 0:
            raise ValidationError("retrain_epochs must be nonnegative")
        self.trainer.validate()


@dataclass
class IterationRecord:
    n: int
    tensor_sse: dict[str, float]
    total_sse: float
    fp_ppl: float
    q_ppl: float
    drift: float       # nan for n = 1
    seconds: float


@dataclass
class PipelineResult:
    records: list[IterationRecord]
    quantized: dict[str, QuantizedTensor]   # best iteration if early-stopped, else last
    final_bundle: ModelBundle
    best_iteration: int
    stopped_early: bool
    train_history: list[tuple[str, list[lstm.EpochMetrics]]]
    mask: PruneMask | None


def filter_predicate(patterns):
    pats = tuple(patterns)

    def match(name: str) -> bool:
        return any(fnmatch.fnmatch(name, p) for p in pats)

    return match


def early_stop_check(records: list[IterationRecord], patience: int) -> bool:
    """True once quantized perplexity has gone `patience` consecutive
    iterations without improving on the best seen."""
    if patience < 1:
        raise ValidationError("patience must be >= 1")
    best = math.inf
    streak = 0
    for rec in records:
        if rec.q_ppl < best:
            best = rec.q_ppl
            streak = 0
        else:
            streak += 1
        if streak >= patience:
            return True
    return False


def drift(q_prev: QuantizedTensor, q_curr: QuantizedTensor) -> float:
    """Squared distance between two iterations' dequantized weights."""
    same = (
        q_prev.rows == q_curr.rows and q_prev.cols == q_curr.cols
        and q_prev.k == q_curr.k
        and q_prev.tables_per_row == q_curr.tables_per_row
    )
    if not same:
        raise DimensionError("quantized tensors differ in shape, k, or tables")
    return sse(dequantize(q_prev), dequantize(q_curr))


def histogram_export(m, bins: int, path) -> None:
    """CSV histogram of (bin-left-edge, count) over [-max|w|, +max|w|].

    Quantized tensors are dequantized first so the value spikes are visible.
    """
    if bins < 2:
        raise ValidationError("bins must be >= 2")
    if isinstance(m, QuantizedTensor):
        values = dequantize(m).ravel()
    else:
        values = as_matrix(m).ravel()
    top = float(np.abs(values).max()) if values.size else 0.0
    if top == 0.0:
        top = 1.0
    edges = np.linspace(-top, top, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_left", "count"])
        for left, c in zip(edges[:-1], counts):
            writer.writerow([repr(float(left)), int(c)])


def iterations_to_within(records: list[IterationRecord], rel_margin: float = 0.05):
    """First iteration whose quantized perplexity is within rel_margin of
    that iteration's full-precision perplexity, or None."""
    for rec in records:
        if rec.q_ppl <= (1.0 + rel_margin) * rec.fp_ppl:
            return rec.n
    return None


class _RunWriter:
    """Flushes per-iteration records and per-epoch training metrics."""

    def __init__(self, out_dir, tensor_names):
        self.out_dir = out_dir
        self.tensor_names = list(tensor_names)
        self.records_path = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            os.makedirs(os.path.join(out_dir, "histograms"), exist_ok=True)
            self.records_path = os.path.join(out_dir, "records.csv")
            with open(self.records_path, "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(
                    ["n", "total_sse", "fp_ppl", "q_ppl", "drift", "seconds"]
                    + [f"sse:{n}" for n in self.tensor_names]
                )
            self.train_path = os.path.join(out_dir, "training_log.csv")
            with open(self.train_path, "w", newline="") as f:
                csv.writer(f).writerow(
                    ["phase", "epoch", "lr", "train_loss", "valid_ppl"]
                )

    def record(self, rec: IterationRecord) -> None:
        if self.records_path is None:
            return
        with open(self.records_path, "a", newline="") as f:
            csv.writer(f).writerow(
                [rec.n, repr(rec.total_sse), repr(rec.fp_ppl), repr(rec.q_ppl),
                 repr(rec.drift), f"{rec.seconds:.3f}"]
                + [repr(rec.tensor_sse[n]) for n in self.tensor_names]
            )
            f.flush()

    def epochs(self, phase: str, metrics) -> None:
        if self.records_path is None:
            return
        with open(self.train_path, "a", newline="") as f:
            writer = csv.writer(f)
            for m in metrics:
                writer.writerow(
                    [phase, m.epoch, repr(m.lr), repr(m.train_loss), repr(m.valid_ppl)]
                )
            f.flush()

    def histogram(self, name: str, obj, bins: int) -> None:
        if self.out_dir is None:
            return
        safe = name.replace("/", "_").replace(".", "_")
        histogram_export(
            obj, bins, os.path.join(self.out_dir, "histograms", f"{safe}.csv")
        )


def _selected_tensors(params: LstmParams, patterns) -> list[str]:
    match = filter_predicate(patterns)
    names = [name for name, _ in lstm.param_items(params) if match(name)]
    if not names:
        raise ValidationError(f"tensor filter {tuple(patterns)!r} selected no tensors")
    return names


def _as_2d(arr: np.ndarray) -> np.ndarray:
    return arr if arr.ndim == 2 else arr.reshape(1, -1)


def run_pipeline(
    cfg: PipelineConfig,
    corpus,
    initial_params: LstmParams | None = None,
    on_record=None,
) -> PipelineResult:
    """Full pipeline: train (or adopt) full-precision weights, optionally
    prune and retrain once, then iterate quantize / record / dequantize /
    retrain. Returns records plus the final artifacts."""
    cfg.validate()
    tcfg = cfg.trainer
    history: list[tuple[str, list[lstm.EpochMetrics]]] = []

    if initial_params is None:
        params = lstm.init_params(tcfg, corpus.vocab_size)
        params, metrics = lstm.train(params, corpus, tcfg, mode="initial")
        history.append(("initial", metrics))
    else:
        params = initial_params.copy()

    names = _selected_tensors(params, cfg.tensor_filter)
    writer = _RunWriter(cfg.output_dir, names)
    if initial_params is None:
        writer.epochs("initial", history[0][1])

    mask = None
    if cfg.prune_rate > 0.0:
        bundle = lstm.params_to_bundle(params)
        mask = magnitude_prune(
            bundle, cfg.prune_rate, cfg.prune_scope,
            filter_predicate(cfg.tensor_filter),
        )
        lstm.apply_param_mask(params, mask)
        params, metrics = lstm.train(
            params, corpus, tcfg, mask=mask, mode="retrain",
            epochs=cfg.retrain_epochs,
        )
        history.append(("prune_retrain", metrics))
        writer.epochs("prune_retrain", metrics)

    def mask_for(name: str):
        if mask is None:
            return None
        m = mask.get(name)
        return None if m is None else m.reshape(_as_2d(dict(lstm.param_items(params))[name]).shape)

    records: list[IterationRecord] = []
    prev_deq: dict[str, np.ndarray] | None = None
    quantized: dict[str, QuantizedTensor] = {}
    best_iter = 0
    best_ppl = math.inf
    best_quantized: dict[str, QuantizedTensor] = {}
    stopped = False

    if cfg.output_dir and cfg.export_histograms:
        for name in names:
            writer.histogram(
                f"{name}.fp_initial", _as_2d(dict(lstm.param_items(params))[name]),
                cfg.histogram_bins,
            )

    for n in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        param_map = dict(lstm.param_items(params))
        quantized = {}
        tensor_sse = {}
        deq = {}
        for name in names:
            mat = _as_2d(param_map[name])
            q = quantize_tensor(
                mat, cfg.k, cfg.tables_per_row, mask_for(name), cfg.method,
                tol=cfg.alternating_tol, max_iters=cfg.alternating_max_iters,
                threads=cfg.threads,
            )
            quantized[name] = q
            tensor_sse[name] = q.total_sse()
            deq[name] = dequantize(q)
        total_sse = float(sum(tensor_sse.values()))
        fp_ppl = lstm.evaluate_perplexity(params, corpus.valid)
        q_params = params.copy()
        q_map = dict(lstm.param_items(q_params))
        for name in names:
            q_map[name][...] = deq[name].reshape(q_map[name].shape)
        q_ppl = lstm.evaluate_perplexity(q_params, corpus.valid)
        d = math.nan
        if prev_deq is not None:
            d = float(sum(sse(prev_deq[name], deq[name]) for name in names))
        rec = IterationRecord(
            n=n, tensor_sse=tensor_sse, total_sse=total_sse,
            fp_ppl=fp_ppl, q_ppl=q_ppl, drift=d,
            seconds=time.perf_counter() - t0,
        )
        records.append(rec)
        writer.record(rec)
        if on_record is not None:
            on_record(rec)
        if cfg.output_dir and cfg.save_artifacts:
            for name in names:
                safe = name.replace("/", "_").replace(".", "_")
                save_quantized(
                    quantized[name],
                    os.path.join(cfg.output_dir, f"iter{n:03d}_{safe}.iqqt"),
                )
        if cfg.output_dir and cfg.export_histograms:
            for name in names:
                writer.histogram(f"{name}.iter{n:03d}", quantized[name], cfg.histogram_bins)
        prev_deq = deq

        if q_ppl < best_ppl:
            best_ppl = q_ppl
            best_iter = n
            best_quantized = quantized
        if cfg.early_stop_patience is not None and early_stop_check(
            records, cfg.early_stop_patience
        ):
            stopped = True
            break

        # dequantized weights seed the next retraining round
        p_map = dict(lstm.param_items(params))
        for name in names:
            p_map[name][...] = deq[name].reshape(p_map[name].shape)
        params, metrics = lstm.train(
            params, corpus, tcfg, mask=mask, mode="retrain",
            epochs=cfg.retrain_epochs,
        )
        phase = f"retrain_{n}"
        history.append((phase, metrics))
        writer.epochs(phase, metrics)

    final_bundle = lstm.params_to_bundle(
        params, {"seed": tcfg.seed, "iterations": len(records)}
    )
    if cfg.output_dir:
        save_model(final_bundle, os.path.join(cfg.output_dir, "final_model.iqwt"))
        with open(os.path.join(cfg.output_dir, "config.json"), "w") as f:
            json.dump(asdict(cfg), f, indent=2, default=str)
    result_q = best_quantized if stopped else quantized
    return PipelineResult(
        records=records,
        quantized=result_q,
        final_bundle=final_bundle,
        best_iteration=best_iter,
        stopped_early=stopped,
        train_history=history,
        mask=mask,
    )
