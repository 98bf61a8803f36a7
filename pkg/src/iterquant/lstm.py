"""Character-level LSTM language model trained from scratch with
truncated BPTT, SGD with global-norm clipping, masked updates, and
finite-difference gradient verification.

Gate layout inside every 4h block is [input, forget, cell-candidate,
output]. Inputs are one-hot byte classes (no embedding matrix), so the
quantizable tensor set stays small and explicit. All arithmetic is float64.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericalError, ValidationError
from .model_io import ModelBundle


@dataclass
class TrainConfig:
    hidden: int = 64
    layers: int = 1
    bptt_len: int = 32
    batch: int = 32
    epochs: int = 4
    lr_init: float = 2.0
    lr_decay: float = 0.7
    decay_start_epoch: int = 2
    clip_norm: float = 5.0
    seed: int = 1
    retrain_lr_divisor: float = 100.0

    def validate(self) -> None:
        positive = {
            "hidden": self.hidden, "layers": self.layers,
            "bptt_len": self.bptt_len, "batch": self.batch,
            "epochs": self.epochs, "lr_init": self.lr_init,
            "lr_decay": self.lr_decay, "clip_norm": self.clip_norm,
        }
        for name, v in positive.items():
            if v <= 0:
                raise ValidationError(f"{name} must be positive, got {v}")
        if self.decay_start_epoch < 0:
            raise ValidationError("decay_start_epoch must be nonnegative")
        if self.retrain_lr_divisor < 1:
            raise ValidationError("retrain_lr_divisor must be >= 1")


@dataclass
class LstmParams:
    w_x: list[np.ndarray]      # per layer, (4h, input_dim)
    w_h: list[np.ndarray]      # per layer, (4h, h)
    bias: list[np.ndarray]     # per layer, (4h,)
    w_out: np.ndarray          # (V, h)
    b_out: np.ndarray          # (V,)

    @property
    def hidden(self) -> int:
        return self.w_h[0].shape[1]

    @property
    def vocab_size(self) -> int:
        return self.w_out.shape[0]

    @property
    def layers(self) -> int:
        return len(self.w_x)

    def copy(self) -> "LstmParams":
        return LstmParams(
            w_x=[w.copy() for w in self.w_x],
            w_h=[w.copy() for w in self.w_h],
            bias=[b.copy() for b in self.bias],
            w_out=self.w_out.copy(),
            b_out=self.b_out.copy(),
        )


def param_items(params: LstmParams) -> list[tuple[str, np.ndarray]]:
    """Canonical (name, array) pairs; names match the bundle layout."""
    items = []
    for layer in range(params.layers):
        items.append((f"lstm{layer + 1}.w_x", params.w_x[layer]))
        items.append((f"lstm{layer + 1}.w_h", params.w_h[layer]))
        items.append((f"lstm{layer + 1}.bias", params.bias[layer]))
    items.append(("out.w", params.w_out))
    items.append(("out.b", params.b_out))
    return items


def params_to_bundle(params: LstmParams, metadata: dict | None = None) -> ModelBundle:
    tensors = [
        (name, arr.reshape(1, -1) if arr.ndim == 1 else arr)
        for name, arr in param_items(params)
    ]
    meta = {
        "kind": "char-lstm",
        "hidden": str(params.hidden),
        "layers": str(params.layers),
        "vocab": str(params.vocab_size),
    }
    if metadata:
        meta.update({k: str(v) for k, v in metadata.items()})
    return ModelBundle(tensors, meta)


def bundle_to_params(bundle: ModelBundle) -> LstmParams:
    layers = int(bundle.metadata["layers"])
    w_x, w_h, bias = [], [], []
    for layer in range(1, layers + 1):
        w_x.append(bundle.tensor(f"lstm{layer}.w_x").copy())
        w_h.append(bundle.tensor(f"lstm{layer}.w_h").copy())
        bias.append(bundle.tensor(f"lstm{layer}.bias").ravel().copy())
    return LstmParams(
        w_x=w_x, w_h=w_h, bias=bias,
        w_out=bundle.tensor("out.w").copy(),
        b_out=bundle.tensor("out.b").ravel().copy(),
    )


def init_params(cfg: TrainConfig, vocab_size: int) -> LstmParams:
    """Uniform [-0.1, 0.1] weights from the seeded generator; forget-gate
    bias 1.0, other biases 0."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    h = cfg.hidden
    w_x, w_h, bias = [], [], []
    for layer in range(cfg.layers):
        in_dim = vocab_size if layer == 0 else h
        w_x.append(rng.uniform(-0.1, 0.1, size=(4 * h, in_dim)))
        w_h.append(rng.uniform(-0.1, 0.1, size=(4 * h, h)))
        b = np.zeros(4 * h)
        b[h : 2 * h] = 1.0
        bias.append(b)
    w_out = rng.uniform(-0.1, 0.1, size=(vocab_size, h))
    b_out = np.zeros(vocab_size)
    return LstmParams(w_x=w_x, w_h=w_h, bias=bias, w_out=w_out, b_out=b_out)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # 0.5 * (1 + tanh(z/2)): stable, no overflow warnings
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def zero_state(params: LstmParams, batch: int) -> list[tuple[np.ndarray, np.ndarray]]:
    h = params.hidden
    return [(np.zeros((batch, h)), np.zeros((batch, h))) for _ in range(params.layers)]


def forward(params: LstmParams, inputs: np.ndarray, targets: np.ndarray, state=None):
    """Run the window; returns (mean NLL in nats, new state, caches).

    inputs and targets are (batch, time) int arrays of token ids; the new
    state is detached (constants for the next window).
    """
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    if inputs.shape != targets.shape or inputs.ndim != 2:
        raise DimensionError("inputs and targets must be equal (batch, time) arrays")
    batch, time = inputs.shape
    v = params.vocab_size
    hd = params.hidden
    if state is None:
        state = zero_state(params, batch)

    x_onehot = np.zeros((time, batch, v))
    x_onehot[np.arange(time)[:, None], np.arange(batch)[None, :], inputs.T] = 1.0

    layer_caches = []
    h_in = x_onehot
    new_state = []
    for layer in range(params.layers):
        wx_t = params.w_x[layer].T
        wh_t = params.w_h[layer].T
        b = params.bias[layer]
        h, c = state[layer]
        gi = np.empty((time, batch, hd))
        gf = np.empty((time, batch, hd))
        gg = np.empty((time, batch, hd))
        go = np.empty((time, batch, hd))
        tanh_c = np.empty((time, batch, hd))
        h_prev = np.empty((time, batch, hd))
        c_prev = np.empty((time, batch, hd))
        h_out = np.empty((time, batch, hd))
        for t in range(time):
            z = h_in[t] @ wx_t + h @ wh_t + b
            i = _sigmoid(z[:, :hd])
            f = _sigmoid(z[:, hd : 2 * hd])
            g = np.tanh(z[:, 2 * hd : 3 * hd])
            o = _sigmoid(z[:, 3 * hd :])
            h_prev[t] = h
            c_prev[t] = c
            c = f * c + i * g
            tc = np.tanh(c)
            h = o * tc
            gi[t], gf[t], gg[t], go[t], tanh_c[t] = i, f, g, o, tc
            h_out[t] = h
        new_state.append((h.copy(), c.copy()))
        layer_caches.append(
            dict(inputs=h_in, i=gi, f=gf, g=gg, o=go, tanh_c=tanh_c,
                 h_prev=h_prev, c_prev=c_prev)
        )
        h_in = h_out

    logits = h_in @ params.w_out.T + params.b_out
    m = logits.max(axis=-1, keepdims=True)
    exp = np.exp(logits - m)
    z_sum = exp.sum(axis=-1, keepdims=True)
    probs = exp / z_sum
    log_z = (m + np.log(z_sum))[..., 0]
    t_idx = np.arange(time)[:, None]
    b_idx = np.arange(batch)[None, :]
    nll = log_z - logits[t_idx, b_idx, targets.T]
    loss = float(nll.mean())
    if not math.isfinite(loss):
        raise NumericalError("non-finite loss in forward pass", {"loss": loss})
    caches = dict(
        params=params, layers=layer_caches, h_top=h_in, probs=probs,
        targets=targets, nll=nll, batch=batch, time=time,
    )
    return loss, new_state, caches


def backward(caches) -> LstmParams:
    """Exact gradients of the mean NLL over the window (truncated at the
    window boundary). Returns gradients in LstmParams shape."""
    params: LstmParams = caches["params"]
    time, batch = caches["time"], caches["batch"]
    hd = params.hidden
    targets = caches["targets"]
    dlogits = caches["probs"].copy()
    t_idx = np.arange(time)[:, None]
    b_idx = np.arange(batch)[None, :]
    dlogits[t_idx, b_idx, targets.T] -= 1.0
    dlogits /= time * batch

    h_top = caches["h_top"]
    d_w_out = np.einsum("tbv,tbh->vh", dlogits, h_top)
    d_b_out = dlogits.sum(axis=(0, 1))
    dh_seq = dlogits @ params.w_out

    d_w_x, d_w_h, d_bias = [], [], []
    for layer in range(params.layers - 1, -1, -1):
        lc = caches["layers"][layer]
        gi, gf, gg, go = lc["i"], lc["f"], lc["g"], lc["o"]
        tanh_c, h_prev, c_prev = lc["tanh_c"], lc["h_prev"], lc["c_prev"]
        x_in = lc["inputs"]
        wx = params.w_x[layer]
        wh = params.w_h[layer]
        dz_seq = np.empty((time, batch, 4 * hd))
        dh_next = np.zeros((batch, hd))
        dc_next = np.zeros((batch, hd))
        for t in range(time - 1, -1, -1):
            dh = dh_seq[t] + dh_next
            do = dh * tanh_c[t]
            dc = dc_next + dh * go[t] * (1.0 - tanh_c[t] ** 2)
            di = dc * gg[t]
            dg = dc * gi[t]
            df = dc * c_prev[t]
            dc_next = dc * gf[t]
            dz = dz_seq[t]
            dz[:, :hd] = di * gi[t] * (1.0 - gi[t])
            dz[:, hd : 2 * hd] = df * gf[t] * (1.0 - gf[t])
            dz[:, 2 * hd : 3 * hd] = dg * (1.0 - gg[t] ** 2)
            dz[:, 3 * hd :] = do * go[t] * (1.0 - go[t])
            dh_next = dz @ wh
        d_w_x.append(np.einsum("tbz,tbi->zi", dz_seq, x_in))
        d_w_h.append(np.einsum("tbz,tbh->zh", dz_seq, h_prev))
        d_bias.append(dz_seq.sum(axis=(0, 1)))
        if layer > 0:
            dh_seq = dz_seq @ wx
    d_w_x.reverse()
    d_w_h.reverse()
    d_bias.reverse()
    return LstmParams(w_x=d_w_x, w_h=d_w_h, bias=d_bias,
                      w_out=d_w_out, b_out=d_b_out)


def _grad_arrays(grads: LstmParams) -> list[np.ndarray]:
    return [arr for _, arr in param_items(grads)]


def global_norm(grads: LstmParams) -> float:
    return math.sqrt(sum(float(np.dot(g.ravel(), g.ravel()))
                         for g in _grad_arrays(grads)))


def sgd_step(
    params: LstmParams,
    grads: LstmParams,
    lr: float,
    clip_norm: float,
    mask: dict[str, np.ndarray] | None = None,
) -> LstmParams:
    """In-place SGD update with global-norm clipping; masked positions are
    re-zeroed so pruned weights receive no effective update."""
    norm = global_norm(grads)
    scale = lr
    if clip_norm > 0 and norm > clip_norm:
        scale = lr * clip_norm / norm
    for (name, p), g in zip(param_items(params), _grad_arrays(grads)):
        p -= scale * g
        if mask is not None and name in mask:
            p[~mask[name].reshape(p.shape)] = 0.0
    return params


def _mask_dict(mask) -> dict[str, np.ndarray] | None:
    """Accept a PruneMask or a plain name->bool-array dict."""
    if mask is None:
        return None
    if hasattr(mask, "masks"):
        return mask.masks
    return mask


def apply_param_mask(params: LstmParams, mask) -> LstmParams:
    md = _mask_dict(mask)
    if md:
        for name, p in param_items(params):
            if name in md:
                p[~md[name].reshape(p.shape)] = 0.0
    return params


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    valid_ppl: float


def _batch_streams(tokens: np.ndarray, batch: int) -> np.ndarray:
    stream_len = tokens.size // batch
    if stream_len < 2:
        raise ValidationError("corpus too small for the requested batch size")
    return tokens[: stream_len * batch].reshape(batch, stream_len)


def train(
    params: LstmParams,
    corpus,
    cfg: TrainConfig,
    mask=None,
    mode: str = "initial",
    epochs: int | None = None,
) -> tuple[LstmParams, list[EpochMetrics]]:
    """Epoch loop over contiguous batch streams of the training split.

    lr at epoch e is base * lr_decay ** max(0, e - decay_start_epoch) with
    base = lr_init, divided by retrain_lr_divisor in retrain mode. Hidden
    state carries across windows within an epoch and resets between epochs.
    Deterministic for a fixed (params, corpus, config).
    """
    cfg.validate()
    if mode not in ("initial", "retrain"):
        raise ValidationError(f"unknown training mode {mode!r}")
    md = _mask_dict(mask)
    apply_param_mask(params, md)
    n_epochs = cfg.epochs if epochs is None else epochs
    if n_epochs < 0:
        raise ValidationError("epoch count must be nonnegative")
    base_lr = cfg.lr_init / (cfg.retrain_lr_divisor if mode == "retrain" else 1.0)
    streams = _batch_streams(corpus.train, cfg.batch)
    stream_len = streams.shape[1]
    metrics: list[EpochMetrics] = []
    for epoch in range(n_epochs):
        lr = base_lr * cfg.lr_decay ** max(0, epoch - cfg.decay_start_epoch)
        state = zero_state(params, cfg.batch)
        losses = []
        pos = 0
        window = 0
        while pos + 1 < stream_len:
            t_len = min(cfg.bptt_len, stream_len - 1 - pos)
            inputs = streams[:, pos : pos + t_len]
            tgts = streams[:, pos + 1 : pos + t_len + 1]
            try:
                loss, state, caches = forward(params, inputs, tgts, state)
            except NumericalError as err:
                err.context.update({"epoch": epoch, "window": window})
                raise
            grads = backward(caches)
            sgd_step(params, grads, lr, cfg.clip_norm, md)
            losses.append(loss)
            pos += t_len
            window += 1
        for _, p in param_items(params):
            if not np.all(np.isfinite(p)):
                raise NumericalError(
                    "non-finite parameters after epoch", {"epoch": epoch}
                )
        valid_ppl = evaluate_perplexity(params, corpus.valid)
        metrics.append(EpochMetrics(
            epoch=epoch, lr=lr,
            train_loss=float(np.mean(losses)) if losses else math.nan,
            valid_ppl=valid_ppl,
        ))
    return params, metrics


def evaluate_perplexity(params: LstmParams, split: np.ndarray, chunk: int = 256) -> float:
    """exp(mean NLL) over the split, batch 1, state carried sequentially."""
    split = np.asarray(split)
    if split.size < 2:
        raise ValidationError("split must contain at least 2 tokens")
    state = zero_state(params, 1)
    total = 0.0
    count = 0
    pos = 0
    while pos + 1 < split.size:
        t_len = min(chunk, split.size - 1 - pos)
        inputs = split[pos : pos + t_len].reshape(1, -1)
        tgts = split[pos + 1 : pos + t_len + 1].reshape(1, -1)
        _, state, caches = forward(params, inputs, tgts, state)
        total += float(caches["nll"].sum())
        count += t_len
        pos += t_len
    return float(np.exp(total / count))


def grad_check(
    params: LstmParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    eps: float = 1e-5,
    samples_per_tensor: int = 200,
    seed: int = 0,
    grads: LstmParams | None = None,
    state=None,
) -> float:
    """Max relative error between analytic gradients and central finite
    differences over a random coordinate sample of every tensor.

    relative error = |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    Pass precomputed (possibly tampered) grads to test the checker itself;
    pass a warmed carried state to match mid-training conditions (gradient
    coordinates near the fp noise floor of the central difference are
    otherwise possible).
    """
    rng = np.random.default_rng(seed)
    if grads is None:
        _, _, caches = forward(params, inputs, targets, state)
        grads = backward(caches)

    def loss_at() -> float:
        return forward(params, inputs, targets, state)[0]

    worst = 0.0
    for (_, p), g in zip(param_items(params), _grad_arrays(grads)):
        n_coords = min(samples_per_tensor, p.size)
        coords = rng.choice(p.size, size=n_coords, replace=False)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for ci in coords:
            old = flat[ci]
            flat[ci] = old + eps
            lp = loss_at()
            flat[ci] = old - eps
            lm = loss_at()
            flat[ci] = old
            numeric = (lp - lm) / (2 * eps)
            analytic = gflat[ci]
            rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, rel)
    return worst
