"""A small numpy network for exercising quantized training end to end.

Layers are ``dense`` or ``conv3x3`` (stride 1, zero padding 1). Every
layer except the last is followed by an activation site: per-channel
scale/shift, ReLU, then (optionally) an activation quantizer. A layer with
``quantize_acts`` has the sites on both its input and output quantized, so
it consumes and emits low-bit activations; ``quantize_weights`` swaps its
full-precision weights for learned quantized weights.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bitkernel import PackedLinear, bitwise_matmul, quantize_pack_activations
from .errors import NumericError, ParameterError, ShapeError, StateError
from .lqw import OptimConfig, WeightQuantParams, lqw_backward, lqw_forward, lqw_update, nesterov_step, poly_lr
from .quantizer_core import ActQuantState, BitConfig, caq_infer, caq_train_step, ste_activation_backward

log = logging.getLogger(__name__)

ACT_MODES = ("caq", "global")
LAYER_KINDS = ("dense", "conv3x3")
LOG_FIELDS = ["epoch", "lr", "loss", "train_acc", "eval_acc"]
# Without batch statistics the scaled channels make larger rates diverge.
DEFAULT_LR = 0.005


def default_opt(**overrides) -> OptimConfig:
    return OptimConfig(**{"lr": DEFAULT_LR, **overrides})


@dataclass
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    quantize_weights: bool = False
    quantize_acts: bool = False
    bit_config: BitConfig = field(default_factory=BitConfig)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ParameterError(f"unknown layer kind {self.kind!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ParameterError("channel counts must be positive")

    @property
    def fan_in(self) -> int:
        return self.in_channels * (9 if self.kind == "conv3x3" else 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bit_config"] = asdict(self.bit_config)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        d["bit_config"] = BitConfig(**d["bit_config"])
        return cls(**d)


def default_specs(k_w: int = 2, k_a: int = 2, quantize_weights: bool = True, quantize_acts: bool = True,
                  in_channels: int = 1, image_size: int = 8, classes: int = 4) -> list:
    """conv3x3(in -> 8) FP, conv3x3(8 -> 16) quantized, dense(-> classes) FP."""
    bc = BitConfig(k_w=k_w, k_a=k_a)
    return [
        LayerSpec("conv3x3", in_channels, 8, bit_config=bc),
        LayerSpec("conv3x3", 8, 16, quantize_weights, quantize_acts, bc),
        LayerSpec("dense", 16 * image_size * image_size, classes, bit_config=bc),
    ]


@dataclass
class TrainState:
    specs: list
    input_shape: tuple
    opt: OptimConfig
    rng_seed: int
    act_mode: str = "caq"
    mu: float = 0.9
    act_iters: int = 1
    epoch: int = 0
    params: list = field(default_factory=list)  # per layer: {"W", "b"} or {"wq"}
    bufs: list = field(default_factory=list)  # momentum buffers for FP arrays
    affine: list = field(default_factory=list)  # per site: {"gamma", "beta"}
    act_states: list = field(default_factory=list)  # per site: ActQuantState or None
    rng: Optional[np.random.Generator] = None

    @property
    def n_layers(self) -> int:
        return len(self.specs)

    def site_quantized(self, i: int) -> bool:
        return self.specs[i].quantize_acts or self.specs[i + 1].quantize_acts

    def site_channels(self, i: int) -> int:
        return self.specs[i].out_channels

    # --- serialization ---------------------------------------------------------------

    def to_sections(self):
        meta = {
            "format": "bitquant.tinynet", "specs": [s.to_dict() for s in self.specs],
            "input_shape": list(self.input_shape), "opt": asdict(self.opt), "rng_seed": self.rng_seed,
            "act_mode": self.act_mode, "mu": self.mu, "act_iters": self.act_iters, "epoch": self.epoch,
            "rng_state": self.rng.bit_generator.state,
        }
        arrays = {}
        for i, p in enumerate(self.params):
            if "wq" in p:
                wq = p["wq"]
                arrays.update({f"L{i}.shadow": wq.shadow, f"L{i}.basis": wq.basis,
                               f"L{i}.shadow_buf": wq.shadow_buf, f"L{i}.basis_buf": wq.basis_buf})
            else:
                for name in ("W", "b"):
                    arrays[f"L{i}.{name}"] = p[name]
                    arrays[f"L{i}.{name}_buf"] = self.bufs[i][name]
        for i, (aff, st) in enumerate(zip(self.affine, self.act_states)):
            for name in ("gamma", "beta"):
                arrays[f"S{i}.{name}"] = aff[name]
                arrays[f"S{i}.{name}_buf"] = aff[name + "_buf"]
            if st is not None and st.initialized:
                arrays[f"S{i}.channel_bases"] = st.channel_bases
        return meta, arrays

    @classmethod
    def from_sections(cls, meta: dict, arrays: dict) -> "TrainState":
        if meta.get("format") != "bitquant.tinynet":
            raise ParameterError("checkpoint does not hold a tinynet state")
        specs = [LayerSpec.from_dict(d) for d in meta["specs"]]
        state = build_state(specs, tuple(meta["input_shape"]), OptimConfig(**meta["opt"]), meta["rng_seed"],
                            act_mode=meta["act_mode"], mu=meta["mu"], act_iters=meta["act_iters"],
                            allow_edge_quantization=True)
        state.epoch = meta["epoch"]
        state.rng.bit_generator.state = meta["rng_state"]

        def take(name, like):
            if name not in arrays:
                raise ShapeError(f"checkpoint is missing array {name!r}")
            a = arrays[name]
            if a.shape != like.shape:
                raise ShapeError(f"{name}: checkpoint shape {a.shape} != model shape {like.shape}")
            return a.astype(like.dtype, copy=True)

        for i, p in enumerate(state.params):
            if "wq" in p:
                wq = p["wq"]
                p["wq"] = WeightQuantParams(take(f"L{i}.shadow", wq.shadow), take(f"L{i}.basis", wq.basis),
                                            shadow_buf=take(f"L{i}.shadow_buf", wq.shadow),
                                            basis_buf=take(f"L{i}.basis_buf", wq.basis))
            else:
                for name in ("W", "b"):
                    p[name] = take(f"L{i}.{name}", p[name])
                    state.bufs[i][name] = take(f"L{i}.{name}_buf", p[name])
        for i, aff in enumerate(state.affine):
            for name in ("gamma", "beta"):
                aff[name] = take(f"S{i}.{name}", aff[name])
                aff[name + "_buf"] = take(f"S{i}.{name}_buf", aff[name])
            st = state.act_states[i]
            key = f"S{i}.channel_bases"
            if st is not None and key in arrays:
                state.act_states[i] = ActQuantState(st.channel_count, st.k, st.mu, st.iters,
                                                    channel_bases=arrays[key].copy())
        return state

    def check_compatible(self, other: "TrainState") -> None:
        a, b = self.to_sections()[1], other.to_sections()[1]
        if a.keys() != b.keys():
            raise ShapeError("checkpoint layout does not match the model")
        for k in a:
            if a[k].shape != b[k].shape:
                raise ShapeError(f"{k}: checkpoint shape {b[k].shape} != model shape {a[k].shape}")


def build_state(specs: Sequence[LayerSpec], input_shape, opt: Optional[OptimConfig] = None, seed: int = 0,
                act_mode: str = "caq", mu: float = 0.9, act_iters: int = 1,
                scale_range=(0.1, 10.0), allow_edge_quantization: bool = False) -> TrainState:
    """Initialize parameters for a layer chain.

    Site scales are drawn log-uniform in ``scale_range`` so channels enter
    the quantizers with very different spreads.
    """
    specs = list(specs)
    if len(specs) < 1:
        raise ParameterError("need at least one layer")
    if act_mode not in ACT_MODES:
        raise ParameterError(f"act_mode must be one of {ACT_MODES}")
    edge = [specs[0]] + ([specs[-1]] if len(specs) > 1 else [])
    if not allow_edge_quantization and any(s.quantize_weights or s.quantize_acts for s in edge):
        raise ParameterError("first and last layers are kept in full precision")
    c, h, w = input_shape
    for i, s in enumerate(specs):
        expected = c if s.kind == "conv3x3" else c * h * w
        if i > 0 and specs[i - 1].kind == "dense" and s.kind == "conv3x3":
            raise ShapeError("a conv layer cannot follow a dense layer")
        if s.in_channels != expected:
            raise ShapeError(f"layer {i} expects {s.in_channels} inputs, chain provides {expected}")
        if s.kind == "dense":
            h = w = 1
        c = s.out_channels

    rng = np.random.default_rng(seed)
    state = TrainState(specs, tuple(input_shape), opt or default_opt(), seed, act_mode, mu, act_iters, rng=rng)
    for i, s in enumerate(specs):
        std = math.sqrt(2.0 / s.fan_in)
        if s.quantize_weights:
            state.params.append({"wq": WeightQuantParams.init(s.out_channels, s.fan_in, s.bit_config.k_w,
                                                              std, rng)})
            state.bufs.append({})
        else:
            W = rng.normal(0.0, std, size=(s.out_channels, s.fan_in))
            if i == len(specs) - 1:
                W[:] = 0.0  # uniform initial prediction, loss starts at log(classes)
            b = np.zeros(s.out_channels)
            state.params.append({"W": W, "b": b})
            state.bufs.append({"W": np.zeros_like(W), "b": np.zeros_like(b)})
    lo, hi = np.log(scale_range[0]), np.log(scale_range[1])
    for i in range(len(specs) - 1):
        ch = specs[i].out_channels
        gamma = np.exp(rng.uniform(lo, hi, size=ch))
        beta = np.zeros(ch)
        state.affine.append({"gamma": gamma, "beta": beta,
                             "gamma_buf": np.zeros(ch), "beta_buf": np.zeros(ch)})
        if state.site_quantized(i):
            channels = ch if act_mode == "caq" else 1
            state.act_states.append(ActQuantState(channels, specs[i].bit_config.k_a, mu, act_iters))
        else:
            state.act_states.append(None)
    return state


# --- layer primitives ------------------------------------------------------------------

def im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, C*9) patches for a padded 3x3 convolution."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))  # B,C,H,W,3,3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)


def col2im(dcols: np.ndarray, shape) -> np.ndarray:
    b, c, h, w = shape
    d = dcols.reshape(b, h, w, c, 3, 3)
    dxp = np.zeros((b, c, h + 2, w + 2))
    for kh in range(3):
        for kw in range(3):
            dxp[:, :, kh:kh + h, kw:kw + w] += d[..., kh, kw].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1]


def weight_matrix(state: TrainState, i: int) -> np.ndarray:
    p = state.params[i]
    return lqw_forward(p["wq"]) if "wq" in p else p["W"]


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _quantize_site(state: TrainState, i: int, r: np.ndarray, train: bool) -> np.ndarray:
    st = state.act_states[i]
    x = r if state.act_mode == "caq" else r.reshape(1, 1, -1)
    q = caq_train_step(x, st) if train else caq_infer(x, st)
    return q.reshape(r.shape)


def forward(state: TrainState, batch: np.ndarray, train: bool = False, frozen: Optional[dict] = None,
            packed: Optional[dict] = None):
    """Returns ``(logits, cache)``.

    ``train`` runs the activation quantizers in training mode (updating
    their state). ``frozen`` maps site index to a fixed offset added to the
    ReLU output in place of quantization; gradients then match finite
    differences exactly. ``packed`` maps layer index to a
    :class:`PackedLinear` evaluated with the bitwise kernel.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != tuple(state.input_shape):
        raise ShapeError(f"batch shape {x.shape[1:]} != network input {tuple(state.input_shape)}")
    cache = []
    n_layers = state.n_layers
    for i, spec in enumerate(state.specs):
        entry = {"x_shape": x.shape}
        if spec.kind == "dense" and x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        Wm = weight_matrix(state, i)
        b = state.params[i].get("b")
        if spec.kind == "conv3x3":
            bsz, _, h, w = x.shape
            cols = im2col(x)
            y = _matmul(state, i, cols, Wm, packed)
            if b is not None:
                y = y + b
            y = y.reshape(bsz, h, w, -1).transpose(0, 3, 1, 2)
        else:
            cols = x
            y = _matmul(state, i, cols, Wm, packed)
            if b is not None:
                y = y + b
        entry.update(cols=cols, Wm=Wm)
        if i == n_layers - 1:
            cache.append(entry)
            return y, cache
        aff = state.affine[i]
        z = _channel_view(aff["gamma"], y.ndim) * y + _channel_view(aff["beta"], y.ndim)
        r = np.maximum(z, 0.0)
        if state.act_states[i] is None:
            x = r
        elif frozen is not None:
            x = r + frozen[i]
        else:
            x = _quantize_site(state, i, r, train)
        entry.update(y=y, z=z, r=r, q=x)
        cache.append(entry)


def _matmul(state, i, cols, Wm, packed):
    if packed is None or i not in packed:
        return cols @ Wm.T
    pl = packed[i]
    acts = quantize_pack_activations(cols, pl.v_a, pl.word_bits)
    return bitwise_matmul(pl, acts, out_dtype=np.float64).T


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = labels.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def backward(state: TrainState, cache, grad_logits: np.ndarray, debug: bool = False) -> dict:
    """Gradients for every trainable array, keyed like ``("L", i, "W")``."""
    if not cache or len(cache) != state.n_layers:
        raise StateError("backward needs the cache of a matching forward pass")
    grads = {}
    d = np.asarray(grad_logits, dtype=np.float64)
    for i in range(state.n_layers - 1, -1, -1):
        spec, entry = state.specs[i], cache[i]
        if i < state.n_layers - 1:
            if state.act_states[i] is not None:
                d = ste_activation_backward(d, debug)
            d = d.reshape(entry["z"].shape)
            dz = d * (entry["z"] > 0)
            axes = (0,) + tuple(range(2, dz.ndim))
            grads[("S", i, "gamma")] = (dz * entry["y"]).sum(axis=axes)
            grads[("S", i, "beta")] = dz.sum(axis=axes)
            d = dz * _channel_view(state.affine[i]["gamma"], dz.ndim)
        dy = d.transpose(0, 2, 3, 1).reshape(-1, d.shape[1]) if spec.kind == "conv3x3" else d
        dWm = dy.T @ entry["cols"]
        p = state.params[i]
        if "wq" in p:
            grads[("L", i, "wq")] = lqw_backward(dWm, p["wq"])
        else:
            grads[("L", i, "W")] = dWm
            grads[("L", i, "b")] = dy.sum(axis=0)
        if i == 0:
            break
        dcols = dy @ entry["Wm"]
        shape = entry["x_shape"]
        d = col2im(dcols, shape) if spec.kind == "conv3x3" else dcols.reshape(shape)
    return grads


def apply_gradients(state: TrainState, grads: dict, lr: float) -> None:
    opt = state.opt
    for key, g in grads.items():
        kind, i, name = key
        if kind == "L" and name == "wq":
            lqw_update(state.params[i]["wq"], g, opt, lr)
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {key}")
        if kind == "L":
            decay = opt.weight_decay if name == "W" else 0.0
            nesterov_step(state.params[i][name], g, state.bufs[i][name], lr, opt.momentum, decay)
        else:
            aff = state.affine[i]
            nesterov_step(aff[name], g, aff[name + "_buf"], lr, opt.momentum)


def predict(state: TrainState, images: np.ndarray, batch_size: int = 256, packed=None) -> np.ndarray:
    out = [forward(state, images[s:s + batch_size], packed=packed)[0]
           for s in range(0, images.shape[0], batch_size)]
    return np.concatenate(out, axis=0)


def accuracy(state: TrainState, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(state, images).argmax(axis=1) == labels))


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    train_acc: float
    eval_acc: float = float("nan")


def log_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in rows:
        w.writerow([r.epoch, repr(r.lr), repr(r.loss), repr(r.train_acc), repr(r.eval_acc)])
    return buf.getvalue()


def train(state: TrainState, dataset, epochs: int, batch_size: int = 64, eval_set=None) -> list:
    """Mini-batch Nesterov SGD with a polynomial schedule over ``epochs``.

    ``train_acc`` in the log is the running accuracy over the epoch's
    training batches; ``eval_acc`` is an eval-mode pass over ``eval_set``.

    ``state.opt.epochs`` is the schedule length; it is set to
    ``state.epoch + epochs`` when shorter. On a non-finite loss a
    :class:`NumericError` is raised carrying ``last_good`` (checkpoint bytes
    from the start of the failing epoch).
    """
    from .data_io import save_checkpoint

    if len(dataset) == 0:
        raise ParameterError("dataset is empty")
    if epochs <= 0:
        return []
    if state.opt.epochs < state.epoch + epochs:
        state.opt.epochs = state.epoch + epochs
    x = dataset.normalized()
    y = dataset.labels
    xe = eval_set.normalized() if eval_set is not None else None
    history = []
    for _ in range(epochs):
        last_good = save_checkpoint(state)
        lr = poly_lr(state.epoch, state.opt)
        order = state.rng.permutation(len(y))
        total, correct, seen = 0.0, 0, 0
        try:
            for s in range(0, len(y), batch_size):
                idx = order[s:s + batch_size]
                logits, cache = forward(state, x[idx], train=True)
                loss, g = softmax_xent(logits, y[idx])
                if not math.isfinite(loss):
                    raise NumericError(f"loss diverged at epoch {state.epoch}")
                apply_gradients(state, backward(state, cache, g), lr)
                total += loss * len(idx)
                correct += int(np.sum(logits.argmax(axis=1) == y[idx]))
                seen += len(idx)
        except NumericError as err:
            err.last_good = last_good
            raise
        state.epoch += 1
        row = EpochLog(state.epoch, lr, total / seen, correct / seen,
                       accuracy(state, xe, eval_set.labels) if xe is not None else float("nan"))
        log.debug("epoch %d lr %.3g loss %.4f acc %.4f", row.epoch, lr, row.loss, row.train_acc)
        history.append(row)
    return history


# --- ablation ---------------------------------------------------------------------------

@dataclass
class AblationCell:
    weights: str
    acts: str
    train_acc: list
    eval_acc: list

    @property
    def mean_train(self) -> float:
        return float(np.mean(self.train_acc))

    @property
    def mean_eval(self) -> float:
        return float(np.mean(self.eval_acc))


@dataclass
class AblationTable:
    cells: list
    seeds: tuple
    k_w: int
    k_a: int

    def cell(self, weights: str, acts: str) -> AblationCell:
        for c in self.cells:
            if c.weights == weights and c.acts == acts:
                return c
        raise KeyError((weights, acts))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["weights", "acts", "k_w", "k_a", "seeds", "train_acc_mean", "eval_acc_mean"])
        for c in self.cells:
            w.writerow([c.weights, c.acts, self.k_w, self.k_a, " ".join(map(str, self.seeds)),
                        f"{c.mean_train:.4f}", f"{c.mean_eval:.4f}"])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| weights | activations | train acc (%) | eval acc (%) |",
                 "|---|---|---|---|"]
        for c in self.cells:
            lines.append(f"| {c.weights} | {c.acts} | {100 * c.mean_train:.2f} | {100 * c.mean_eval:.2f} |")
        return "\n".join(lines) + "\n"


def make_cell_state(weights: str, acts: str, k_w: int, k_a: int, seed: int, opt: OptimConfig,
                    in_channels: int = 1, image_size: int = 8, classes: int = 4) -> TrainState:
    if weights not in ("fp", "lqw") or acts not in ("fp", "caq", "global"):
        raise ParameterError(f"unknown ablation cell {weights}/{acts}")
    specs = default_specs(k_w, k_a, quantize_weights=weights == "lqw", quantize_acts=acts != "fp",
                          in_channels=in_channels, image_size=image_size, classes=classes)
    return build_state(specs, (in_channels, image_size, image_size), OptimConfig(**asdict(opt)), seed,
                       act_mode=acts if acts != "fp" else "caq")


def ablate(dataset, weights=("fp", "lqw"), acts=("fp", "caq", "global"), seeds=(1, 2, 3), epochs: int = 200,
           k_w: int = 2, k_a: int = 2, opt: Optional[OptimConfig] = None, eval_set=None,
           batch_size: int = 64) -> AblationTable:
    """Train every (weights, acts) combination with identical seeds and budget.

    Cell accuracies are eval-mode accuracies of the final model.
    """
    opt = opt or default_opt()
    _, c, h, w = dataset.images.shape
    cells = []
    for wmode in weights:
        for amode in acts:
            tr, ev = [], []
            for seed in seeds:
                state = make_cell_state(wmode, amode, k_w, k_a, seed, opt, c, h, dataset.classes)
                train(state, dataset, epochs, batch_size)
                tr.append(accuracy(state, dataset.normalized(), dataset.labels))
                ev.append(accuracy(state, eval_set.normalized(), eval_set.labels)
                          if eval_set is not None else float("nan"))
            cells.append(AblationCell(wmode, amode, tr, ev))
            log.info("ablation %s/%s: %s", wmode, amode, tr)
    return AblationTable(cells, tuple(seeds), k_w, k_a)


# --- packed inference ----------------------------------------------------------------

def export_packed(state: TrainState, word_bits: int = 64) -> dict:
    """Packed form of every layer with quantized weights and quantized inputs."""
    out = {}
    for i, spec in enumerate(state.specs):
        if i == 0 or not spec.quantize_weights or state.act_states[i - 1] is None:
            continue
        st = state.act_states[i - 1]
        if st.averaged is None:
            raise StateError(f"activation quantizer feeding layer {i} is untrained")
        wq = state.params[i]["wq"]
        signs = wq.binary.astype(np.int8)
        out[i] = PackedLinear.from_codes(signs, wq.basis, st.averaged, word_bits)
    return out


def frozen_offsets(state: TrainState, batch: np.ndarray) -> dict:
    """Quantization residuals of an eval pass, for structure-frozen gradient checks."""
    _, cache = forward(state, batch)
    return {i: e["q"] - e["r"] for i, e in enumerate(cache[:-1]) if state.act_states[i] is not None}
