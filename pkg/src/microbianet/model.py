"""The cardinality classifier: architecture assembly, forward/backward
with named activation taps, per-class score gradients and checkpoints.

The stock network takes 3x128x128 images through four valid convolutions
(20x5x5, 50x5x5, 100x4x4, 200x4x4), batch norm + ReLU + 2x2 max pool on
the first two stages, ReLU + pool on the last two, then
flatten -> dropout -> fc(5000,500) -> ReLU -> dropout -> head(500,C)
with C = 7 or 4 depending on the label scheme.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import ops, tensorio
from .errors import (
    CheckpointError,
    DimensionError,
    ParameterError,
    StateError,
)
from .optim import kaiming_init, make_rng

CHECKPOINT_FORMAT = "microbianet-checkpoint"
CHECKPOINT_VERSION = 1

BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5


@dataclass(frozen=True)
class ConvStage:
    """One convolutional stage of the backbone."""

    out_channels: int
    kernel: int
    batchnorm: bool
    pool: bool = True


MICROBIANET_STAGES = (
    ConvStage(20, 5, True),
    ConvStage(50, 5, True),
    ConvStage(100, 4, False),
    ConvStage(200, 4, False),
)


class ForwardTrace:
    """Captured activations (and the caches backward needs) of one forward."""

    def __init__(self, version, mode, batch_size):
        self.version = version
        self.mode = mode
        self.batch_size = batch_size
        self.frames = []          # (kind, name, cache, tap)
        self.taps = {}

    def push(self, kind, name, cache, tap=None, tap_value=None):
        self.frames.append((kind, name, cache, tap))
        if tap is not None and tap_value is not None:
            self.taps[tap] = tap_value


class ModelState:
    """Parameters, running statistics and mode flag of one network."""

    def __init__(self, stages, in_channels, in_size, hidden_units, num_outputs,
                 dropout_rate, rng=None, dtype=np.float32):
        if not 0.0 <= dropout_rate < 1.0:
            raise ParameterError(f"dropout rate must be in [0, 1), got {dropout_rate}")
        if rng is None:
            rng = make_rng(0)
        self.stages = tuple(stages)
        self.in_channels = in_channels
        self.in_size = in_size
        self.hidden_units = hidden_units
        self.num_outputs = num_outputs
        self.dropout_rate = dropout_rate
        self.mode = "train"
        self._version = 0

        self.conv_weights = []
        self.conv_biases = []
        self.bn_params = {}       # stage index -> dict of arrays
        size = in_size
        channels = in_channels
        shapes = []
        for i, st in enumerate(self.stages):
            if size < st.kernel:
                raise DimensionError(
                    f"stage {i + 1}: input {size} smaller than kernel {st.kernel}"
                )
            w = kaiming_init(
                (st.out_channels, channels, st.kernel, st.kernel),
                channels * st.kernel * st.kernel, rng, dtype,
            )
            self.conv_weights.append(w)
            self.conv_biases.append(np.zeros(st.out_channels, dtype=dtype))
            if st.batchnorm:
                self.bn_params[i] = {
                    "gamma": np.ones(st.out_channels, dtype=dtype),
                    "beta": np.zeros(st.out_channels, dtype=dtype),
                    "running_mean": np.zeros(st.out_channels, dtype=dtype),
                    "running_var": np.ones(st.out_channels, dtype=dtype),
                }
            size = size - st.kernel + 1
            conv_size = size
            if st.pool:
                if size % 2:
                    raise DimensionError(
                        f"stage {i + 1}: pool input {size} is odd; adjust the geometry"
                    )
                size //= 2
            channels = st.out_channels
            shapes.append((st.out_channels, conv_size, size))
        self.flat_features = channels * size * size
        self.fc1_weight = kaiming_init(
            (self.flat_features, hidden_units), self.flat_features, rng, dtype)
        self.fc1_bias = np.zeros(hidden_units, dtype=dtype)
        self.head_weight = kaiming_init(
            (hidden_units, num_outputs), hidden_units, rng, dtype)
        self.head_bias = np.zeros(num_outputs, dtype=dtype)
        self.stage_shapes = tuple(shapes)

    # -- mode and bookkeeping -------------------------------------------------

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def bump_version(self):
        self._version += 1

    @property
    def last_conv_tap(self):
        return f"conv{len(self.stages)}_out"

    def tap_names(self):
        names = [f"conv{i + 1}_out" for i in range(len(self.stages))]
        return tuple(names) + ("flatten_out", "fc1_out", "logits")

    def parameters(self):
        """Ordered name -> array mapping of all trainable parameters."""
        out = {}
        for i in range(len(self.stages)):
            out[f"conv{i + 1}.weight"] = self.conv_weights[i]
            out[f"conv{i + 1}.bias"] = self.conv_biases[i]
            if i in self.bn_params:
                out[f"bn{i + 1}.gamma"] = self.bn_params[i]["gamma"]
                out[f"bn{i + 1}.beta"] = self.bn_params[i]["beta"]
        out["fc1.weight"] = self.fc1_weight
        out["fc1.bias"] = self.fc1_bias
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def state_arrays(self):
        """parameters() plus batch-norm running statistics."""
        out = self.parameters()
        for i, bn in self.bn_params.items():
            out[f"bn{i + 1}.running_mean"] = bn["running_mean"]
            out[f"bn{i + 1}.running_var"] = bn["running_var"]
        return out

    def step(self, opt_state, grads):
        """Apply one optimizer update; invalidates existing traces."""
        from .optim import adam_step

        adam_step(opt_state, self.parameters(), grads)
        self.bump_version()

    def clone(self):
        other = object.__new__(ModelState)
        other.__dict__.update(self.__dict__)
        other.conv_weights = [w.copy() for w in self.conv_weights]
        other.conv_biases = [b.copy() for b in self.conv_biases]
        other.bn_params = {
            i: {k: v.copy() for k, v in bn.items()} for i, bn in self.bn_params.items()
        }
        other.fc1_weight = self.fc1_weight.copy()
        other.fc1_bias = self.fc1_bias.copy()
        other.head_weight = self.head_weight.copy()
        other.head_bias = self.head_bias.copy()
        return other


def build_microbianet(num_outputs=7, dropout_rate=0.25, rng=None, dtype=np.float32):
    """The stock 4-stage network; asserts the published tap geometry."""
    if num_outputs not in (7, 4):
        raise ParameterError(f"num_outputs must be 7 or 4, got {num_outputs}")
    model = ModelState(MICROBIANET_STAGES, 3, 128, 500, num_outputs, dropout_rate,
                       rng=rng, dtype=dtype)
    assert model.flat_features == 5000, "flatten width must be 200*5*5"
    return model


def count_parameters(model):
    return sum(int(p.size) for p in model.parameters().values())


# -- forward / backward -------------------------------------------------------


def forward(model, batch, capture=(), rng=None):
    """Run the network; returns (logits, ForwardTrace).

    ``capture`` selects which taps store their activation in trace.taps
    (backward needs only the frame caches, captures are for inspection).
    Dropout in train mode draws its masks from ``rng``.
    """
    x = np.asarray(batch)
    if x.ndim != 4 or x.shape[1] != model.in_channels or x.shape[2] != model.in_size \
            or x.shape[3] != model.in_size:
        raise DimensionError(
            f"expected (B,{model.in_channels},{model.in_size},{model.in_size}), got {x.shape}"
        )
    capture = set(capture)
    trace = ForwardTrace(model._version, model.mode, x.shape[0])
    mode = model.mode

    for i, st in enumerate(model.stages):
        w, b = model.conv_weights[i], model.conv_biases[i]
        xin = x
        x = ops.conv2d_forward(xin, w, b)
        trace.push("conv", f"conv{i + 1}", (xin, w))
        if st.batchnorm:
            bn = model.bn_params[i]
            x, cache = ops.batchnorm_forward(
                x, bn["gamma"], bn["beta"], bn["running_mean"], bn["running_var"],
                BN_MOMENTUM, BN_EPSILON, mode)
            trace.push("batchnorm", f"bn{i + 1}", cache)
        x, cache = ops.relu_forward(x)
        tap = f"conv{i + 1}_out"
        trace.push("relu", None, cache, tap, x if tap in capture else None)
        if st.pool:
            x, argmax = ops.maxpool2x2_forward(x)
            trace.push("pool", None, (argmax, cache.shape))

    x, shape = ops.flatten_forward(x)
    trace.push("flatten", None, shape, "flatten_out", x if "flatten_out" in capture else None)
    x, cache = ops.dropout_forward(x, model.dropout_rate, mode, rng)
    trace.push("dropout", None, cache)
    xin = x
    x = ops.linear_forward(xin, model.fc1_weight, model.fc1_bias)
    trace.push("linear", "fc1", (xin, model.fc1_weight))
    x, cache = ops.relu_forward(x)
    trace.push("relu", None, cache, "fc1_out", x if "fc1_out" in capture else None)
    x, cache = ops.dropout_forward(x, model.dropout_rate, mode, rng)
    trace.push("dropout", None, cache)
    xin = x
    logits = ops.linear_forward(xin, model.head_weight, model.head_bias)
    trace.push("linear", "head", (xin, model.head_weight))
    if "logits" in capture:
        trace.taps["logits"] = logits
    return logits, trace


def backward(model, trace, grad_logits, want_input_grad=False, tap_grads=()):
    """Reverse the traced forward; returns a dict of gradients.

    Keys match parameters(); ``input`` is added when requested, and each
    name in ``tap_grads`` stores the gradient flowing at that tap.
    """
    if trace.version != model._version:
        raise StateError("trace is stale: parameters changed since the forward pass")
    if grad_logits.shape[0] != trace.batch_size:
        raise DimensionError("grad_logits batch size does not match the trace")
    tap_grads = set(tap_grads)
    grads = {}
    tap_out = {}
    g = grad_logits
    for kind, name, cache, tap in reversed(trace.frames):
        if tap is not None and tap in tap_grads:
            tap_out[tap] = g.copy()
        if kind == "linear":
            xin, w = cache
            g, gw, gb = ops.linear_backward(xin, w, g)
            grads[f"{name}.weight"] = gw
            grads[f"{name}.bias"] = gb
        elif kind == "dropout":
            g = ops.dropout_backward(g, cache)
        elif kind == "relu":
            g = ops.relu_backward(g, cache)
        elif kind == "flatten":
            g = ops.flatten_backward(g, cache)
        elif kind == "pool":
            argmax, in_shape = cache
            g = ops.maxpool2x2_backward(g, argmax, in_shape)
        elif kind == "batchnorm":
            g, ggamma, gbeta = ops.batchnorm_backward(g, cache)
            grads[f"{name}.gamma"] = ggamma
            grads[f"{name}.beta"] = gbeta
        elif kind == "conv":
            xin, w = cache
            g, gw, gb = ops.conv2d_backward(xin, w, g)
            grads[f"{name}.weight"] = gw
            grads[f"{name}.bias"] = gb
        else:
            raise StateError(f"unknown frame kind {kind!r}")
    if want_input_grad:
        grads["input"] = g
    grads.update(tap_out)
    return grads


def class_score_gradient(model, image, class_index, tap):
    """Gradient of the raw class logit w.r.t. the named tap activation.

    ``image`` is a single (C,H,W) input; the pre-softmax score is used.
    Returns the (channels, h, w) or (features,) gradient at the tap.
    """
    if model.mode != "eval":
        raise StateError("class_score_gradient requires eval mode")
    if tap not in model.tap_names() or tap == "logits":
        raise ParameterError(f"unknown tap {tap!r}")
    if not 0 <= class_index < model.num_outputs:
        raise ParameterError(f"class index {class_index} out of range")
    logits, trace = forward(model, np.asarray(image)[None])
    grad_logits = np.zeros_like(logits)
    grad_logits[0, class_index] = 1.0
    grads = backward(model, trace, grad_logits, tap_grads=(tap,))
    return grads[tap][0]


def forward_to_conv(model, batch, stage_index):
    """Forward only as far as the raw output of conv stage ``stage_index``
    (1-based), before its batch norm / ReLU. Returns (activation, frames)
    where frames can be fed to backward_from_conv.
    """
    if not 1 <= stage_index <= len(model.stages):
        raise ParameterError(f"stage index {stage_index} out of range")
    x = np.asarray(batch)
    frames = []
    for i, st in enumerate(model.stages[: stage_index - 1]):
        xin = x
        x = ops.conv2d_forward(xin, model.conv_weights[i], model.conv_biases[i])
        frames.append(("conv", (xin, model.conv_weights[i])))
        if st.batchnorm:
            bn = model.bn_params[i]
            x, cache = ops.batchnorm_forward(
                x, bn["gamma"], bn["beta"], bn["running_mean"], bn["running_var"],
                BN_MOMENTUM, BN_EPSILON, "eval")
            frames.append(("batchnorm", cache))
        x, cache = ops.relu_forward(x)
        frames.append(("relu", cache))
        if st.pool:
            x, argmax = ops.maxpool2x2_forward(x)
            frames.append(("pool", (argmax, cache.shape)))
    i = stage_index - 1
    xin = x
    x = ops.conv2d_forward(xin, model.conv_weights[i], model.conv_biases[i])
    frames.append(("conv", (xin, model.conv_weights[i])))
    return x, frames


def backward_from_conv(frames, grad_out):
    """Input gradient for a forward_to_conv trace (parameters ignored)."""
    g = grad_out
    for kind, cache in reversed(frames):
        if kind == "conv":
            xin, w = cache
            g, _, _ = ops.conv2d_backward(xin, w, g)
        elif kind == "batchnorm":
            g, _, _ = ops.batchnorm_backward(g, cache)
        elif kind == "relu":
            g = ops.relu_backward(g, cache)
        elif kind == "pool":
            argmax, in_shape = cache
            g = ops.maxpool2x2_backward(g, argmax, in_shape)
    return g


# -- checkpoints ---------------------------------------------------------------


def _arch_descriptor(model):
    return {
        "stages": [[s.out_channels, s.kernel, s.batchnorm, s.pool] for s in model.stages],
        "in_channels": model.in_channels,
        "in_size": model.in_size,
        "hidden_units": model.hidden_units,
        "dropout_rate": model.dropout_rate,
    }


def checkpoint_save(model, path, optimizer=None):
    """Write model (and optionally Adam) state: one tensor-dump entry per
    named array plus a JSON index of names -> byte offsets and the output
    scheme tag."""
    import io

    entries = dict(model.state_arrays())
    if optimizer is not None:
        for name, m in optimizer.first_moment.items():
            entries[f"adam.m.{name}"] = m
        for name, v in optimizer.second_moment.items():
            entries[f"adam.v.{name}"] = v

    blob = io.BytesIO()
    offsets = {}
    for name, arr in entries.items():
        offsets[name] = blob.tell()
        tensorio.write_tensor(blob, arr)
    index = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "outputs": model.num_outputs,
        "arch": _arch_descriptor(model),
        "names": offsets,
    }
    if optimizer is not None:
        index["adam"] = {
            "learning_rate": optimizer.learning_rate,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "epsilon": optimizer.epsilon,
            "weight_decay": optimizer.weight_decay,
            "decoupled": optimizer.decoupled,
            "step_count": optimizer.step_count,
        }
    with open(path, "wb") as fh:
        fh.write((json.dumps(index, separators=(",", ":"), sort_keys=True) + "\n").encode("ascii"))
        fh.write(blob.getvalue())


def checkpoint_load(path, expected_outputs=None):
    """Read a checkpoint; returns (model, optimizer_or_None).

    Refuses files whose output count does not match ``expected_outputs``.
    """
    from .optim import AdamState

    with open(path, "rb") as fh:
        line = fh.readline()
        if not line.endswith(b"\n"):
            raise CheckpointError("truncated checkpoint (no index line)")
        try:
            index = json.loads(line.decode("ascii"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise CheckpointError(f"unreadable checkpoint index: {exc}") from exc
        if index.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError("not a checkpoint file")
        if index.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {index.get('version')}")
        outputs = int(index["outputs"])
        if expected_outputs is not None and outputs != expected_outputs:
            raise CheckpointError(
                f"checkpoint has {outputs} outputs, session expects {expected_outputs}"
            )
        arch = index["arch"]
        stages = [ConvStage(int(c), int(k), bool(bn), bool(pl)) for c, k, bn, pl in arch["stages"]]
        model = ModelState(
            stages, int(arch["in_channels"]), int(arch["in_size"]),
            int(arch["hidden_units"]), outputs, float(arch["dropout_rate"]),
            rng=make_rng(0),
        )
        arrays = model.state_arrays()
        base = fh.tell()
        loaded = {}
        for name, offset in index["names"].items():
            fh.seek(base + int(offset))
            loaded[name] = tensorio.read_tensor(fh)
        for name, target in arrays.items():
            if name not in loaded:
                raise CheckpointError(f"checkpoint is missing entry {name}")
            value = loaded[name]
            if value.shape != target.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: {value.shape} vs {target.shape}"
                )
            target[...] = value.astype(target.dtype)
        optimizer = None
        if "adam" in index:
            cfg = index["adam"]
            optimizer = AdamState(
                learning_rate=cfg["learning_rate"], beta1=cfg["beta1"],
                beta2=cfg["beta2"], epsilon=cfg["epsilon"],
                weight_decay=cfg["weight_decay"], decoupled=cfg["decoupled"],
                step_count=int(cfg["step_count"]),
            )
            for name in arrays:
                mkey, vkey = f"adam.m.{name}", f"adam.v.{name}"
                if mkey in loaded:
                    optimizer.first_moment[name] = loaded[mkey]
                    optimizer.second_moment[name] = loaded[vkey]
    model.eval()
    return model, optimizer
