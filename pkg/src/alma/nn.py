"""Small feedforward classifiers with exact forward/backward propagation counting.

Layers operate on batched float64 arrays of shape ``(N, *shape)``. A
:class:`Model` chains them from ``input_shape`` to ``num_classes`` logits.
Single-sample entry points (:func:`forward`, :func:`input_gradient`,
:func:`value_and_grad`) bump a :class:`PropagationCounter`, the complexity
metric reported by the harness.

Model file layout (all integers little-endian)::

    ALMANN1\\n
    input_shape=C,H,W\\n
    num_classes=K\\n
    layer=<kind> key=value ...\\n      (one line per layer, in order)
    end\\n
    then, for every Dense/Conv2d layer in order, two blocks (weights, bias):
        uint64 element count, followed by that many float64 values

Supported layer lines::

    layer=dense in_features=I out_features=O
    layer=conv2d in_channels=C out_channels=O kernel=KH,KW stride=S padding=P
    layer=relu
    layer=maxpool2d kernel=K stride=S
    layer=flatten
"""

from __future__ import annotations

import dataclasses
import os
import struct
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAGIC = b"ALMANN1\n"


class ShapeError(ValueError):
    pass


class ModelFormatError(ValueError):
    """Raised when a model file cannot be parsed."""

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.line = line
        self.offset = offset


@dataclasses.dataclass
class PropagationCounter:
    forwards: int = 0
    backwards: int = 0

    def __add__(self, other: "PropagationCounter") -> "PropagationCounter":
        return PropagationCounter(self.forwards + other.forwards, self.backwards + other.backwards)


# --------------------------------------------------------------------------
# layers


class Layer:
    kind = ""
    params: tuple[str, ...] = ()

    def output_shape(self, shape: tuple) -> tuple:
        raise NotImplementedError

    def forward(self, x: np.ndarray):
        """Return (output, cache)."""
        raise NotImplementedError

    def backward(self, g: np.ndarray, cache, param_grads: list | None = None) -> np.ndarray:
        raise NotImplementedError

    def header(self) -> str:
        raise NotImplementedError

    def __eq__(self, other):
        if type(self) is not type(other):
            return False
        a, b = vars(self), vars(other)
        if a.keys() != b.keys():
            return False
        for k in a:
            va, vb = a[k], b[k]
            if isinstance(va, np.ndarray):
                if not (va.shape == vb.shape and np.array_equal(va, vb)):
                    return False
            elif va != vb:
                return False
        return True


class Dense(Layer):
    kind = "dense"
    params = ("weights", "bias")

    def __init__(self, weights, bias):
        self.weights = np.ascontiguousarray(weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"dense: weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def in_features(self) -> int:
        return self.weights.shape[1]

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise ShapeError(f"dense layer expects input ({self.in_features},), got {shape}")
        return (self.out_features,)

    def forward(self, x):
        return x @ self.weights.T + self.bias, x

    def backward(self, g, cache, param_grads=None):
        if param_grads is not None:
            param_grads.append((g.T @ cache, g.sum(axis=0)))
        return g @ self.weights

    def header(self):
        return f"layer=dense in_features={self.in_features} out_features={self.out_features}"


class Conv2d(Layer):
    """Direct 2-D convolution (cross-correlation) with zero padding."""

    kind = "conv2d"
    params = ("weights", "bias")

    def __init__(self, weights, bias, stride: int = 1, padding: int = 0):
        self.weights = np.ascontiguousarray(weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)
        self.stride = int(stride)
        self.padding = int(padding)
        if self.weights.ndim != 4 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"conv2d: weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def kernel(self):
        return self.weights.shape[2:]

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ShapeError(
                f"conv2d expects ({self.in_channels}, H, W) input, got {shape}"
            )
        kh, kw = self.kernel
        h = (shape[1] + 2 * self.padding - kh) // self.stride + 1
        w = (shape[2] + 2 * self.padding - kw) // self.stride + 1
        if h < 1 or w < 1:
            raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit input {shape}")
        return (self.out_channels, h, w)

    def _pad(self, x):
        p = self.padding
        if p == 0:
            return x
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))

    def forward(self, x):
        xp = self._pad(x)
        n, _, hp, wp = xp.shape
        kh, kw = self.kernel
        s = self.stride
        ho = (hp - kh) // s + 1
        wo = (wp - kw) // s + 1
        out = np.zeros((n, self.out_channels, ho, wo))
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]
                out += np.einsum("nchw,oc->nohw", patch, self.weights[:, :, i, j])
        out += self.bias[None, :, None, None]
        return out, (xp, x.shape)

    def backward(self, g, cache, param_grads=None):
        xp, in_shape = cache
        kh, kw = self.kernel
        s = self.stride
        ho, wo = g.shape[2:]
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(self.weights) if param_grads is not None else None
        for i in range(kh):
            for j in range(kw):
                sl = (
                    slice(None),
                    slice(None),
                    slice(i, i + s * (ho - 1) + 1, s),
                    slice(j, j + s * (wo - 1) + 1, s),
                )
                gxp[sl] += np.einsum("nohw,oc->nchw", g, self.weights[:, :, i, j])
                if gw is not None:
                    gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, xp[sl])
        if param_grads is not None:
            param_grads.append((gw, g.sum(axis=(0, 2, 3))))
        p = self.padding
        if p:
            gxp = gxp[:, :, p:-p, p:-p]
        return gxp

    def header(self):
        kh, kw = self.kernel
        return (
            f"layer=conv2d in_channels={self.in_channels} out_channels={self.out_channels} "
            f"kernel={kh},{kw} stride={self.stride} padding={self.padding}"
        )


class ReLU(Layer):
    kind = "relu"

    def output_shape(self, shape):
        return shape

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, g, cache, param_grads=None):
        # subgradient at 0 is 0
        return g * cache

    def header(self):
        return "layer=relu"


class MaxPool2d(Layer):
    """Max pooling; ties go to the first element in row-major window order."""

    kind = "maxpool2d"

    def __init__(self, kernel: int, stride: int | None = None):
        self.kernel = int(kernel)
        self.stride = int(stride if stride is not None else kernel)
        if self.kernel < 1 or self.stride < 1:
            raise ShapeError("maxpool2d: kernel and stride must be >= 1")

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"maxpool2d expects (C, H, W) input, got {shape}")
        h = (shape[1] - self.kernel) // self.stride + 1
        w = (shape[2] - self.kernel) // self.stride + 1
        if h < 1 or w < 1:
            raise ShapeError(f"maxpool2d kernel {self.kernel} does not fit input {shape}")
        return (shape[0], h, w)

    def forward(self, x):
        k, s = self.kernel, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        flat = win.reshape(n, c, ho, wo, k * k)
        arg = flat.argmax(axis=-1)  # first maximum wins
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)

    def backward(self, g, cache, param_grads=None):
        shape, arg = cache
        k, s = self.kernel, self.stride
        n, c, ho, wo = g.shape
        gx = np.zeros(shape)
        rows = (np.arange(ho) * s)[None, None, :, None] + arg // k
        cols = (np.arange(wo) * s)[None, None, None, :] + arg % k
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gx, (ni, ci, rows, cols), g)
        return gx

    def header(self):
        return f"layer=maxpool2d kernel={self.kernel} stride={self.stride}"


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, g, cache, param_grads=None):
        return g.reshape(cache)

    def header(self):
        return "layer=flatten"


# --------------------------------------------------------------------------
# model


class Model:
    """An immutable chain of layers mapping ``input_shape`` to K logits."""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int]):
        if not layers:
            raise ShapeError("a model needs at least one layer")
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        shape = self.input_shape
        for idx, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {idx} ({layer.kind}): {exc}") from None
        if len(shape) != 1:
            raise ShapeError(f"model output must be a vector, got shape {shape}")
        if shape[0] < 3:
            raise ShapeError(f"model must output at least 3 logits, got {shape[0]}")
        self.num_classes = shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, Model)
            and self.input_shape == other.input_shape
            and self.layers == other.layers
        )

    def num_parameters(self) -> int:
        return sum(getattr(l, p).size for l in self.layers for p in l.params)

    # batched, uncounted passes (training, evaluation)

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Batched forward pass, ``x`` of shape (N, *input_shape). Not counted."""
        out = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            out, _ = layer.forward(out)
        return out

    def forward_with_cache(self, x: np.ndarray):
        caches = []
        out = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            out, cache = layer.forward(out)
            caches.append(cache)
        return out, caches

    def backward_from_cache(self, g: np.ndarray, caches, param_grads: list | None = None):
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            g = layer.backward(g, cache, param_grads)
        return g

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)


def _check_input(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")
    return x


def forward(model: Model, x: np.ndarray, counter: PropagationCounter | None = None) -> np.ndarray:
    """Logits for a single input. Counts one forward propagation."""
    x = _check_input(model, x)
    z = model.logits(x[None])[0]
    if counter is not None:
        counter.forwards += 1
    return z


def value_and_grad(
    model: Model,
    x: np.ndarray,
    loss: Callable[[np.ndarray], tuple[float, np.ndarray]],
    counter: PropagationCounter | None = None,
):
    """Fused pass: logits, then ``loss(z) -> (value, dvalue/dz)``, then the input gradient.

    Counts exactly one forward and one backward propagation.
    Returns ``(z, value, grad_x)``.
    """
    x = _check_input(model, x)
    z, caches = model.forward_with_cache(x[None])
    z = z[0]
    if counter is not None:
        counter.forwards += 1
    value, upstream = loss(z)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (model.num_classes,):
        raise ShapeError(f"upstream gradient must have shape ({model.num_classes},)")
    g = model.backward_from_cache(upstream[None], caches)[0]
    if counter is not None:
        counter.backwards += 1
    return z, value, g


def input_gradient(
    model: Model,
    x: np.ndarray,
    upstream: np.ndarray,
    counter: PropagationCounter | None = None,
) -> np.ndarray:
    """J^T upstream, J being d logits / d x. Counts one forward and one backward."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (model.num_classes,):
        raise ShapeError(f"upstream gradient must have shape ({model.num_classes},)")
    _, _, g = value_and_grad(model, x, lambda z: (float(z @ upstream), upstream), counter)
    return g


# --------------------------------------------------------------------------
# construction helpers


def init_dense(rng: np.random.Generator, n_in: int, n_out: int) -> Dense:
    w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
    return Dense(w, np.zeros(n_out))


def init_conv(rng: np.random.Generator, c_in: int, c_out: int, k: int, stride=1, padding=0) -> Conv2d:
    fan_in = c_in * k * k
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
    return Conv2d(w, np.zeros(c_out), stride=stride, padding=padding)


def mlp(rng: np.random.Generator, input_shape: Sequence[int], hidden: Sequence[int], num_classes: int) -> Model:
    layers: list[Layer] = []
    if len(input_shape) > 1:
        layers.append(Flatten())
    width = int(np.prod(input_shape))
    for h in hidden:
        layers += [init_dense(rng, width, h), ReLU()]
        width = h
    layers.append(init_dense(rng, width, num_classes))
    return Model(layers, input_shape)


# --------------------------------------------------------------------------
# serialization


def save_model(model: Model, path: "str | os.PathLike") -> None:
    if not model.layers:
        raise ShapeError("refusing to save a model without layers")
    lines = [
        "input_shape=" + ",".join(str(s) for s in model.input_shape),
        f"num_classes={model.num_classes}",
    ]
    lines += [layer.header() for layer in model.layers]
    lines.append("end")
    chunks = [MAGIC, ("\n".join(lines) + "\n").encode("ascii")]
    for layer in model.layers:
        for name in layer.params:
            arr = np.ascontiguousarray(getattr(layer, name), dtype="<f8")
            chunks.append(struct.pack("<Q", arr.size))
            chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def _ints(text: str, line_no: int, key: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise ModelFormatError(f"{key}: expected integers, got {text!r}", line=line_no) from None
    return vals


def _parse_layer_line(line: str, line_no: int) -> dict:
    fields = {}
    for tok in line.split():
        if "=" not in tok:
            raise ModelFormatError(f"malformed token {tok!r}", line=line_no)
        k, v = tok.split("=", 1)
        fields[k] = v
    return fields


def _read_block(data: bytes, pos: int, expected: int, what: str) -> tuple[np.ndarray, int]:
    if pos + 8 > len(data):
        raise ModelFormatError(f"truncated file: missing length of {what}", offset=pos)
    (count,) = struct.unpack_from("<Q", data, pos)
    if count != expected:
        raise ModelFormatError(f"{what}: expected {expected} values, block declares {count}", offset=pos)
    pos += 8
    end = pos + 8 * count
    if end > len(data):
        raise ModelFormatError(f"truncated file: {what} needs {8 * count} bytes", offset=pos)
    arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return arr, end


def parse_model(data: bytes) -> Model:
    if not data.startswith(MAGIC):
        raise ModelFormatError("bad magic bytes (not an ALMANN1 model file)", line=1, offset=0)
    pos = len(MAGIC)
    specs = []
    input_shape = None
    num_classes = None
    line_no = 1
    while True:
        nl = data.find(b"\n", pos)
        line_no += 1
        if nl < 0:
            raise ModelFormatError("truncated header (no 'end' line)", line=line_no, offset=pos)
        try:
            line = data[pos:nl].decode("ascii").strip()
        except UnicodeDecodeError:
            raise ModelFormatError("non-ASCII header line", line=line_no, offset=pos) from None
        pos = nl + 1
        if line == "end":
            break
        if line.startswith("input_shape="):
            input_shape = _ints(line.split("=", 1)[1], line_no, "input_shape")
        elif line.startswith("num_classes="):
            num_classes = _ints(line.split("=", 1)[1], line_no, "num_classes")[0]
        elif line.startswith("layer="):
            specs.append((_parse_layer_line(line, line_no), line_no))
        else:
            raise ModelFormatError(f"unexpected header line {line!r}", line=line_no)
    if input_shape is None:
        raise ModelFormatError("header lacks input_shape")
    if not specs:
        raise ModelFormatError("model has no layers")

    layers: list[Layer] = []
    for fields, ln in specs:
        kind = fields.get("layer")
        try:
            if kind == "dense":
                i, o = int(fields["in_features"]), int(fields["out_features"])
                w, pos = _read_block(data, pos, i * o, f"dense weights (line {ln})")
                b, pos = _read_block(data, pos, o, f"dense bias (line {ln})")
                layers.append(Dense(w.reshape(o, i), b))
            elif kind == "conv2d":
                c, o = int(fields["in_channels"]), int(fields["out_channels"])
                kh, kw = _ints(fields["kernel"], ln, "kernel")
                w, pos = _read_block(data, pos, o * c * kh * kw, f"conv2d weights (line {ln})")
                b, pos = _read_block(data, pos, o, f"conv2d bias (line {ln})")
                layers.append(
                    Conv2d(w.reshape(o, c, kh, kw), b, int(fields["stride"]), int(fields["padding"]))
                )
            elif kind == "relu":
                layers.append(ReLU())
            elif kind == "maxpool2d":
                layers.append(MaxPool2d(int(fields["kernel"]), int(fields["stride"])))
            elif kind == "flatten":
                layers.append(Flatten())
            else:
                raise ModelFormatError(f"unknown layer kind {kind!r}", line=ln)
        except KeyError as exc:
            raise ModelFormatError(f"layer {kind!r} is missing field {exc.args[0]!r}", line=ln) from None
        except ValueError as exc:
            if isinstance(exc, ModelFormatError):
                raise
            raise ModelFormatError(f"bad layer field: {exc}", line=ln) from None
    if pos != len(data):
        raise ModelFormatError(f"{len(data) - pos} trailing bytes after last weight block", offset=pos)

    model = Model(layers, input_shape)
    if num_classes is not None and num_classes != model.num_classes:
        raise ShapeError(f"header declares {num_classes} classes but layers produce {model.num_classes}")
    for layer in model.layers:
        for p in layer.params:
            if not np.all(np.isfinite(getattr(layer, p))):
                raise ModelFormatError(f"non-finite {p} in {layer.kind} layer")
    return model


def load_model(path: "str | os.PathLike") -> Model:
    with open(path, "rb") as fh:
        return parse_model(fh.read())
