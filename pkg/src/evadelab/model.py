"""Model definitions, training, persistence and the classifier interfaces."""

import itertools
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import FormatError, ParameterError, TrainingError
from .prng import KeyedStream, key_from_seed, new_key, stream_id

log = logging.getLogger(__name__)

MAGIC = b"EVLM"
FORMAT_VERSION = 1
_PARAM_LAYERS = ("conv", "dense")


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer descriptors plus input shape and class count.

    Layer kinds: ``conv`` (``filters``, ``kernel``, ``padding``), ``dense``
    (``units``), ``relu``, ``maxpool`` (2x2), ``flatten``.
    """

    layers: tuple
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(dict(layer) for layer in self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.output_shapes()

    def output_shapes(self):
        """Shape after every layer (batch dimension omitted); validates conformance."""
        shape = self.input_shape
        if len(shape) != 3:
            raise ParameterError(f"input shape must be H x W x C, got {shape}")
        shapes = []
        for i, layer in enumerate(self.layers):
            kind = layer.get("kind")
            if kind == "conv":
                if len(shape) != 3:
                    raise ParameterError(f"layer {i}: conv needs a 3-d input, got {shape}")
                k = int(layer["kernel"])
                pad = layer.get("padding", "same")
                if pad == "valid":
                    shape = (shape[0] - k + 1, shape[1] - k + 1, int(layer["filters"]))
                else:
                    shape = (shape[0], shape[1], int(layer["filters"]))
                if min(shape[:2]) < 1:
                    raise ParameterError(f"layer {i}: kernel {k} larger than input")
            elif kind == "maxpool":
                if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
                    raise ParameterError(f"layer {i}: cannot pool shape {shape}")
                shape = (shape[0] // 2, shape[1] // 2, shape[2])
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif kind == "dense":
                if len(shape) != 1:
                    raise ParameterError(f"layer {i}: dense needs a flat input, got {shape}")
                shape = (int(layer["units"]),)
            elif kind == "relu":
                pass
            else:
                raise ParameterError(f"layer {i}: unknown kind {kind!r}")
            shapes.append(shape)
        if not shapes or shapes[-1] != (self.num_classes,):
            raise ParameterError(f"final layer must emit {self.num_classes} logits, got {shapes[-1] if shapes else None}")
        return shapes

    def param_shapes(self):
        shapes = []
        prev = self.input_shape
        for layer, out in zip(self.layers, self.output_shapes()):
            if layer["kind"] == "conv":
                k = int(layer["kernel"])
                shapes += [(k, k, prev[2], int(layer["filters"])), (int(layer["filters"]),)]
            elif layer["kind"] == "dense":
                shapes += [(prev[0], int(layer["units"])), (int(layer["units"]),)]
            prev = out
        return shapes

    def to_json(self):
        return json.dumps({"layers": list(self.layers), "input_shape": list(self.input_shape),
                           "num_classes": self.num_classes}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(tuple(d["layers"]), tuple(d["input_shape"]), int(d["num_classes"]))


def mlp_spec(input_shape=(28, 28, 1), hidden=(256,), num_classes=10):
    layers = [{"kind": "flatten"}]
    for h in hidden:
        layers += [{"kind": "dense", "units": h}, {"kind": "relu"}]
    layers.append({"kind": "dense", "units": num_classes})
    return ModelSpec(tuple(layers), input_shape, num_classes)


def small_cnn_spec(input_shape=(28, 28, 1), num_classes=10):
    """conv3x3x16 - pool - conv3x3x32 - pool - dense128 - dense10."""
    layers = (
        {"kind": "conv", "filters": 16, "kernel": 3, "padding": "same"},
        {"kind": "relu"},
        {"kind": "maxpool"},
        {"kind": "conv", "filters": 32, "kernel": 3, "padding": "same"},
        {"kind": "relu"},
        {"kind": "maxpool"},
        {"kind": "flatten"},
        {"kind": "dense", "units": 128},
        {"kind": "relu"},
        {"kind": "dense", "units": num_classes},
    )
    return ModelSpec(layers, input_shape, num_classes)


def init_params(spec, rng):
    """Uniform fan-in scaled weights, zero biases."""
    params = []
    for shape in spec.param_shapes():
        if len(shape) == 1:
            params.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            params.append(rng.uniform(-limit, limit, size=shape))
    return params


def forward(spec, params, x):
    """Logits tensor for input tensor ``x``; params may be arrays or tensors."""
    it = iter(params)
    h = x
    for layer in spec.layers:
        kind = layer["kind"]
        if kind == "conv":
            h = T.conv2d(h, next(it), next(it), layer.get("padding", "same"))
        elif kind == "dense":
            h = T.dense(h, next(it), next(it))
        elif kind == "relu":
            h = T.relu(h)
        elif kind == "maxpool":
            h = T.maxpool2x2(h)
        elif kind == "flatten":
            h = T.flatten(h)
    return h


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def argmax_lowest(probs):
    """Row-wise argmax; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=-1)


class Classifier:
    """Deterministic classifier: a model spec with trained parameters."""

    batch_size = 500

    def __init__(self, spec, params):
        self.spec = spec
        shapes = spec.param_shapes()
        if len(params) != len(shapes):
            raise ParameterError(f"expected {len(shapes)} parameter arrays, got {len(params)}")
        frozen = []
        for p, s in zip(params, shapes):
            p = np.array(p, dtype=np.float64)
            if p.shape != tuple(s):
                raise ParameterError(f"parameter shape {p.shape} does not match {s}")
            p.flags.writeable = False
            frozen.append(p)
        self.params = tuple(frozen)

    @property
    def num_classes(self):
        return self.spec.num_classes

    def _batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.shape == self.spec.input_shape
        if single:
            x = x[None]
        if x.shape[1:] != self.spec.input_shape:
            raise ParameterError(f"input shape {x.shape[1:]} does not match model input {self.spec.input_shape}")
        return x, single

    def logits(self, x):
        x, single = self._batch(x)
        out = np.concatenate([forward(self.spec, self.params, T.Tensor(x[i:i + self.batch_size])).data
                              for i in range(0, max(len(x), 1), self.batch_size)]) if len(x) else np.zeros((0, self.num_classes))
        return out[0] if single else out

    def predict_probs(self, x, stream=None):
        z = self.logits(x)
        return _softmax(z[None])[0] if z.ndim == 1 else _softmax(z)

    def predict_label(self, x, stream=None):
        return argmax_lowest(self.predict_probs(x))

    def input_gradient(self, x, objective):
        """Value and input gradient of ``objective(logits_tensor, logits_array)``.

        ``objective`` returns a scalar tensor; per-sample objectives should be
        summed over the batch so each row's gradient is its own.
        """
        x, single = self._batch(x)
        tape = T.Tape()
        xv = tape.variable(x)
        z = forward(self.spec, self.params, xv)
        loss = objective(z, z.data)
        g = tape.backward(loss, [xv])[xv]
        return float(loss.data), (g[0] if single else g), (z.data[0] if single else z.data)

    def jacobian(self, x):
        """Logits (N x K) and their input Jacobian (N x K x H x W x C)."""
        x, _ = self._batch(x)
        tape = T.Tape()
        xv = tape.variable(x)
        z = forward(self.spec, self.params, xv)
        K = z.shape[1]
        jac = np.empty((x.shape[0], K) + x.shape[1:])
        for k in range(K):
            w = np.zeros(z.shape)
            w[:, k] = 1.0
            jac[:, k] = tape.backward(T.weighted_sum(z, w), [xv])[xv]
        return z.data, jac


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 3
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.9
    lr_decay: float = 0.7


def train(spec, data, config=None, augment=None, **overrides):
    """Mini-batch SGD with momentum; deterministic given ``config.seed``.

    ``augment(images, epoch, batch_index, sample_index)`` may transform each
    batch before the step (crop training uses this).
    """
    cfg = config or TrainConfig()
    if overrides:
        cfg = TrainConfig(**{**cfg.__dict__, **overrides})
    if len(data) == 0:
        raise ParameterError("training set is empty")
    if tuple(data.image_shape) != spec.input_shape:
        raise ParameterError(f"data shape {data.image_shape} does not match model input {spec.input_shape}")
    if data.labels.max() >= spec.num_classes:
        raise ParameterError("labels exceed the model's class count")

    streams = KeyedStream(key_from_seed(("train", cfg.seed)))
    params = init_params(spec, streams.generator(stream_id("init")))
    velocity = [np.zeros_like(p) for p in params]
    lr = cfg.learning_rate
    n = len(data)
    for epoch in range(cfg.epochs):
        order = streams.generator(stream_id("shuffle", epoch)).permutation(n)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb = data.images[idx]
            if augment is not None:
                xb = augment(xb, epoch, b, idx)
            tape = T.Tape()
            pv = [tape.variable(p) for p in params]
            try:
                probs = T.softmax(forward(spec, pv, T.Tensor(xb)))
                loss = T.cross_entropy_loss(probs, data.labels[idx])
            except FloatingPointError as exc:
                raise TrainingError(f"training diverged: {exc}", epoch) from exc
            if not np.isfinite(loss.data):
                raise TrainingError("training diverged: loss is NaN", epoch)
            grads = tape.backward(loss, pv)
            for i, v in enumerate(pv):
                velocity[i] = cfg.momentum * velocity[i] - lr * grads[v]
                params[i] = params[i] + velocity[i]
            total += float(loss.data) * len(idx)
            seen += len(idx)
        log.info("epoch %d: mean loss %.4f", epoch, total / seen)
        lr *= cfg.lr_decay
    return Classifier(spec, params)


# -- persistence ------------------------------------------------------------------


def save_model(classifier, path):
    """Write ``EVLM | u16 version | u32 len | spec utf-8 | u64 count | f64le params``."""
    spec_bytes = classifier.spec.to_json().encode("utf-8")
    blob = np.concatenate([p.reshape(-1) for p in classifier.params]).astype("<f8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", FORMAT_VERSION, len(spec_bytes)))
        f.write(spec_bytes)
        f.write(struct.pack("<Q", blob.size))
        f.write(blob.tobytes())


def load_model(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", 0)
    if len(raw) < 10:
        raise FormatError("header truncated", len(raw))
    version, spec_len = struct.unpack_from("<HI", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    off = 10
    if len(raw) < off + spec_len:
        raise FormatError(f"spec truncated: need {spec_len} bytes, have {len(raw) - off}", len(raw))
    try:
        spec = ModelSpec.from_json(raw[off:off + spec_len].decode("utf-8"))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid spec descriptor: {exc}", off) from exc
    off += spec_len
    if len(raw) < off + 8:
        raise FormatError("parameter count truncated", len(raw))
    (count,) = struct.unpack_from("<Q", raw, off)
    off += 8
    expected = sum(int(np.prod(s)) for s in spec.param_shapes())
    if count != expected:
        raise FormatError(f"parameter count {count} does not match spec ({expected})", off - 8)
    if len(raw) != off + 8 * count:
        raise FormatError(f"parameter blob truncated: expected {8 * count} bytes, got {len(raw) - off}", len(raw))
    blob = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64)
    params, pos = [], 0
    for s in spec.param_shapes():
        size = int(np.prod(s))
        params.append(blob[pos:pos + size].reshape(s))
        pos += size
    return Classifier(spec, params)


# -- randomized classifier and metrics -----------------------------------------------


class RandomizedClassifier:
    """A base classifier behind a (possibly randomized) preprocessing defense.

    Each prediction call draws its randomness from ``(key, stream)``; when no
    stream index is supplied an internal counter provides a fresh one.
    Concurrent callers must pass distinct stream indices.
    """

    def __init__(self, base, defense=None, key=None):
        self.base = base
        self.defense = defense
        self.key = bytes(key) if key is not None else new_key()
        self.streams = KeyedStream(self.key)
        self._counter = itertools.count()

    @property
    def delta(self):
        return getattr(self.defense, "delta", 0.0)

    @property
    def num_classes(self):
        return self.base.num_classes

    def _streams_for(self, n, stream):
        if stream is None:
            stream = stream_id("auto", next(self._counter))
        if np.ndim(stream) == 0:
            return np.array([stream_id(int(stream), i) for i in range(n)], dtype=np.uint64)
        stream = np.asarray(stream, dtype=np.uint64)
        if stream.shape != (n,):
            raise ParameterError(f"need {n} stream indices, got {stream.shape}")
        return stream

    def predict_probs(self, x, stream=None):
        x = np.asarray(x, dtype=np.float64)
        single = x.shape == self.base.spec.input_shape
        xb = x[None] if single else x
        if self.defense is None:
            probs = self.base.predict_probs(xb)
        else:
            probs = self.defense.probs(self.base, xb, self.streams, self._streams_for(len(xb), stream))
        return probs[0] if single else probs

    def predict_label(self, x, stream=None):
        return argmax_lowest(self.predict_probs(x, stream))


def predict_probs(c, x, stream=None):
    return c.predict_probs(x, stream) if isinstance(c, RandomizedClassifier) else c.predict_probs(x)


def predict_label(c, x, stream=None):
    return argmax_lowest(predict_probs(c, x, stream))


def accuracy(c, data, stream=None):
    """Fraction of ``data`` whose predicted label equals the true label."""
    if len(data) == 0:
        raise ParameterError("accuracy of an empty dataset is undefined")
    good = int(np.sum(predict_label(c, data.images, stream) == data.labels))
    return good / len(data)


def error(c, data, stream=None):
    return 1.0 - accuracy(c, data, stream)


@dataclass
class RandomizedError:
    per_sample: np.ndarray
    mean: float
    repetitions: int
    per_repetition: np.ndarray = field(repr=False)

    @property
    def std(self):
        return float(self.per_repetition.std()) if self.repetitions > 1 else 0.0


def randomized_error(c, data, repetitions=200, tag=0):
    """Per-sample misclassification frequency over independent randomness draws."""
    if repetitions < 1:
        raise ParameterError("repetitions must be >= 1")
    wrong = np.zeros(len(data), dtype=np.int64)
    per_rep = np.empty(repetitions)
    for r in range(repetitions):
        streams = np.array([stream_id("rerr", tag, r, i) for i in range(len(data))], dtype=np.uint64)
        miss = predict_label(c, data.images, streams) != data.labels
        wrong += miss
        per_rep[r] = miss.mean()
    freq = wrong / repetitions
    return RandomizedError(freq, float(freq.mean()), repetitions, per_rep)
