"""Input-transformation defenses: squeezers, pixel randomization, ensembles, detection.

A defense exposes ``probs(base, x, streams, stream_ids)`` returning the
defended probability vectors for a batch, plus ``sample_transform`` and
``transform_vjp`` which the whitebox attacks use (one randomness draw and
its backward approximation). All transforms are pure given the stream index.
"""

import logging
import re
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ParameterError
from .prng import KeyedStream, key_from_seed, stream_id

log = logging.getLogger(__name__)


def _check_image(x):
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ParameterError("image values must lie in [0, 1]")
    return x


def _batched(fn, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return fn(x[None])[0]
    return fn(x)


# -- squeezers --------------------------------------------------------------------


def reduce_bit_depth(x, bits):
    """Quantize to the grid ``{0, 1/L, ..., 1}``, ``L = 2**bits - 1``, rounding half away from zero."""
    if not 1 <= int(bits) <= 8:
        raise ParameterError(f"bit depth must be in 1..8, got {bits}")
    levels = float(2 ** int(bits) - 1)
    x = np.asarray(x, dtype=np.float64)
    return np.floor(x * levels + 0.5) / levels


def median_smooth(x, kh, kw=None):
    kw = kh if kw is None else kw
    if kh < 1 or kw < 1:
        raise ParameterError("median window must be at least 1x1")
    return _batched(lambda b: kernels.median_filter(b, kh, kw), x)


def non_local_means(x, a, b, c):
    if not (a >= b >= 1) or c <= 0:
        raise ParameterError(f"non-local means needs a >= b >= 1 and c > 0, got {a}-{b}-{c}")
    return _batched(lambda batch: kernels.nl_means(batch, a, b, c), x)


@dataclass(frozen=True)
class Squeezer:
    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind == "bit_depth":
            if len(self.params) != 1 or not 1 <= self.params[0] <= 8:
                raise ParameterError(f"bit depth must be in 1..8, got {self.params}")
        elif self.kind == "median":
            if len(self.params) != 2 or min(self.params) < 1:
                raise ParameterError(f"median window must be k_h x k_w >= 1, got {self.params}")
        elif self.kind == "nlmeans":
            a, b, c = self.params
            if not (a >= b >= 1) or c <= 0:
                raise ParameterError(f"non-local means needs a >= b >= 1 and c > 0, got {self.params}")
        elif self.kind != "identity":
            raise ParameterError(f"unknown squeezer {self.kind!r}")

    def __call__(self, x):
        if self.kind == "bit_depth":
            return reduce_bit_depth(x, self.params[0])
        if self.kind == "median":
            return median_smooth(x, *self.params)
        if self.kind == "nlmeans":
            return non_local_means(x, *self.params)
        return np.array(x, dtype=np.float64)

    def describe(self):
        if self.kind == "bit_depth":
            return f"bit_depth:{self.params[0]}"
        if self.kind == "median":
            return f"median:{self.params[0]}x{self.params[1]}"
        if self.kind == "nlmeans":
            return "nlmeans:{}-{}-{:g}".format(*self.params)
        return "identity"


def bit_depth(bits):
    return Squeezer("bit_depth", (int(bits),))


def median(kh, kw=None):
    return Squeezer("median", (int(kh), int(kh if kw is None else kw)))


def nlmeans(a, b, c):
    return Squeezer("nlmeans", (int(a), int(b), float(c)))


IDENTITY = Squeezer("identity")


# -- pixel randomization ------------------------------------------------------------


def randomize_pixels(x, delta, streams, stream):
    """``clamp(x + u, 0, 1)`` with ``u`` uniform in [-delta, delta] per pixel and channel.

    ``x`` is one image (H x W x C) or a batch with one stream index per image.
    Word ``i`` of the stream perturbs the pixel-channel with linear index ``i``.
    """
    if not 0.0 <= delta <= 1.0:
        raise ParameterError(f"delta must lie in [0, 1], got {delta}")
    x = np.asarray(x, dtype=np.float64)
    if delta == 0.0:
        return x.copy()
    if x.ndim == 3:
        return np.clip(x + streams.symmetric(stream, x.shape, delta), 0.0, 1.0)
    ids = np.broadcast_to(np.asarray(stream, dtype=np.uint64), (x.shape[0],))
    noise = np.stack([streams.symmetric(s, x.shape[1:], delta) for s in ids])
    return np.clip(x + noise, 0.0, 1.0)


def _bilinear_matrix(out_size, in_size):
    """Rows interpolate ``in_size`` samples onto ``out_size`` with half-pixel centres."""
    m = np.zeros((out_size, in_size))
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def crop_rescale(x, top, left, size):
    """Crop an ``size x size`` window at (top, left) and rescale bilinearly to the input size."""
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[-3], x.shape[-2]
    crop = x[..., top:top + size, left:left + size, :]
    rh, rw = _bilinear_matrix(H, size), _bilinear_matrix(W, size)
    return np.einsum("ih,...hwc,jw->...ijc", rh, crop, rw)


def crop_rescale_vjp(g, shape, top, left, size):
    """Adjoint of :func:`crop_rescale` (exact; the map is linear)."""
    H, W = shape[-3], shape[-2]
    rh, rw = _bilinear_matrix(H, size), _bilinear_matrix(W, size)
    out = np.zeros(shape)
    out[..., top:top + size, left:left + size, :] = np.einsum("ih,...ijc,jw->...hwc", rh, g, rw)
    return out


def random_crop_rescale(x, size, streams, stream):
    """One random crop (uniform origin) of a single image, rescaled back."""
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[0], x.shape[1]
    if not 1 <= size <= min(H, W):
        raise ParameterError(f"crop size must be in 1..{min(H, W)}, got {size}")
    top, left = _crop_origins(streams, stream, 1, H, W, size)[0]
    return crop_rescale(x, top, left, size)


def _crop_origins(streams, stream, n, H, W, size):
    u = streams.uniform(stream, (n, 2))
    return np.stack([np.floor(u[:, 0] * (H - size + 1)), np.floor(u[:, 1] * (W - size + 1))], axis=1).astype(int)


def _vote_fractions(labels, K):
    # labels: N x m
    return (labels[..., None] == np.arange(K)).mean(axis=1)


# -- defenses -----------------------------------------------------------------------


class Defense:
    """Base: the identity (no defense)."""

    randomized = False
    delta = 0.0
    draws = 1

    def probs(self, base, x, streams, stream_ids):
        return base.predict_probs(self.sample_transform(x, streams, stream_ids)[0])

    def sample_transform(self, x, streams, stream_ids):
        """One draw of the input transformation and the context its VJP needs."""
        return np.array(x, dtype=np.float64), None

    def transform_vjp(self, g, ctx):
        """Backward pass through one draw; straight-through (BPDA) by default."""
        return g

    def describe(self):
        return "none"


NO_DEFENSE = Defense()


class FeatureSqueezing(Defense):
    def __init__(self, squeezer):
        self.squeezer = squeezer

    def sample_transform(self, x, streams, stream_ids):
        return self.squeezer(_check_image(x)), None

    def describe(self):
        return self.squeezer.describe()


class RandomizedSqueezing(Defense):
    """Randomize pixels, then squeeze, then classify with one model call."""

    def __init__(self, squeezer, delta):
        if not 0.0 <= delta <= 1.0:
            raise ParameterError(f"delta must lie in [0, 1], got {delta}")
        self.squeezer = squeezer
        self.delta = float(delta)
        self.randomized = self.delta > 0

    def sample_transform(self, x, streams, stream_ids):
        x = _check_image(x)
        return self.squeezer(randomize_pixels(x, self.delta, streams, stream_ids)), None

    def describe(self):
        return f"randsqueeze:{self.squeezer.describe()}:delta={self.delta:g}"


class RegionBased(Defense):
    """Majority vote over ``m`` samples from the clamped hypercube of radius ``r``."""

    randomized = True

    def __init__(self, r, m=100):
        if not 0.0 <= r <= 1.0 or m < 1:
            raise ParameterError(f"region defense needs 0 <= r <= 1 and m >= 1, got r={r}, m={m}")
        self.r = float(r)
        self.m = int(m)
        self.randomized = self.r > 0

    @property
    def delta(self):
        return self.r

    def _members(self, x, streams, stream_ids):
        n = x.shape[0]
        out = np.empty((n, self.m) + x.shape[1:])
        for i in range(n):
            noise = streams.symmetric(int(stream_ids[i]), (self.m,) + x.shape[1:], self.r)
            out[i] = np.clip(x[i] + noise, 0.0, 1.0)
        return out

    def probs(self, base, x, streams, stream_ids):
        x = _check_image(x)
        if self.r == 0.0:
            return base.predict_probs(x)
        members = self._members(x, streams, stream_ids)
        labels = np.argmax(base.predict_probs(members.reshape((-1,) + x.shape[1:])), axis=1)
        return _vote_fractions(labels.reshape(x.shape[0], self.m), base.num_classes)

    def sample_transform(self, x, streams, stream_ids):
        x = _check_image(x)
        if self.r == 0.0:
            return x.copy(), None
        ids = np.broadcast_to(np.asarray(stream_ids, dtype=np.uint64), (x.shape[0],))
        return np.stack([np.clip(x[i] + streams.symmetric(int(s), x.shape[1:], self.r), 0.0, 1.0)
                         for i, s in enumerate(ids)]), None

    def describe(self):
        return f"region:r={self.r:g}:m={self.m}"


class CroppingRescaling(Defense):
    """Mean probability over ``n`` random ``s x s`` crops rescaled to full size."""

    randomized = True

    def __init__(self, s, n=30):
        if s < 1 or n < 1:
            raise ParameterError(f"crop defense needs s >= 1 and n >= 1, got s={s}, n={n}")
        self.s = int(s)
        self.n = int(n)

    def _check(self, x):
        H, W = x.shape[1], x.shape[2]
        if self.s > min(H, W):
            raise ParameterError(f"crop size {self.s} exceeds image side {min(H, W)}")
        return H, W

    def probs(self, base, x, streams, stream_ids):
        x = _check_image(x)
        H, W = self._check(x)
        if self.s == min(H, W) == H == W:
            return base.predict_probs(x)
        crops = np.empty((x.shape[0], self.n) + x.shape[1:])
        for i in range(x.shape[0]):
            for j, (t, l) in enumerate(_crop_origins(streams, int(stream_ids[i]), self.n, H, W, self.s)):
                crops[i, j] = crop_rescale(x[i], t, l, self.s)
        p = base.predict_probs(crops.reshape((-1,) + x.shape[1:]))
        return p.reshape(x.shape[0], self.n, -1).mean(axis=1)

    def sample_transform(self, x, streams, stream_ids):
        x = _check_image(x)
        H, W = self._check(x)
        ids = np.broadcast_to(np.asarray(stream_ids, dtype=np.uint64), (x.shape[0],))
        origins = [tuple(_crop_origins(streams, int(s), 1, H, W, self.s)[0]) for s in ids]
        out = np.stack([crop_rescale(x[i], t, l, self.s) for i, (t, l) in enumerate(origins)])
        return out, (x.shape, origins)

    def transform_vjp(self, g, ctx):
        shape, origins = ctx
        return np.stack([crop_rescale_vjp(g[i], shape[1:], t, l, self.s) for i, (t, l) in enumerate(origins)])

    def describe(self):
        return f"croprescale:s={self.s}:n={self.n}"


def with_delta(defense, delta):
    """Copy of a squeezing defense at randomness level ``delta``."""
    if isinstance(defense, (RandomizedSqueezing, FeatureSqueezing)):
        return RandomizedSqueezing(defense.squeezer, delta)
    if isinstance(defense, RegionBased):
        return RegionBased(delta, defense.m)
    if type(defense) is Defense:
        return RandomizedSqueezing(IDENTITY, delta)
    raise ParameterError(f"defense {defense.describe()} has no delta parameter")


# -- radius tuning, crop training, discrepancy detection ------------------------------

DEFAULT_RADIUS_GRID = tuple(np.round(np.arange(0.0, 0.61, 0.02), 2))


def tune_hypercube_radius(base, validation, tolerance=0.01, grid=DEFAULT_RADIUS_GRID, m=100, seed=0):
    """Largest ``r`` on ``grid`` whose region-based accuracy is within ``tolerance`` of the base."""
    from .model import RandomizedClassifier, accuracy

    base_acc = accuracy(base, validation)
    key = key_from_seed(("radius", seed))
    ids = np.array([stream_id("tune", i) for i in range(len(validation))], dtype=np.uint64)
    best = None
    for r in sorted(grid):
        if r == 0:
            continue
        acc = accuracy(RandomizedClassifier(base, RegionBased(r, m), key), validation, ids)
        log.info("radius %.3f: accuracy %.4f (base %.4f)", r, acc, base_acc)
        if acc >= base_acc - tolerance:
            best = r
    if best is None:
        warnings.warn("no radius on the grid keeps accuracy within tolerance; using r=0", RuntimeWarning)
        return 0.0
    return float(best)


def crop_augmenter(size, seed=0):
    """Training hook presenting a fresh random crop of every sample each epoch."""
    streams = KeyedStream(key_from_seed(("crop-train", seed)))

    def augment(images, epoch, batch, index):
        H, W = images.shape[1], images.shape[2]
        out = np.empty_like(images)
        for j, i in enumerate(index):
            t, l = _crop_origins(streams, stream_id(epoch, int(i)), 1, H, W, size)[0]
            out[j] = crop_rescale(images[j], t, l, size)
        return out

    return augment


def train_with_crops(spec, data, size, config=None, **overrides):
    from .model import TrainConfig, train

    cfg = config or TrainConfig()
    return train(spec, data, cfg, augment=crop_augmenter(size, cfg.seed), **overrides)


def squeeze_discrepancy(base, squeezers, x):
    """Max over squeezers of the L1 distance between original and squeezed predictions."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    p0 = base.predict_probs(xb)
    score = np.zeros(xb.shape[0])
    for sq in squeezers:
        score = np.maximum(score, np.abs(p0 - base.predict_probs(sq(xb))).sum(axis=1))
    return score[0] if single else score


def squeeze_discrepancy_detect(base, squeezers, x, threshold):
    """True where the input is flagged adversarial (score strictly above threshold)."""
    return squeeze_discrepancy(base, squeezers, x) > threshold


def fit_detection_threshold(base, squeezers, legitimate, percentile=95.0):
    return float(np.percentile(squeeze_discrepancy(base, squeezers, legitimate.images), percentile))


# -- descriptor strings ----------------------------------------------------------------


def _kv(parts, allowed):
    out = {}
    for p in parts:
        if "=" not in p:
            raise ConfigError(f"expected key=value, got {p!r}")
        k, v = p.split("=", 1)
        if k not in allowed:
            raise ConfigError(f"unknown option {k!r} (allowed: {', '.join(allowed)})")
        try:
            out[k] = float(v)
        except ValueError as exc:
            raise ConfigError(f"option {k} needs a number, got {v!r}") from exc
    return out


def parse_squeezer(parts):
    kind = parts[0]
    try:
        if kind == "bit_depth" and len(parts) == 2:
            return bit_depth(int(parts[1]))
        if kind == "median" and len(parts) == 2:
            m = re.fullmatch(r"(\d+)x(\d+)", parts[1])
            if m:
                return median(int(m.group(1)), int(m.group(2)))
        if kind == "nlmeans" and len(parts) == 2:
            a, b, c = parts[1].split("-")
            return nlmeans(int(a), int(b), float(c))
        if kind in ("identity", "none") and len(parts) == 1:
            return IDENTITY
    except (ValueError, ParameterError) as exc:
        raise ConfigError(f"bad squeezer {':'.join(parts)!r}: {exc}") from exc
    raise ConfigError(f"bad squeezer descriptor {':'.join(parts)!r}")


def parse_defense(text):
    """Build a defense from descriptors such as ``median:3x3`` or ``region:r=0.1:m=100``."""
    parts = text.strip().split(":")
    kind = parts[0]
    try:
        if kind in ("none", ""):
            return NO_DEFENSE
        if kind in ("bit_depth", "median", "nlmeans", "identity"):
            return FeatureSqueezing(parse_squeezer(parts))
        if kind == "randsqueeze":
            if len(parts) < 3 or not parts[-1].startswith("delta="):
                raise ConfigError(f"randsqueeze needs a squeezer and delta=, got {text!r}")
            delta = _kv(parts[-1:], ("delta",))["delta"]
            return RandomizedSqueezing(parse_squeezer(parts[1:-1]), delta)
        if kind == "region":
            opts = _kv(parts[1:], ("r", "m"))
            return RegionBased(opts.get("r", 0.0), int(opts.get("m", 100)))
        if kind == "croprescale":
            opts = _kv(parts[1:], ("s", "n"))
            if "s" not in opts:
                raise ConfigError("croprescale needs s=")
            return CroppingRescaling(int(opts["s"]), int(opts.get("n", 30)))
    except ParameterError as exc:
        raise ConfigError(f"bad defense {text!r}: {exc}") from exc
    raise ConfigError(f"unknown defense descriptor {text!r}")


__all__ = [
    "reduce_bit_depth", "median_smooth", "non_local_means", "Squeezer", "bit_depth", "median", "nlmeans",
    "IDENTITY", "randomize_pixels", "crop_rescale", "crop_rescale_vjp", "random_crop_rescale", "Defense",
    "NO_DEFENSE", "FeatureSqueezing", "RandomizedSqueezing", "RegionBased", "CroppingRescaling", "with_delta",
    "tune_hypercube_radius", "crop_augmenter", "train_with_crops", "squeeze_discrepancy",
    "squeeze_discrepancy_detect", "fit_detection_threshold", "parse_squeezer", "parse_defense",
]
