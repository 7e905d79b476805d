"""Graybox attack battery and whitebox (BPDA / EOT) adaptive attacks.

Attacks see the model only through ``input_gradient``, ``jacobian``,
``logits`` and ``predict_probs``; defenses only through ``probs``,
``sample_transform`` and ``transform_vjp``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ConfigError, ParameterError
from .prng import KeyedStream, key_from_seed, stream_id


# -- distances and targets -------------------------------------------------------------

L0_TOLERANCE = 1e-12


def distances(x, x_adv):
    """(d0, d2, dinf) per sample for batches, or scalars for single images."""
    x = np.asarray(x, dtype=np.float64)
    diff = np.abs(np.asarray(x_adv, dtype=np.float64) - x)
    if x.ndim <= 3:
        flat = diff.reshape(1, -1)
    else:
        flat = diff.reshape(diff.shape[0], -1)
    d0 = (flat > L0_TOLERANCE).sum(axis=1).astype(np.float64)
    d2 = np.sqrt((flat * flat).sum(axis=1))
    dinf = flat.max(axis=1) if flat.shape[1] else np.zeros(flat.shape[0])
    if x.ndim <= 3:
        return float(d0[0]), float(d2[0]), float(dinf[0])
    return d0, d2, dinf


def target_next(y, K):
    return (np.asarray(y) + 1) % K


def target_least_likely(probs):
    """Class with the lowest probability; ties go to the lowest index."""
    return np.argmin(np.asarray(probs), axis=-1)


@dataclass
class AttackResult:
    """Batch of adversarial samples and their bookkeeping."""

    x: np.ndarray
    x_adv: np.ndarray
    target: np.ndarray  # -1 for untargeted
    label: np.ndarray  # model prediction on x_adv
    success: np.ndarray
    iterations: np.ndarray
    trace: dict = field(default_factory=dict)

    def __post_init__(self):
        self.d0, self.d2, self.dinf = distances(self.x, self.x_adv)

    def __len__(self):
        return self.x.shape[0]

    @property
    def success_rate(self):
        return float(np.mean(self.success)) if len(self) else 0.0


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ParameterError(f"attacks expect an N x H x W x C batch, got {x.shape}")
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ParameterError("attack inputs must lie in [0, 1]")
    return x


def _labels(y, n):
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
    return np.array(y)


def _result(model, x, x_adv, target, y, iterations, trace=None):
    label = model.predict_label(x_adv)
    if target is None:
        success = label != y
        target = np.full(x.shape[0], -1)
    else:
        success = label == target
    return AttackResult(x, x_adv, np.asarray(target), label, success, np.asarray(iterations), trace or {})


def _ce_grad(model, x, labels):
    """Per-sample gradient of the cross-entropy loss with respect to the input."""

    def objective(z, _):
        return T.cross_entropy_loss(T.softmax(z), labels, reduction="sum")

    return model.input_gradient(x, objective)[1]


# -- single-step and iterative L-infinity attacks ---------------------------------------


def fgsm(model, x, y, eps, targeted=False):
    """One signed gradient step of size ``eps``; ``y`` is the target when ``targeted``."""
    if eps < 0:
        raise ParameterError("eps must be non-negative")
    x = _batch(x)
    y = _labels(y, x.shape[0])
    step = -eps if targeted else eps
    x_adv = np.clip(x + step * np.sign(_ce_grad(model, x, y)), 0.0, 1.0)
    return _result(model, x, x_adv, y if targeted else None, y, np.ones(x.shape[0], dtype=int))


def bim(model, x, y, eps, alpha, iters, targeted=False):
    """Iterated FGSM steps of size ``alpha``, projected onto the eps-ball and [0, 1]."""
    if eps < 0 or alpha < 0 or iters < 1:
        raise ParameterError("bim needs eps >= 0, alpha >= 0 and iters >= 1")
    x = _batch(x)
    y = _labels(y, x.shape[0])
    step = -alpha if targeted else alpha
    lo, hi = x - eps, x + eps
    z = x
    for _ in range(int(iters)):
        z = np.clip(np.clip(z + step * np.sign(_ce_grad(model, z, y)), lo, hi), 0.0, 1.0)
    return _result(model, x, z, y if targeted else None, y, np.full(x.shape[0], int(iters)))


# -- JSMA -------------------------------------------------------------------------------


def jsma(model, x, target, budget, theta=1.0):
    """Greedy saliency-pair attack on the logits; ``d0 <= budget`` coordinates change."""
    if budget < 0:
        raise ParameterError("budget must be non-negative")
    x = _batch(x)
    target = _labels(target, x.shape[0])
    out = x.copy()
    iterations = np.zeros(x.shape[0], dtype=int)
    increase = theta > 0
    for i in range(x.shape[0]):
        xi = x[i].reshape(-1).copy()
        t = int(target[i])
        domain = (xi < 1.0) if increase else (xi > 0.0)
        changed = np.zeros(xi.size, dtype=bool)
        shape = x.shape[1:]
        while changed.sum() + 2 <= budget:
            z, jac = model.jacobian(xi.reshape(shape)[None])
            if int(np.argmax(z[0])) == t:
                break
            jac = jac[0].reshape(jac.shape[1], -1)
            alpha = jac[t]
            beta = jac.sum(axis=0) - alpha
            p, q = kernels.saliency_pair(alpha, beta, domain, increase)
            if p < 0:
                break
            for j in (p, q):
                xi[j] = min(max(xi[j] + theta, 0.0), 1.0)
                changed[j] = True
                if xi[j] in (0.0, 1.0):
                    domain[j] = False
            iterations[i] += 1
        out[i] = xi.reshape(shape)
    return _result(model, x, out, target, target, iterations)


# -- DeepFool ---------------------------------------------------------------------------


def deepfool(model, x, y, max_iters=50, overshoot=0.02):
    """Untargeted minimal-L2 attack via linearized nearest decision boundaries."""
    x = _batch(x)
    y = _labels(y, x.shape[0])
    out = x.copy()
    iterations = np.zeros(x.shape[0], dtype=int)
    for i in range(x.shape[0]):
        k0 = int(y[i])
        xi = x[i:i + 1]
        r_tot = np.zeros_like(xi)
        cur = xi
        for it in range(int(max_iters)):
            z, jac = model.jacobian(cur)
            if int(np.argmax(z[0])) != k0:
                break
            z, jac = z[0], jac[0]
            best, best_r = np.inf, None
            for k in range(z.shape[0]):
                if k == k0:
                    continue
                w = jac[k] - jac[k0]
                # directions blocked by the [0, 1] box cannot contribute to the step
                w = np.where(((cur[0] <= 0.0) & (w < 0)) | ((cur[0] >= 1.0) & (w > 0)), 0.0, w)
                norm = np.sqrt(np.sum(w * w))
                if norm == 0:
                    continue
                dist = abs(z[k] - z[k0]) / norm
                if dist < best:
                    best, best_r = dist, (abs(z[k] - z[k0]) / (norm * norm)) * w
            if best_r is None:
                break
            r_tot = r_tot + best_r
            cur = np.clip(xi + (1.0 + overshoot) * r_tot, 0.0, 1.0)
            iterations[i] = it + 1
        out[i] = cur[0]
    return _result(model, x, out, None, y, iterations)


# -- Carlini-Wagner L2 -------------------------------------------------------------------


def _cw_margin_weights(z, target, kappa, c):
    other = z.copy()
    other[np.arange(len(z)), target] = -np.inf
    j = np.argmax(other, axis=1)
    margin = other[np.arange(len(z)), j] - z[np.arange(len(z)), target]
    active = margin > -kappa
    w = np.zeros_like(z)
    w[np.arange(len(z)), j] = np.where(active, c, 0.0)
    w[np.arange(len(z)), target] -= np.where(active, c, 0.0)
    return w, np.maximum(margin, -kappa)


def cw_l2(model, x, target, kappa=0.0, search_steps=5, iters=200, lr=1e-2, c_range=(1e-3, 1e3)):
    """Targeted CW-L2 with tanh box encoding, Adam, and a log-space search over ``c``."""
    x = _batch(x)
    n = x.shape[0]
    target = _labels(target, n)
    already = model.predict_label(x) == target
    best = x.copy()
    best_d2 = np.where(already, 0.0, np.inf)
    lo = np.full(n, float(c_range[0]))
    hi = np.full(n, float(c_range[1]))
    w0 = np.arctanh(np.clip(2.0 * x - 1.0, -1.0, 1.0) * (1.0 - 1e-6))
    todo = ~already
    for _ in range(int(search_steps)):
        if not todo.any():
            break
        idx = np.flatnonzero(todo)
        c = np.sqrt(lo[idx] * hi[idx])
        w = w0[idx].copy()
        m, v = np.zeros_like(w), np.zeros_like(w)
        xs = x[idx]
        found = np.zeros(len(idx), dtype=bool)
        for step in range(1, int(iters) + 1):
            xa = (np.tanh(w) + 1.0) / 2.0
            weights = {}

            def objective(z, zd):
                weights["w"], _ = _cw_margin_weights(zd, target[idx], kappa, c)
                return T.weighted_sum(z, weights["w"])

            _, gz, z = model.input_gradient(xa, objective)
            ok = np.argmax(z, axis=1) == target[idx]
            d2 = np.sqrt(((xa - xs) ** 2).reshape(len(idx), -1).sum(axis=1))
            improve = ok & (d2 < best_d2[idx])
            best[idx[improve]] = xa[improve]
            best_d2[idx[improve]] = d2[improve]
            found |= ok
            g = (2.0 * (xa - xs) + gz) * (1.0 - np.tanh(w) ** 2) / 2.0
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - lr * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
        hi[idx[found]] = c[found]
        lo[idx[~found]] = c[~found]
    iterations = np.where(already, 0, int(search_steps) * int(iters))
    return _result(model, x, best, target, target, iterations)


# -- whitebox: BPDA and EOT ----------------------------------------------------------------


WHITEBOX_OBJECTIVES = ("prob", "logprob")


def _target_grad(model, x, target, objective="prob"):
    if objective not in WHITEBOX_OBJECTIVES:
        raise ParameterError(f"objective must be one of {WHITEBOX_OBJECTIVES}")

    def f(z, _):
        sel = np.eye(z.shape[1])[target]
        return T.weighted_sum(T.softmax(z) if objective == "prob" else T.log_softmax(z), sel)

    return model.input_gradient(x, f)[1]


def bpda_gradient(defense, model, x, target, streams=None, stream=0, objective="prob"):
    """Gradient of the target probability (or its log) through one draw of ``defense``.

    The forward pass applies the exact transform; the backward pass uses the
    defense's ``transform_vjp`` (identity for non-differentiable squeezers).
    """
    x = _batch(x)
    target = _labels(target, x.shape[0])
    streams = streams or KeyedStream(key_from_seed(0))
    ids = np.broadcast_to(np.asarray(stream, dtype=np.uint64), (x.shape[0],))
    xt, ctx = defense.sample_transform(x, streams, ids)
    return defense.transform_vjp(_target_grad(model, xt, target, objective), ctx)


def eot_gradient(defense, model, x, target, M=30, streams=None, stream=0, objective="prob"):
    """Mean BPDA gradient over ``M`` independent transformation draws (fixed-order sum)."""
    if M < 1:
        raise ParameterError("M must be >= 1")
    x = _batch(x)
    n = x.shape[0]
    target = _labels(target, n)
    streams = streams or KeyedStream(key_from_seed(0))
    base = np.broadcast_to(np.asarray(stream, dtype=np.uint64), (n,))
    draws = 1 if not getattr(defense, "randomized", True) else int(M)
    xs = np.repeat(x, draws, axis=0)
    ids = np.array([stream_id(int(s), j) for s in base for j in range(draws)], dtype=np.uint64)
    xt, ctx = defense.sample_transform(xs, streams, ids)
    g = defense.transform_vjp(_target_grad(model, xt, np.repeat(target, draws), objective), ctx)
    return g.reshape((n, draws) + x.shape[1:]).mean(axis=1)


def whitebox_attack_loop(model, defense, x, target, iters=100, step=0.02, M=30, E=10, eps=1.0,
                         key=None, seed=0, stop_at=None, objective="prob"):
    """Signed gradient ascent on the target probability through BPDA + EOT.

    Records per iteration the defended target probability averaged over ``E``
    fresh draws, and the normalized L2 distortion ``d2 / sqrt(D)``.
    With ``stop_at`` a sample is frozen once its mean probability reaches that
    level (its trace carries the last values forward) and the loop ends when
    every sample is frozen.
    """
    x = _batch(x)
    n = x.shape[0]
    target = _labels(target, n)
    streams = KeyedStream(key if key is not None else key_from_seed(("whitebox", seed)))
    dim = np.sqrt(x[0].size)
    lo, hi = np.clip(x - eps, 0, 1), np.clip(x + eps, 0, 1)
    prob_trace = np.zeros((int(iters) + 1, n))
    l2_trace = np.zeros((int(iters) + 1, n))

    def measure(z, k, idx):
        draws = E if getattr(defense, "randomized", True) else 1
        acc = np.zeros(len(idx))
        for e in range(draws):
            ids = np.array([stream_id(seed, "est", k, i, e) for i in idx], dtype=np.uint64)
            acc += defense.probs(model, z[idx], streams, ids)[np.arange(len(idx)), target[idx]]
        return acc / draws

    z = x.copy()
    active = np.arange(n)
    prob_trace[0] = measure(z, 0, active)
    if stop_at is not None:
        active = active[prob_trace[0] < stop_at]
    done = int(iters)
    for k in range(1, int(iters) + 1):
        if len(active) == 0:
            done = k - 1
            break
        prob_trace[k] = prob_trace[k - 1]
        l2_trace[k] = l2_trace[k - 1]
        ids = np.array([stream_id(seed, "eot", k, i) for i in active], dtype=np.uint64)
        g = eot_gradient(defense, model, z[active], target[active], M, streams, ids, objective)
        z[active] = np.clip(z[active] + step * np.sign(g), lo[active], hi[active])
        prob_trace[k, active] = measure(z, k, active)
        l2_trace[k, active] = np.sqrt(((z[active] - x[active]) ** 2).reshape(len(active), -1).sum(axis=1)) / dim
        if stop_at is not None:
            active = active[prob_trace[k, active] < stop_at]
    trace = {"target_prob": prob_trace[:done + 1], "norm_l2": l2_trace[:done + 1]}
    labels = np.argmax(defense.probs(model, z, streams,
                                     np.array([stream_id(seed, "final", i) for i in range(n)], dtype=np.uint64)), axis=1)
    return AttackResult(x, z, target, labels, labels == target, np.full(n, done), trace)


def iterations_to_reach(trace, level):
    """First iteration at which each column of ``trace`` reaches ``level`` (inf if never)."""
    hit = trace >= level
    first = np.argmax(hit, axis=0).astype(float)
    first[~hit.any(axis=0)] = np.inf
    return first


# -- descriptor strings ----------------------------------------------------------------------

_ATTACK_OPTS = {
    "fgsm": {"eps": 0.3},
    "bim": {"eps": 0.3, "alpha": 0.05, "iters": 10},
    "jsma": {"budget": 40, "theta": 1.0},
    "deepfool": {"iters": 50, "overshoot": 0.02},
    "cw2": {"kappa": 0.0, "steps": 5, "iters": 200, "lr": 0.01},
    "whitebox": {"iters": 500, "M": 30, "E": 10, "step": 0.02, "eps": 1.0},
}
_MODES = ("untargeted", "next", "ll")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    mode: str
    options: dict

    def describe(self):
        opts = ":".join(f"{k}={v:g}" for k, v in sorted(self.options.items()))
        return f"{self.kind}:{self.mode}:{opts}"


def parse_attack(text):
    """Parse descriptors such as ``bim:eps=0.3:alpha=0.05:iters=10`` or ``cw2:ll:kappa=0``."""
    parts = text.strip().split(":")
    kind = parts[0]
    if kind not in _ATTACK_OPTS:
        raise ConfigError(f"unknown attack {kind!r}")
    opts = dict(_ATTACK_OPTS[kind])
    mode = {"jsma": "next", "cw2": "next", "whitebox": "random", "deepfool": "untargeted"}.get(kind, "untargeted")
    for p in parts[1:]:
        if p in _MODES:
            if kind == "deepfool" and p != "untargeted":
                raise ConfigError("deepfool is untargeted only")
            if kind in ("jsma", "cw2") and p == "untargeted":
                raise ConfigError(f"{kind} is targeted only")
            mode = p
        elif kind == "whitebox" and p in ("bpda", "eot", "bpda+eot"):
            if p == "bpda":
                opts["M"] = 1
        elif "=" in p:
            k, v = p.split("=", 1)
            if k not in opts:
                raise ConfigError(f"attack {kind} has no option {k!r}")
            try:
                opts[k] = float(v)
            except ValueError as exc:
                raise ConfigError(f"option {k} needs a number, got {v!r}") from exc
        else:
            raise ConfigError(f"cannot parse attack token {p!r}")
    return AttackSpec(kind, mode, opts)


def resolve_targets(model, spec, x, y):
    if spec.mode == "next":
        return target_next(y, model.num_classes)
    if spec.mode == "ll":
        return target_least_likely(model.predict_probs(x))
    return None


def run_attack(spec, model, x, y):
    """Run a parsed graybox attack against ``model`` (the undefended base)."""
    if isinstance(spec, str):
        spec = parse_attack(spec)
    o = spec.options
    t = resolve_targets(model, spec, x, y)
    if spec.kind == "fgsm":
        return fgsm(model, x, y if t is None else t, o["eps"], targeted=t is not None)
    if spec.kind == "bim":
        return bim(model, x, y if t is None else t, o["eps"], o["alpha"], int(o["iters"]), targeted=t is not None)
    if spec.kind == "jsma":
        return jsma(model, x, t, int(o["budget"]), o["theta"])
    if spec.kind == "deepfool":
        return deepfool(model, x, y, int(o["iters"]), o["overshoot"])
    if spec.kind == "cw2":
        return cw_l2(model, x, t, o["kappa"], int(o["steps"]), int(o["iters"]), o["lr"])
    raise ConfigError(f"attack {spec.kind} is not a graybox attack")
