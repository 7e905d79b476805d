"""Executable evasion game with Classify and Attack oracles, plus scoring tools."""

import json
import math
from dataclasses import dataclass

import numpy as np

from .attacks import L0_TOLERANCE
from .errors import GameClosedError, ParameterError, UsageError
from .model import RandomizedClassifier, predict_label
from .prng import stream_id

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data):
    h = FNV_OFFSET
    for byte in bytes(data):
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def digest(*arrays):
    """FNV-1a 64 over the little-endian float64 bytes of the arrays, as 16 hex digits."""
    raw = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return f"{fnv1a64(raw):016x}"


def distance(x, x_adv, p):
    """L0 (count above 1e-12), L2 or L-infinity distance between two images."""
    diff = np.abs(np.asarray(x_adv, dtype=np.float64) - np.asarray(x, dtype=np.float64)).reshape(-1)
    if p == 0:
        return float(np.count_nonzero(diff > L0_TOLERANCE))
    if p == 2:
        return float(np.sqrt(np.sum(diff * diff)))
    if p in (np.inf, "inf"):
        return float(diff.max()) if diff.size else 0.0
    raise ParameterError(f"unsupported metric p={p!r}; use 0, 2 or inf")


class EvCsaGame:
    """State of one game: quota ``N``, counters ``q`` and ``n``, and the adversarial set.

    Starting samples are identified by their index into the benign set.
    Every classifier invocation draws fresh randomness from ``stream_base``
    and a call counter, so a game is reproducible given its classifier key.
    """

    def __init__(self, classifier, benign, eps, N, p=np.inf, targeted=True, stream_base=0):
        images = benign.images if hasattr(benign, "images") else np.asarray(benign, dtype=np.float64)
        if not 1 <= N <= len(images):
            raise ParameterError(f"quota N must satisfy 1 <= N <= {len(images)}, got {N}")
        if eps < 0:
            raise ParameterError("eps must be non-negative")
        distance(images[0], images[0], p)
        self.classifier = classifier
        self.images = images
        self.eps = float(eps)
        self.N = int(N)
        self.p = p
        self.targeted = bool(targeted)
        self.stream_base = stream_base
        self.q = 0
        self.n = 0
        self.adversarial = {}
        self.finished = False
        self._calls = 0
        self.transcript = [{"call": "setup", "N": self.N, "eps": self.eps, "p": _p_name(p),
                            "mode": "targeted" if targeted else "untargeted", "q": 0, "n": 0}]

    def _classify(self, x):
        self._calls += 1
        s = stream_id(self.stream_base, self._calls)
        if isinstance(self.classifier, RandomizedClassifier):
            return int(self.classifier.predict_label(x, s))
        return int(predict_label(self.classifier, x))

    def _check_open(self):
        if self.finished:
            raise GameClosedError("the game has finished; no further oracle calls are accepted")

    def classify(self, x):
        """Classify oracle: one classifier invocation."""
        self._check_open()
        y = self._classify(x)
        self.transcript.append({"call": "classify", "digest": digest(x), "verdict": "label", "label": y,
                                "q": self.q, "n": self.n})
        return y

    def attack(self, start, x_adv, target=None):
        """Attack oracle for the starting sample with index ``start``.

        Returns the verdict: ``stale`` (already used; quota untouched),
        ``success``, ``fail_label`` or ``fail_budget``.
        """
        self._check_open()
        start = int(start)
        if not 0 <= start < len(self.images):
            raise ParameterError(f"starting sample {start} is not in the benign set")
        if self.targeted and target is None:
            raise UsageError("targeted game needs a target label")
        x = self.images[start]
        x_adv = np.asarray(x_adv, dtype=np.float64)
        if x_adv.shape != x.shape:
            raise ParameterError(f"adversarial sample shape {x_adv.shape} does not match {x.shape}")
        rec = {"call": "attack", "digest": digest(x, x_adv), "start": start}
        if start in self.adversarial:
            rec.update(verdict="stale", q=self.q, n=self.n)
            self.transcript.append(rec)
            return "stale"
        self.q += 1
        self.adversarial[start] = x_adv
        d = distance(x, x_adv, self.p)
        y_adv = self._classify(x_adv)
        if self.targeted:
            label_ok = y_adv == int(target)
            rec["target"] = int(target)
        else:
            label_ok = y_adv != self._classify(x)
        within = d <= self.eps
        verdict = "success" if (label_ok and within) else ("fail_label" if not label_ok else "fail_budget")
        if verdict == "success":
            self.n += 1
        rec.update(verdict=verdict, label=y_adv, label_ok=bool(label_ok), distance=d, q=self.q, n=self.n)
        self.transcript.append(rec)
        if self.q >= self.N:
            self.finished = True
        return verdict

    def finish(self):
        """Close the game and return ``(n / N, transcript)``."""
        if not self.finished:
            self.finished = True
        if self.transcript[-1]["call"] != "finish":
            self.transcript.append({"call": "finish", "verdict": "rate", "rate": self.n / self.N,
                                    "q": self.q, "n": self.n})
        return self.n / self.N, list(self.transcript)

    @property
    def success_rate(self):
        return self.n / self.N


def _p_name(p):
    return "inf" if p in (np.inf, "inf") else int(p)


def transcript_to_jsonl(transcript):
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in transcript)


def transcript_from_jsonl(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


@dataclass(frozen=True)
class Replay:
    q: int
    n: int
    N: int

    @property
    def rate(self):
        return self.n / self.N


def replay(transcript, eps=None):
    """Recompute (q, n, N) from the verdicts; ``eps`` re-scores the submissions at a new budget."""
    setup = transcript[0]
    if setup.get("call") != "setup":
        raise ParameterError("transcript must start with a setup record")
    N = int(setup["N"])
    q = n = 0
    seen = set()
    for rec in transcript[1:]:
        if rec["call"] != "attack" or rec["verdict"] == "stale":
            continue
        if rec["start"] in seen:
            raise UsageError(f"transcript reuses starting sample {rec['start']}")
        seen.add(rec["start"])
        q += 1
        if eps is None:
            n += rec["verdict"] == "success"
        else:
            n += bool(rec["label_ok"]) and rec["distance"] <= eps
    if q > N:
        raise UsageError(f"transcript counts {q} submissions for quota {N}")
    return Replay(q, n, N)


# -- repeated games and comparisons --------------------------------------------------------


def scripted_attacker(samples, targets=None):
    """Attacker submitting precomputed ``(start index, x_adv)`` pairs in order."""

    def play(game):
        for j, (start, x_adv) in enumerate(samples):
            if game.finished:
                break
            game.attack(start, x_adv, None if targets is None else targets[j])

    return play


@dataclass
class GameStats:
    rates: np.ndarray

    @property
    def mean(self):
        return float(self.rates.mean())

    @property
    def std(self):
        return float(self.rates.std()) if len(self.rates) > 1 else 0.0


def run_game(attacker, classifier, benign, eps, N, repetitions=1, p=np.inf, targeted=True, seed=0):
    """Play ``repetitions`` independent games; classifier randomness differs per game."""
    if repetitions < 1:
        raise ParameterError("repetitions must be >= 1")
    rates = np.empty(repetitions)
    for r in range(repetitions):
        game = EvCsaGame(classifier, benign, eps, N, p, targeted, stream_base=stream_id("game", seed, r))
        attacker(game)
        rates[r] = game.finish()[0]
    return GameStats(rates)


@dataclass
class ComparisonRow:
    eps: float
    sr_base: float
    sr_defended: float
    eps_defended: float  # smallest grid eps at which the defended rate reaches sr_base (inf if none)
    effective: bool


def robustness_compare(sr_base, sr_defended, eps_grid, factor=2.0):
    """Flag the defense effective per eps; rates are callables ``eps -> success rate``.

    Effective at ``eps`` when the defended rate is at most ``1/factor`` of the
    base rate, or when the defended classifier needs ``factor`` times the budget
    to reach the base rate. Zero base rates and ``eps = 0`` are never flagged.
    """
    grid = sorted(float(e) for e in eps_grid)
    base = {e: float(sr_base(e)) for e in grid}
    defended = {e: float(sr_defended(e)) for e in grid}
    rows = []
    for e in grid:
        reach = [ed for ed in grid if defended[ed] >= base[e]]
        eps_d = reach[0] if reach else math.inf
        by_rate = base[e] > 0 and defended[e] <= base[e] / factor
        if reach:
            by_budget = e > 0 and base[e] > 0 and eps_d >= factor * e
        else:
            by_budget = e > 0 and base[e] > 0 and grid[-1] >= factor * e
        rows.append(ComparisonRow(e, base[e], defended[e], eps_d, bool(by_rate or by_budget)))
    return rows


def game_rate_fn(attacker_for_eps, classifier, benign, N, repetitions=1, p=np.inf, targeted=True, seed=0):
    """Adapter turning an attacker family into ``eps -> mean success rate``."""

    def rate(eps):
        return run_game(attacker_for_eps(eps), classifier, benign, eps, N, repetitions, p, targeted, seed).mean

    return rate


def unpredictability_matrix(adversarial_sets, classifier, repetitions=200, seed=0):
    """Rows = attacks, columns = samples; entry = misclassification frequency over R draws.

    ``adversarial_sets`` maps an attack name to ``(images, true_labels)``.
    """
    names = list(adversarial_sets)
    width = max(len(adversarial_sets[a][1]) for a in names) if names else 0
    out = np.full((len(names), width), np.nan)
    for row, name in enumerate(names):
        images, labels = adversarial_sets[name]
        labels = np.asarray(labels)
        wrong = np.zeros(len(labels))
        for r in range(repetitions):
            ids = np.array([stream_id("unpred", seed, row, r, i) for i in range(len(labels))], dtype=np.uint64)
            wrong += predict_label(classifier, images, ids) != labels
        out[row, :len(labels)] = wrong / repetitions
    return names, out
