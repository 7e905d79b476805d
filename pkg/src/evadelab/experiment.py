"""Experiment grids, whitebox curves, result emission and configuration files."""

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import attacks as A
from . import defenses as D
from .data import generate_synthetic, load_mnist
from .errors import ConfigError, ParameterError
from .model import RandomizedClassifier, load_model, predict_label
from .prng import KeyedStream, key_from_seed, stream_id

log = logging.getLogger(__name__)

MNIST_DELTAS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
RESULT_KEYS = ("dataset", "defense", "delta", "attack", "adv_accuracy", "legit_accuracy", "reps", "std", "seconds")


def load_dataset(name, data_dir=None, seed=0):
    """``mnist`` or ``synthetic[:K=10][:n=2000][:side=8]``; returns (train, test)."""
    parts = name.split(":")
    if parts[0] == "mnist":
        return load_mnist(data_dir)
    if parts[0] == "synthetic":
        opts = {"K": 10, "n": 2000, "side": 8}
        for p in parts[1:]:
            k, _, v = p.partition("=")
            if k not in opts or not v.isdigit():
                raise ConfigError(f"bad synthetic dataset option {p!r}")
            opts[k] = int(v)
        data = generate_synthetic(opts["K"], opts["n"], seed, side=opts["side"])
        return data.split(int(opts["n"] * 0.8))
    raise ConfigError(f"unknown dataset {name!r}")


def worker_limit(requested=None):
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("EVADELAB_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"EVADELAB_WORKERS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


@dataclass
class ExperimentGrid:
    dataset: str = "mnist"
    model: str = ""
    defenses: tuple = ("median:3x3",)
    attacks: tuple = ("fgsm:next:eps=0.3",)
    deltas: tuple = MNIST_DELTAS
    reps: int = 200
    seed: int = 0
    legit_size: int = 1000
    adv_size: int = 100
    data_dir: str = ""
    timings: bool = False

    def __post_init__(self):
        self.defenses = tuple(self.defenses)
        self.attacks = tuple(self.attacks)
        self.deltas = tuple(float(d) for d in self.deltas)
        if int(self.reps) < 1:
            raise ConfigError("reps must be >= 1")
        if any(not 0.0 <= d <= 1.0 for d in self.deltas):
            raise ConfigError("delta values must lie in [0, 1]")
        if self.legit_size < 1 or self.adv_size < 1:
            raise ConfigError("sample counts must be positive")
        for d in self.defenses:
            D.parse_defense(d)
        for a in self.attacks:
            A.parse_attack(a)


@dataclass
class ResultRow:
    dataset: str
    defense: str
    delta: float
    attack: str
    adv_accuracy: float
    legit_accuracy: float
    reps: int
    std: float
    seconds: float = 0.0
    outcomes: dict = field(default_factory=dict, repr=False, compare=False)


def _cells(grid):
    cells = []
    for dname in grid.defenses:
        base = D.parse_defense(dname)
        variable = isinstance(base, (D.FeatureSqueezing, D.RandomizedSqueezing, D.RegionBased)) or type(base) is D.Defense
        deltas = grid.deltas if variable else (getattr(base, "delta", 0.0),)
        for delta in deltas:
            defense = D.with_delta(base, delta) if variable else base
            cells.append((dname, delta, defense))
    return cells


def _repeat_outcomes(model, defense, key, x, y, reps, tag):
    """Boolean R x n matrix: correct prediction per repetition and sample."""
    clf = RandomizedClassifier(model, defense, key)
    draws = reps if getattr(defense, "randomized", True) else 1
    out = np.empty((draws, len(y)), dtype=bool)
    for r in range(draws):
        ids = np.array([stream_id(*tag, r, i) for i in range(len(y))], dtype=np.uint64)
        out[r] = predict_label(clf, x, ids) == y
    if draws < reps:
        out = np.repeat(out, reps, axis=0)
    return out


def _pick_clean(model, data, n):
    """First ``n`` samples the base model classifies correctly."""
    ok = np.flatnonzero(predict_label(model, data.images) == data.labels)
    if len(ok) < n:
        log.warning("only %d correctly classified samples available (wanted %d)", len(ok), n)
    return data.subset(ok[:n])


def run_grid(grid, model=None, test=None, workers=None):
    """Evaluate every (defense, delta, attack) cell; rows come back in cell order."""
    if model is None:
        model = load_model(grid.model)
    if test is None:
        test = load_dataset(grid.dataset, grid.data_dir or None, grid.seed)[1]
    key = key_from_seed(("grid", grid.seed))
    legit = test.head(grid.legit_size)
    clean = _pick_clean(model, test, grid.adv_size)
    adversarial = {}
    for a in grid.attacks:
        try:
            adversarial[a] = A.run_attack(a, model, clean.images, clean.labels).x_adv
        except Exception as exc:  # a failing attack is recorded, the grid continues
            log.error("attack %s failed: %s", a, exc)
            adversarial[a] = exc
    cells = _cells(grid)

    def evaluate(ci):
        dname, delta, defense = cells[ci]
        t0 = time.perf_counter()
        try:
            legit_out = _repeat_outcomes(model, defense, key, legit.images, legit.labels, grid.reps,
                                         (grid.seed, ci, "legit"))
        except Exception as exc:
            log.error("cell %s delta=%g failed: %s", dname, delta, exc)
            return []
        rows = []
        for ai, a in enumerate(grid.attacks):
            if isinstance(adversarial[a], Exception):
                continue
            try:
                adv_out = _repeat_outcomes(model, defense, key, adversarial[a], clean.labels, grid.reps,
                                           (grid.seed, ci, ai))
            except Exception as exc:
                log.error("cell %s delta=%g attack %s failed: %s", dname, delta, a, exc)
                continue
            per_rep = adv_out.mean(axis=1)
            rows.append(ResultRow(grid.dataset, dname, delta, a, float(adv_out.mean()), float(legit_out.mean()),
                                  grid.reps, float(per_rep.std()) if grid.reps > 1 else 0.0,
                                  time.perf_counter() - t0, {"adv": adv_out, "legit": legit_out}))
        return rows

    n_workers = min(worker_limit(workers), max(len(cells), 1))
    if n_workers == 1:
        per_cell = [evaluate(i) for i in range(len(cells))]
    else:
        with ThreadPoolExecutor(n_workers) as pool:
            per_cell = list(pool.map(evaluate, range(len(cells))))
    rows = [r for cell in per_cell for r in cell]
    if not grid.timings:
        for r in rows:
            r.seconds = 0.0
    return rows


# -- whitebox curves -----------------------------------------------------------------------


def random_targets(labels, K, seed):
    """Uniform target labels different from the true ones."""
    u = KeyedStream(key_from_seed(("targets", seed))).integers(stream_id("targets"), len(labels), K - 1)
    return (np.asarray(labels) + 1 + u) % K


def run_whitebox_curves(model, data, defenses, iters=100, samples=100, seed=0, M=30, E=10, step=0.02,
                        eps=1.0, checkpoints=None):
    """Mean target probability against iteration and against normalized L2, per defense."""
    clean = _pick_clean(model, data, samples)
    targets = random_targets(clean.labels, model.num_classes, seed)
    series = []
    for desc in defenses:
        defense = D.parse_defense(desc) if isinstance(desc, str) else desc
        res = A.whitebox_attack_loop(model, defense, clean.images, targets, iters, step, M, E, eps, seed=seed)
        prob = res.trace["target_prob"].mean(axis=1)
        l2 = res.trace["norm_l2"].mean(axis=1)
        its = np.arange(len(prob)) if checkpoints is None else np.array([c for c in checkpoints if c < len(prob)])
        series.append({"defense": defense.describe(), "iteration": its.tolist(),
                       "target_prob": prob[its].tolist(), "norm_l2": l2[its].tolist()})
    return series


# -- emission ----------------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def rows_to_records(rows, timings=False):
    out = []
    for r in rows:
        rec = {}
        for k in RESULT_KEYS:
            v = getattr(r, k)
            if k == "seconds" and not timings:
                rec[k] = ""
            else:
                rec[k] = _fmt(v)
        out.append(rec)
    return out


def emit_results(rows, path=None, fmt="csv", timings=False):
    """Serialize result rows (CSV or JSON); returns the text and writes it when ``path`` is given."""
    records = rows_to_records(rows, timings)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=RESULT_KEYS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(records)
        text = buf.getvalue()
    elif fmt == "json":
        numeric = [{k: (v if k in ("dataset", "defense", "attack") or v == "" else _num(v)) for k, v in rec.items()}
                   for rec in records]
        text = json.dumps(numeric, indent=1) + "\n"
    else:
        raise ConfigError(f"unknown output format {fmt!r}")
    if path:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    return text


def _num(text):
    v = float(text)
    return int(v) if v.is_integer() and "." not in text and "e" not in text else v


def emit_outcomes(rows, path):
    """Per-sample outcome log: one line per (row, set, sample) with the repetition bits in hex."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("row,set,sample,reps,correct,bits\n")
        for ri, r in enumerate(rows):
            for name in ("adv", "legit"):
                m = r.outcomes.get(name)
                if m is None:
                    continue
                for i in range(m.shape[1]):
                    bits = np.packbits(m[:, i]).tobytes().hex()
                    f.write(f"{ri},{name},{i},{m.shape[0]},{int(m[:, i].sum())},{bits}\n")


def accuracy_from_outcomes(path, row, which="adv"):
    total = correct = 0
    with open(path, encoding="utf-8") as f:
        for rec in csv.DictReader(f):
            if int(rec["row"]) == row and rec["set"] == which:
                total += int(rec["reps"])
                correct += int(rec["correct"])
    return correct / total


def emit_curves(series, path=None):
    text = json.dumps([{k: ([float(_fmt(x)) for x in v] if isinstance(v, list) else v) for k, v in s.items()}
                       for s in series], indent=1) + "\n"
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    return text


# -- configuration files -------------------------------------------------------------------------

_LIST_KEYS = {"defenses", "attacks", "deltas"}


def parse_config(text):
    """Flat ``key = value`` lines (``#`` comments); list values are comma separated."""
    names = {f.name: f for f in fields(ExperimentGrid)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in names:
            raise ConfigError(f"line {lineno}: unknown key {k!r}")
        try:
            if k in _LIST_KEYS:
                items = [s.strip() for s in v.split(",") if s.strip()]
                values[k] = tuple(float(s) for s in items) if k == "deltas" else tuple(items)
            elif k in ("reps", "seed", "legit_size", "adv_size"):
                values[k] = int(v)
            elif k == "timings":
                values[k] = v.lower() in ("1", "true", "yes")
            else:
                values[k] = v
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {k}: {v!r}") from exc
    try:
        return ExperimentGrid(**values)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path):
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())
