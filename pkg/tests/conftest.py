import numpy as np
import pytest

from evadelab import Classifier, ModelSpec, TrainConfig, generate_synthetic, mlp_spec, train


@pytest.fixture(scope="session")
def synthetic():
    return generate_synthetic(4, 600, seed=1).split(480)


@pytest.fixture(scope="session")
def toy_model(synthetic):
    train_set, _ = synthetic
    return train(mlp_spec(train_set.image_shape, hidden=(32,), num_classes=4), train_set,
                 TrainConfig(learning_rate=0.1, epochs=15, batch_size=32, seed=0))


def linear_model(weights, bias, shape=None):
    """Classifier computing ``z = x . W + b`` on a flattened input."""
    weights = np.asarray(weights, dtype=np.float64)
    n, K = weights.shape
    shape = shape or (1, n, 1)
    spec = ModelSpec(({"kind": "flatten"}, {"kind": "dense", "units": K}), shape, K)
    return Classifier(spec, [weights, np.asarray(bias, dtype=np.float64)])


class TableClassifier:
    """Deterministic stand-in returning fixed probabilities per call (for interface tests)."""

    def __init__(self, fn, K, shape):
        self.fn = fn
        self.num_classes = K
        self.spec = ModelSpec(({"kind": "flatten"}, {"kind": "dense", "units": K}), shape, K)

    def predict_probs(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.fn(x) if x.ndim == 4 else self.fn(x[None])[0]

    def predict_label(self, x):
        return np.argmax(self.predict_probs(x), axis=-1)


# -- acceptance report -------------------------------------------------------------------

CRITERIA = {}  # number -> {"title", "outcomes", "notes"}


def note(n, text):
    """Attach a measured value to criterion ``n``'s summary line."""
    CRITERIA.setdefault(n, {"outcomes": [], "notes": []})["notes"].append(text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and not report.failed and not report.skipped):
        return
    entry = CRITERIA.setdefault(mark.args[0], {"outcomes": [], "notes": []})
    entry["title"] = mark.kwargs.get("title", "")
    entry["outcomes"].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        entry = CRITERIA[n]
        outcomes = entry["outcomes"]
        verdict = "PASS" if outcomes and all(o == "passed" for o in outcomes) else (
            "SKIP" if outcomes and all(o == "skipped" for o in outcomes) else "FAIL")
        detail = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {n:2d} {verdict}  {entry.get('title', '')}"
                                    + (f"  [{detail}]" if detail else ""))
