import json
import sys
import textwrap
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dualsmooth.classifiers import (
    ClassifierUnavailableError,
    ConstantClassifier,
    DimensionMismatchError,
    ExternalClassifier,
    GridTableClassifier,
    HalfspaceClassifier,
    MlpClassifier,
    classify,
    classify_batch,
    external_classify_batch,
    load_model,
    model_from_dict,
    save_model,
)


def _models():
    return [
        HalfspaceClassifier([1.0, -2.0], 0.3),
        GridTableClassifier([[-1.0, 0.5], [0.0]], [[0, 1], [2, 0], [1, 1]], num_classes=3),
        MlpClassifier.initialize([2, 8, 8, 3], seed=5),
        ConstantClassifier(1, 2, 3),
    ]


class TestHalfspace:
    def test_sides(self):
        h = HalfspaceClassifier([1.0, 0.0], 0.0)
        assert classify(h, [0.5, 0.0]) == 1
        assert classify(h, [-0.5, 0.0]) == 0

    def test_zero_weight(self):
        with pytest.raises(ValueError):
            HalfspaceClassifier([0.0, 0.0])


class TestGrid:
    def test_1d_lookup(self):
        g = GridTableClassifier([0.0], [0, 1])
        assert classify(g, [3.2]) == 1
        assert classify(g, [-3.2]) == 0

    def test_2d_cells(self):
        g = GridTableClassifier([[0.0], [0.0]], [[0, 1], [2, 3]])
        assert classify_batch(g, [[-1, -1], [-1, 1], [1, -1], [1, 1]]) == [0, 1, 2, 3]

    @pytest.mark.parametrize("bounds,labels", [
        ([1.0, 0.0], [0, 1, 0]),            # not increasing
        ([0.0], [0, 1, 1]),                  # wrong label count
        ([[0.0], [0.0], [0.0]], np.zeros((2, 2, 2), int)),  # d > 2
    ])
    def test_invalid(self, bounds, labels):
        with pytest.raises(ValueError):
            GridTableClassifier(bounds, labels)


class TestMlp:
    def test_forward_is_relu_net(self):
        w1, b1 = np.array([[1.0, -1.0], [0.5, 2.0]]), np.array([0.0, -1.0])
        w2, b2 = np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0.0, 0.0])
        net = MlpClassifier([(w1, b1), (w2, b2)])
        x = np.array([[2.0, 1.0], [0.0, 1.0]])
        h = np.maximum(x @ w1.T + b1, 0)
        np.testing.assert_allclose(net.logits(x), h @ w2.T + b2)
        assert classify_batch(net, x) == np.argmax(h @ w2.T + b2, axis=1).tolist() == [1, 1]

    def test_tie_goes_to_lowest_index(self):
        net = MlpClassifier([(np.zeros((3, 2)), np.zeros(3))])
        assert classify(net, [1.0, 2.0]) == 0

    def test_bad_chain(self):
        with pytest.raises(ValueError):
            MlpClassifier([(np.zeros((4, 2)), np.zeros(4)), (np.zeros((3, 5)), np.zeros(3))])

    def test_init_is_seeded(self):
        a = MlpClassifier.initialize([2, 4, 3], 1).to_dict()
        assert a == MlpClassifier.initialize([2, 4, 3], 1).to_dict()
        assert a != MlpClassifier.initialize([2, 4, 3], 2).to_dict()


@pytest.mark.parametrize("model", _models(), ids=lambda m: type(m).__name__)
def test_dimension_mismatch(model):
    with pytest.raises(DimensionMismatchError):
        model.classify([1.0, 2.0, 3.0])


@pytest.mark.parametrize("model", _models(), ids=lambda m: type(m).__name__)
def test_empty_and_singleton(model):
    assert classify_batch(model, np.empty((0, 2))) == []
    assert classify_batch(model, [[0.3, -0.2]]) == [classify(model, [0.3, -0.2])]


@pytest.mark.parametrize("model", _models(), ids=lambda m: type(m).__name__)
def test_rejects_non_finite(model):
    with pytest.raises(ValueError):
        model.classify([np.nan, 0.0])


@pytest.mark.parametrize("model", _models(), ids=lambda m: type(m).__name__)
def test_batch_matches_serial(model):
    xs = np.random.default_rng(0).normal(size=(10_000, 2)) * 2
    batch = model.classify_batch(xs)
    serial = np.array([model.classify(x) for x in xs[:500]])
    assert np.array_equal(batch[:500], serial)
    assert np.array_equal(batch[5000:], model.classify_batch(xs[5000:]))


@pytest.mark.parametrize("model", _models(), ids=lambda m: type(m).__name__)
def test_pure_and_thread_safe(model):
    x = np.array([0.1, -0.7])
    first = model.classify(x)
    assert all(model.classify(x) == first for _ in range(10))
    xs = np.random.default_rng(1).normal(size=(2000, 2))
    expected = model.classify_batch(xs)
    results = [None] * 4

    def work(i):
        results[i] = model.classify_batch(xs)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(np.array_equal(r, expected) for r in results)


@settings(max_examples=50)
@given(hnp.arrays(float, (7, 2), elements=st.floats(-50, 50)))
def test_batch_serial_property(xs):
    for model in _models():
        assert classify_batch(model, xs) == [classify(model, x) for x in xs]


@pytest.mark.parametrize("model", _models(), ids=lambda m: type(m).__name__)
def test_json_round_trip(model, tmp_path):
    path = tmp_path / "m.json"
    save_model(model, path)
    loaded = load_model(path)
    xs = np.random.default_rng(2).normal(size=(300, 2)) * 3
    assert np.array_equal(loaded.classify_batch(xs), model.classify_batch(xs))


def test_unknown_kind():
    with pytest.raises(ValueError):
        model_from_dict({"kind": "svm"})


# --- external protocol -------------------------------------------------------

@pytest.fixture
def served_halfspace(tmp_path):
    path = tmp_path / "h.json"
    save_model(HalfspaceClassifier([1.0, 1.0], -0.5), path)
    return path


def test_external_subprocess(served_halfspace):
    local = load_model(served_halfspace)
    xs = np.random.default_rng(3).normal(size=(257, 2))
    with ExternalClassifier(2, 2, command=[sys.executable, "-m", "dualsmooth.serve", str(served_halfspace)],
                            timeout=30) as ext:
        assert external_classify_batch(ext, xs) == classify_batch(local, xs)
        assert ext.classify(xs[0]) == local.classify(xs[0])


def test_external_tcp(served_halfspace):
    import subprocess

    proc = subprocess.Popen([sys.executable, "-m", "dualsmooth.serve", str(served_halfspace), "--port", "0"],
                            stdout=subprocess.PIPE, text=True)
    try:
        port = int(proc.stdout.readline())
        xs = np.random.default_rng(4).normal(size=(64, 2))
        spec = {"kind": "external", "dim": 2, "num_classes": 2, "host": "127.0.0.1", "port": port}
        ext = model_from_dict(spec)
        try:
            assert ext.classify_batch(xs).tolist() == load_model(served_halfspace).classify_batch(xs).tolist()
        finally:
            ext.close()
    finally:
        proc.kill()
        proc.wait()


def _script(tmp_path, body):
    path = tmp_path / "peer.py"
    path.write_text(textwrap.dedent(body))
    return [sys.executable, str(path)]


@pytest.mark.parametrize("body", [
    # replies with garbage
    """
    import sys
    sys.stdin.readline(); print("READY", flush=True)
    sys.stdin.readline(); sys.stdin.readline(); print("banana", flush=True)
    """,
    # out-of-range class index
    """
    import sys
    sys.stdin.readline(); print("READY", flush=True)
    sys.stdin.readline(); sys.stdin.readline(); print("7", flush=True)
    """,
    # exits mid-request
    """
    import sys
    sys.stdin.readline(); print("READY", flush=True)
    sys.stdin.readline(); sys.exit(1)
    """,
    # bad handshake
    """
    import sys
    sys.stdin.readline(); print("NOPE", flush=True)
    """,
    # silent past the timeout
    """
    import sys, time
    sys.stdin.readline(); print("READY", flush=True)
    time.sleep(30)
    """,
], ids=["malformed", "out-of-range", "exit", "handshake", "timeout"])
def test_external_failures(tmp_path, body):
    ext = ExternalClassifier(2, 2, command=_script(tmp_path, body), timeout=1.0)
    with pytest.raises(ClassifierUnavailableError):
        ext.classify([0.0, 0.0])
    ext.close()


def test_external_missing_program():
    ext = ExternalClassifier(2, 2, command=["/nonexistent/program"], timeout=1.0)
    with pytest.raises(ClassifierUnavailableError):
        ext.classify([0.0, 0.0])


def test_external_needs_one_endpoint():
    with pytest.raises(ValueError):
        ExternalClassifier(2, 2)
    with pytest.raises(ValueError):
        ExternalClassifier(2, 2, command=["x"], host="h", port=1)


def test_external_model_file(tmp_path, served_halfspace):
    doc = {"kind": "external", "dim": 2, "num_classes": 2,
           "command": [sys.executable, "-m", "dualsmooth.serve", str(served_halfspace)]}
    (tmp_path / "ext.json").write_text(json.dumps(doc))
    ext = load_model(tmp_path / "ext.json")
    try:
        assert ext.classify([2.0, 2.0]) == 1
    finally:
        ext.close()
