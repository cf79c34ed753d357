"""Deterministic base classifiers f: R^d -> {0, ..., K-1}.

Built-in kinds are a halfspace, an axis-aligned grid table (d <= 2), a small
rectifier MLP, and an external process speaking a newline-delimited text
protocol. All of them are immutable after construction; the external one
serialises access to its connection.
"""

from __future__ import annotations

import json
import os
import queue
import socket
import subprocess
import threading
from pathlib import Path

import numpy as np

__all__ = [
    "ClassifierError",
    "DimensionMismatchError",
    "ClassifierUnavailableError",
    "BaseClassifier",
    "HalfspaceClassifier",
    "GridTableClassifier",
    "MlpClassifier",
    "ConstantClassifier",
    "ExternalClassifier",
    "classify",
    "classify_batch",
    "external_classify_batch",
    "model_from_dict",
    "load_model",
    "save_model",
]


class ClassifierError(RuntimeError):
    pass


class DimensionMismatchError(ClassifierError, ValueError):
    pass


class ClassifierUnavailableError(ClassifierError):
    """The external process died, timed out or sent a malformed reply."""


def _dense(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    # einsum without BLAS: each output row depends only on its input row, so
    # batch and per-point evaluation agree bit for bit.
    return np.einsum("ni,oi->no", x, weight) + bias


class BaseClassifier:
    """Common surface: ``dim``, ``num_classes`` and ``classify_batch``."""

    dim: int
    num_classes: int

    def _labels(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _check(self, xs) -> np.ndarray:
        x = np.asarray(xs, dtype=float)
        if x.ndim == 1:
            x = x[None, :] if x.size else x.reshape(0, self.dim)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionMismatchError(
                f"expected inputs of dimension {self.dim}, got shape {np.shape(xs)}"
            )
        if not np.all(np.isfinite(x)):
            raise ValueError("inputs must be finite")
        return x

    def classify_batch(self, xs) -> np.ndarray:
        x = self._check(xs)
        if len(x) == 0:
            return np.zeros(0, dtype=np.int64)
        return self._labels(x).astype(np.int64, copy=False)

    def classify(self, x) -> int:
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise DimensionMismatchError(f"classify expects a single vector, got shape {x.shape}")
        return int(self.classify_batch(x[None, :])[0])

    def to_dict(self) -> dict:
        raise NotImplementedError


class HalfspaceClassifier(BaseClassifier):
    """Class 1 where ``w . x + b > 0``, class 0 elsewhere."""

    num_classes = 2

    def __init__(self, weight, bias: float = 0.0):
        w = np.array(weight, dtype=float).reshape(-1)
        if w.size < 1 or not np.all(np.isfinite(w)) or not np.linalg.norm(w) > 0:
            raise ValueError("halfspace weight must be a finite, nonzero vector")
        self.weight = w
        self.weight.setflags(write=False)
        self.bias = float(bias)
        self.dim = w.size

    def margin(self, xs) -> np.ndarray:
        x = self._check(xs)
        return np.einsum("ni,i->n", x, self.weight) + self.bias

    def _labels(self, x):
        return (np.einsum("ni,i->n", x, self.weight) + self.bias > 0).astype(np.int64)

    def to_dict(self):
        return {"kind": "halfspace", "weight": self.weight.tolist(), "bias": self.bias}


class GridTableClassifier(BaseClassifier):
    """Piecewise-constant labels over an axis-aligned grid in one or two
    dimensions. ``boundaries[a]`` are the strictly increasing cut points along
    axis ``a``; ``labels`` has one entry per cell (shape ``len(b0)+1`` in 1D,
    ``(len(b0)+1, len(b1)+1)`` in 2D)."""

    def __init__(self, boundaries, labels, num_classes: int | None = None):
        if len(boundaries) and np.ndim(boundaries[0]) == 0:
            boundaries = [boundaries]
        bounds = [np.array(b, dtype=float).reshape(-1) for b in boundaries]
        if not 1 <= len(bounds) <= 2:
            raise ValueError("grid tables support one or two dimensions")
        for b in bounds:
            if not np.all(np.isfinite(b)) or np.any(np.diff(b) <= 0):
                raise ValueError("grid boundaries must be finite and strictly increasing")
            b.setflags(write=False)
        table = np.array(labels, dtype=np.int64)
        shape = tuple(len(b) + 1 for b in bounds)
        if table.shape != shape:
            raise ValueError(f"label table shape {table.shape} does not match cells {shape}")
        if np.any(table < 0):
            raise ValueError("labels must be nonnegative")
        k = int(table.max()) + 1
        if num_classes is None:
            num_classes = max(k, 2)
        if num_classes < k or num_classes < 2:
            raise ValueError("num_classes too small for the label table")
        table.setflags(write=False)
        self.boundaries = bounds
        self.labels = table
        self.dim = len(bounds)
        self.num_classes = int(num_classes)

    def cell_index(self, xs) -> tuple:
        x = self._check(xs)
        return tuple(np.searchsorted(b, x[:, a], side="right") for a, b in enumerate(self.boundaries))

    def _labels(self, x):
        idx = tuple(np.searchsorted(b, x[:, a], side="right") for a, b in enumerate(self.boundaries))
        return self.labels[idx]

    def to_dict(self):
        return {
            "kind": "grid",
            "boundaries": [b.tolist() for b in self.boundaries],
            "labels": self.labels.tolist(),
            "num_classes": self.num_classes,
        }


class ConstantClassifier(BaseClassifier):
    """Always returns the same label."""

    def __init__(self, label: int, dim: int, num_classes: int):
        if not 0 <= label < num_classes:
            raise ValueError("label out of range")
        self.label = int(label)
        self.dim = int(dim)
        self.num_classes = int(num_classes)

    def _labels(self, x):
        return np.full(len(x), self.label, dtype=np.int64)

    def to_dict(self):
        return {"kind": "constant", "label": self.label, "dim": self.dim, "num_classes": self.num_classes}


class MlpClassifier(BaseClassifier):
    """Feedforward network with rectifier hidden layers; the label is the
    argmax of the output logits (lowest index on ties).

    ``layers`` is a list of ``(weight, bias)`` with ``weight`` shaped
    ``(out, in)``.
    """

    def __init__(self, layers):
        params = []
        for w, b in layers:
            w = np.array(w, dtype=float)
            b = np.array(b, dtype=float).reshape(-1)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError("each layer needs weight (out, in) and bias (out,)")
            params.append((w, b))
        if not params:
            raise ValueError("an MLP needs at least one layer")
        for (w0, _), (w1, _) in zip(params, params[1:]):
            if w1.shape[1] != w0.shape[0]:
                raise ValueError("layer dimensions do not chain")
        for w, b in params:
            w.setflags(write=False)
            b.setflags(write=False)
        self.layers = params
        self.dim = params[0][0].shape[1]
        self.num_classes = params[-1][0].shape[0]
        if self.num_classes < 2:
            raise ValueError("an MLP classifier needs at least two outputs")

    @classmethod
    def initialize(cls, sizes, seed: int) -> "MlpClassifier":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        rng = np.random.default_rng(seed)
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            layers.append((rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)))
        return cls(layers)

    def logits(self, xs) -> np.ndarray:
        h = self._check(xs)
        for i, (w, b) in enumerate(self.layers):
            h = _dense(h, w, b)
            if i < len(self.layers) - 1:
                h = np.maximum(h, 0.0)
        return h

    def _labels(self, x):
        return np.argmax(self.logits(x), axis=1)

    def to_dict(self):
        return {
            "kind": "mlp",
            "layers": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in self.layers],
        }


class _LineChannel:
    """Line-oriented text channel with a background reader for timeouts."""

    def __init__(self, reader, writer, closer):
        self._writer = writer
        self._closer = closer
        self._lines: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._pump, args=(reader,), daemon=True)
        self._thread.start()

    def _pump(self, reader):
        try:
            for line in reader:
                self._lines.put(line)
        except (OSError, ValueError):
            pass
        self._lines.put(None)

    def send(self, text: str):
        try:
            self._writer.write(text)
            self._writer.flush()
        except (OSError, ValueError) as exc:
            raise ClassifierUnavailableError(f"write to external classifier failed: {exc}") from exc

    def recv(self, timeout: float) -> str:
        try:
            line = self._lines.get(timeout=timeout)
        except queue.Empty:
            raise ClassifierUnavailableError(f"external classifier timed out after {timeout}s") from None
        if line is None:
            self._lines.put(None)
            raise ClassifierUnavailableError("external classifier closed its output")
        return line.rstrip("\r\n")

    def close(self):
        self._closer()


class ExternalClassifier(BaseClassifier):
    """Base classifier served by a child process or a TCP peer.

    Wire protocol (UTF-8, one message per line): the engine sends
    ``HELLO d K`` and expects ``READY``; each request is ``CLASSIFY n``
    followed by ``n`` lines of ``d`` space-separated floats, answered by ``n``
    lines holding one class index each.
    """

    def __init__(self, dim: int, num_classes: int, command=None, host=None, port=None,
                 timeout: float = 60.0, cwd=None):
        if (command is None) == (host is None):
            raise ValueError("give exactly one of command or host/port")
        self.dim = int(dim)
        self.num_classes = int(num_classes)
        self.timeout = float(timeout)
        self.command = list(command) if command is not None else None
        self.host, self.port = host, port
        self._cwd = cwd
        self._lock = threading.Lock()
        self._channel = None
        self._proc = None

    def _connect(self):
        if self.command is not None:
            try:
                self._proc = subprocess.Popen(
                    self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                    text=True, encoding="utf-8", bufsize=1, cwd=self._cwd,
                )
            except OSError as exc:
                raise ClassifierUnavailableError(f"cannot start {self.command!r}: {exc}") from exc
            proc = self._proc

            def closer():
                # stop the peer before closing stdout, which the reader thread may hold
                try:
                    proc.stdin.close()
                except OSError:
                    pass
                try:
                    proc.wait(timeout=2)
                except subprocess.TimeoutExpired:
                    proc.kill()
                    proc.wait()
                try:
                    proc.stdout.close()
                except OSError:
                    pass

            channel = _LineChannel(proc.stdout, proc.stdin, closer)
        else:
            try:
                sock = socket.create_connection((self.host, int(self.port)), timeout=self.timeout)
            except OSError as exc:
                raise ClassifierUnavailableError(f"cannot connect to {self.host}:{self.port}: {exc}") from exc
            sock.settimeout(None)
            rfile = sock.makefile("r", encoding="utf-8", newline="\n")
            wfile = sock.makefile("w", encoding="utf-8", newline="\n")

            def closer():
                try:
                    sock.shutdown(socket.SHUT_RDWR)  # wakes the blocked reader
                except OSError:
                    pass
                for f in (wfile, rfile):
                    try:
                        f.close()
                    except OSError:
                        pass
                sock.close()

            channel = _LineChannel(rfile, wfile, closer)
        channel.send(f"HELLO {self.dim} {self.num_classes}\n")
        reply = channel.recv(self.timeout)
        if reply.strip() != "READY":
            channel.close()
            raise ClassifierUnavailableError(f"bad handshake reply {reply!r}")
        self._channel = channel

    def _labels(self, x):
        with self._lock:
            if self._channel is None:
                self._connect()
            try:
                return self._request(x)
            except ClassifierUnavailableError:
                self._shutdown()
                raise

    def _request(self, x):
        rows = "\n".join(" ".join(repr(float(v)) for v in row) for row in x)
        self._channel.send(f"CLASSIFY {len(x)}\n{rows}\n")
        out = np.empty(len(x), dtype=np.int64)
        for i in range(len(x)):
            line = self._channel.recv(self.timeout).strip()
            try:
                label = int(line)
            except ValueError:
                raise ClassifierUnavailableError(f"malformed response line {line!r}") from None
            if not 0 <= label < self.num_classes:
                raise ClassifierUnavailableError(f"class index {label} out of range")
            out[i] = label
        return out

    def _shutdown(self):
        if self._channel is not None:
            self._channel.close()
            self._channel = None

    def close(self):
        with self._lock:
            self._shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def to_dict(self):
        d = {"kind": "external", "dim": self.dim, "num_classes": self.num_classes, "timeout": self.timeout}
        if self.command is not None:
            d["command"] = self.command
        else:
            d["host"], d["port"] = self.host, self.port
        return d


def classify(model: BaseClassifier, x) -> int:
    return model.classify(x)


def classify_batch(model: BaseClassifier, xs) -> list[int]:
    return model.classify_batch(xs).tolist()


def external_classify_batch(endpoint: ExternalClassifier, xs) -> list[int]:
    return endpoint.classify_batch(xs).tolist()


def model_from_dict(spec: dict, base_dir=None) -> BaseClassifier:
    kind = spec.get("kind")
    if kind == "halfspace":
        return HalfspaceClassifier(spec["weight"], spec.get("bias", 0.0))
    if kind == "grid":
        return GridTableClassifier(spec["boundaries"], spec["labels"], spec.get("num_classes"))
    if kind == "mlp":
        return MlpClassifier([(layer["weight"], layer["bias"]) for layer in spec["layers"]])
    if kind == "constant":
        return ConstantClassifier(spec["label"], spec["dim"], spec["num_classes"])
    if kind == "external":
        cwd = spec.get("cwd", base_dir)
        return ExternalClassifier(
            spec["dim"], spec["num_classes"], command=spec.get("command"),
            host=spec.get("host"), port=spec.get("port"),
            timeout=spec.get("timeout", 60.0), cwd=cwd,
        )
    raise ValueError(f"unknown model kind {kind!r}")


def load_model(path) -> BaseClassifier:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        spec = json.load(fh)
    return model_from_dict(spec, base_dir=os.fspath(path.parent))


def save_model(model: BaseClassifier, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh)
        fh.write("\n")
