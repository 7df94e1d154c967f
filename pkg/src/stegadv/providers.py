"""External classifier providers speaking the gradient-exchange framing.

A request is b"STGQ", u32 origin class, u32 adversarial class, then the
pixel-domain image as a raw tensor; the response is b"STGR", an f64 loss,
then the gradient tensor in pixel units. Providers come in two flavors: a
directory pair (request/response files, polled) and a subprocess speaking
the framing over its standard streams. Both expose the same surface as the
toy classifier so real networks can replace it.

Prediction is reconstructed from losses: with a fixed reference class 0,
L(0, k) = logit_0 - logit_k, so K-1 exchange calls recover the full logit
vector up to the constant logit_0, which softmax ignores.
"""

from __future__ import annotations

import os
import struct
import subprocess
import time

import numpy as np

from .classifier import AdversarialLossValue, ClassifierOutput, softmax
from .image_core import (
    ContinuousImage,
    PixelImage,
    read_exact,
    tensor_from_stream,
    tensor_to_bytes,
)

REQUEST_MAGIC = b"STGQ"
RESPONSE_MAGIC = b"STGR"


class ExchangeError(RuntimeError):
    """Malformed frame, wrong shape, or a dead provider."""


def _pixel_values(image) -> np.ndarray:
    if isinstance(image, PixelImage):
        return image.values.astype(np.float64)
    if isinstance(image, ContinuousImage):
        if image.domain != "pixel":
            raise ValueError("providers exchange pixel-domain images")
        return image.values
    return np.asarray(image, dtype=np.float64)


def encode_request(image, c_o: int, c_a: int) -> bytes:
    vals = _pixel_values(image)
    return REQUEST_MAGIC + struct.pack("<II", c_o, c_a) + tensor_to_bytes(vals)


def decode_request(stream) -> tuple[np.ndarray, int, int]:
    magic = read_exact(stream, 4)
    if magic != REQUEST_MAGIC:
        raise ExchangeError(f"bad request magic {magic!r}")
    c_o, c_a = struct.unpack("<II", read_exact(stream, 8))
    values = tensor_from_stream(stream)
    return values, c_o, c_a


def encode_response(loss: float, gradient: np.ndarray) -> bytes:
    return RESPONSE_MAGIC + struct.pack("<d", loss) + tensor_to_bytes(gradient)


def decode_response(stream, expect_shape) -> tuple[float, np.ndarray]:
    magic = read_exact(stream, 4)
    if magic != RESPONSE_MAGIC:
        raise ExchangeError(f"bad response magic {magic!r}")
    (loss,) = struct.unpack("<d", read_exact(stream, 8))
    try:
        gradient = tensor_from_stream(stream)
    except ValueError as exc:
        raise ExchangeError(str(exc)) from exc
    if gradient.shape != tuple(expect_shape):
        raise ExchangeError(
            f"gradient shape {gradient.shape} does not match request {tuple(expect_shape)}"
        )
    return loss, gradient


class _ExchangeClassifier:
    """Classifier surface implemented on top of a raw exchange call."""

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.num_classes = num_classes

    def _exchange(self, image_values: np.ndarray, c_o: int, c_a: int):
        raise NotImplementedError

    def loss_gradient(self, image, c_o: int, c_a: int):
        if c_o == c_a:
            raise ValueError("origin and adversarial class must differ")
        vals = _pixel_values(image)
        loss, grad = self._exchange(vals, c_o, c_a)
        return AdversarialLossValue(loss, c_o, c_a), grad

    def adversarial_loss(self, image, c_o: int, c_a: int) -> AdversarialLossValue:
        return self.loss_gradient(image, c_o, c_a)[0]

    def predict_pixel(self, image) -> ClassifierOutput:
        vals = _pixel_values(image)
        logits = np.zeros(self.num_classes)
        for k in range(1, self.num_classes):
            loss, _ = self._exchange(vals, 0, k)
            logits[k] = -loss
        probs = softmax(logits)
        return ClassifierOutput(logits, probs, int(np.argmax(probs)))


class SubprocessProvider(_ExchangeClassifier):
    """Spawns a command once and frames requests over stdin/stdout."""

    def __init__(self, command, num_classes: int, timeout: float = 30.0):
        super().__init__(num_classes)
        self.timeout = timeout
        self.proc = subprocess.Popen(
            command, stdin=subprocess.PIPE, stdout=subprocess.PIPE
        )

    def _exchange(self, vals, c_o, c_a):
        if self.proc.poll() is not None:
            raise ExchangeError(f"provider exited with code {self.proc.returncode}")
        try:
            self.proc.stdin.write(encode_request(vals, c_o, c_a))
            self.proc.stdin.flush()
            loss, grad = decode_response(self.proc.stdout, vals.shape)
        except (BrokenPipeError, ValueError, ExchangeError) as exc:
            code = self.proc.poll()
            if code not in (None, 0):
                raise ExchangeError(f"provider exited with code {code}") from exc
            raise ExchangeError(str(exc)) from exc
        return loss, grad

    def close(self):
        if self.proc.poll() is None:
            self.proc.stdin.close()
            try:
                self.proc.wait(timeout=self.timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class DirectoryProvider(_ExchangeClassifier):
    """Writes req-NNNNNN.bin files and polls for resp-NNNNNN.bin replies."""

    def __init__(self, directory, num_classes: int, timeout: float = 10.0, poll: float = 0.005):
        super().__init__(num_classes)
        self.directory = str(directory)
        self.timeout = timeout
        self.poll = poll
        self._counter = 0
        os.makedirs(self.directory, exist_ok=True)

    def _exchange(self, vals, c_o, c_a):
        self._counter += 1
        name = f"{self._counter:06d}"
        req = os.path.join(self.directory, f"req-{name}.bin")
        resp = os.path.join(self.directory, f"resp-{name}.bin")
        tmp = req + ".tmp"
        with open(tmp, "wb") as f:
            f.write(encode_request(vals, c_o, c_a))
        os.replace(tmp, req)  # atomic publish so the server never sees a partial file
        deadline = time.monotonic() + self.timeout
        while not os.path.exists(resp):
            if time.monotonic() > deadline:
                raise TimeoutError(f"no response for request {name} within {self.timeout}s")
            time.sleep(self.poll)
        # Give the responder a moment to finish writing, then parse strictly.
        for _ in range(3):
            try:
                with open(resp, "rb") as f:
                    return decode_response(f, vals.shape)
            except ExchangeError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(self.poll)
        with open(resp, "rb") as f:
            return decode_response(f, vals.shape)


def answer_request(classifier, values: np.ndarray, c_o: int, c_a: int) -> bytes:
    loss, grad = classifier.loss_gradient(ContinuousImage(values, "pixel"), c_o, c_a)
    return encode_response(loss.value, grad)


def serve_stdio(classifier, stdin, stdout) -> None:
    """Answer framed requests on a byte stream until EOF."""
    while True:
        probe = stdin.read(1)
        if not probe:
            return
        magic = probe + read_exact(stdin, 3)
        if magic != REQUEST_MAGIC:
            raise ExchangeError(f"bad request magic {magic!r}")
        c_o, c_a = struct.unpack("<II", read_exact(stdin, 8))
        values = tensor_from_stream(stdin)
        stdout.write(answer_request(classifier, values, c_o, c_a))
        stdout.flush()


def serve_directory(classifier, directory, max_requests: int, poll: float = 0.005,
                    timeout: float = 30.0) -> None:
    """Answer ``max_requests`` request files in a directory; used by tests
    and as a reference for wiring real networks in."""
    served = 0
    deadline = time.monotonic() + timeout
    while served < max_requests and time.monotonic() < deadline:
        pending = sorted(
            f for f in os.listdir(directory)
            if f.startswith("req-") and f.endswith(".bin")
        )
        progressed = False
        for req_name in pending:
            resp_name = "resp-" + req_name[len("req-"):]
            resp = os.path.join(directory, resp_name)
            if os.path.exists(resp):
                continue
            with open(os.path.join(directory, req_name), "rb") as f:
                values, c_o, c_a = decode_request(f)
            tmp = resp + ".tmp"
            with open(tmp, "wb") as f:
                f.write(answer_request(classifier, values, c_o, c_a))
            os.replace(tmp, resp)
            served += 1
            progressed = True
        if not progressed:
            time.sleep(poll)
