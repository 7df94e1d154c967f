import io
import struct
import sys
import threading

import numpy as np
import pytest

from stegadv.classifier import save_classifier
from stegadv.image_core import tensor_to_bytes
from stegadv.providers import (
    DirectoryProvider,
    ExchangeError,
    RESPONSE_MAGIC,
    SubprocessProvider,
    decode_response,
    encode_request,
    serve_directory,
    serve_stdio,
)

from conftest import random_pixel_image, random_toy_classifier


@pytest.fixture()
def toy():
    rng = np.random.default_rng(30)
    return random_toy_classifier(rng, shape=(3, 6, 6), hidden=12, k=4)


def test_stdio_loopback_identical_to_direct_calls(toy):
    rng = np.random.default_rng(31)
    img = random_pixel_image(rng, 3, 6, 6)

    request = encode_request(img, 1, 2) + encode_request(img, 0, 3)
    stdin = io.BytesIO(request)
    stdout = io.BytesIO()
    serve_stdio(toy, stdin, stdout)
    stdout.seek(0)
    loss1, grad1 = decode_response(stdout, (3, 6, 6))
    loss2, grad2 = decode_response(stdout, (3, 6, 6))

    direct1, dgrad1 = toy.loss_gradient(img, 1, 2)
    direct2, dgrad2 = toy.loss_gradient(img, 0, 3)
    assert loss1 == direct1.value and loss2 == direct2.value
    # f32 tensor at rest
    assert np.allclose(grad1, dgrad1, atol=1e-8)
    assert np.allclose(grad2, dgrad2, atol=1e-8)


def test_directory_provider_round_trip(tmp_path, toy):
    rng = np.random.default_rng(32)
    img = random_pixel_image(rng, 3, 6, 6)
    provider = DirectoryProvider(tmp_path, num_classes=4, timeout=20.0)

    server = threading.Thread(
        target=serve_directory, args=(toy, str(tmp_path), 1 + (4 - 1)), daemon=True
    )
    server.start()

    loss, grad = provider.loss_gradient(img, 2, 0)
    direct, dgrad = toy.loss_gradient(img, 2, 0)
    assert loss.value == direct.value
    assert np.allclose(grad, dgrad, atol=1e-8)

    out = provider.predict_pixel(img)
    direct_out = toy.predict_pixel(img)
    assert out.predicted_class == direct_out.predicted_class
    assert np.allclose(out.probabilities, direct_out.probabilities, atol=1e-6)
    server.join(timeout=20)


def test_directory_provider_times_out(tmp_path):
    provider = DirectoryProvider(tmp_path, num_classes=2, timeout=0.1, poll=0.01)
    with pytest.raises(TimeoutError):
        provider.adversarial_loss(np.zeros((1, 3, 3)), 0, 1)


def test_truncated_response_is_a_shape_error():
    grad = np.zeros((2, 3, 3))
    blob = RESPONSE_MAGIC + struct.pack("<d", 1.0) + tensor_to_bytes(grad)
    with pytest.raises(ExchangeError):
        decode_response(io.BytesIO(blob[:-5]), (2, 3, 3))


def test_wrong_shape_gradient_rejected():
    grad = np.zeros((2, 3, 3))
    blob = RESPONSE_MAGIC + struct.pack("<d", 1.0) + tensor_to_bytes(grad)
    with pytest.raises(ExchangeError):
        decode_response(io.BytesIO(blob), (3, 3, 3))


def test_bad_magic_rejected():
    blob = b"WHAT" + struct.pack("<d", 1.0) + tensor_to_bytes(np.zeros((1, 2, 2)))
    with pytest.raises(ExchangeError):
        decode_response(io.BytesIO(blob), (1, 2, 2))


def test_subprocess_provider_speaks_cli_serve(tmp_path, toy):
    model_path = tmp_path / "toy.stgw"
    save_classifier(toy, model_path)
    rng = np.random.default_rng(33)
    img = random_pixel_image(rng, 3, 6, 6)
    cmd = [sys.executable, "-m", "stegadv", "serve", "--model", str(model_path)]
    with SubprocessProvider(cmd, num_classes=4) as provider:
        loss, grad = provider.loss_gradient(img, 1, 3)
        out = provider.predict_pixel(img)
    # the served model is an f32 round trip of the in-memory one
    direct, dgrad = toy.loss_gradient(img, 1, 3)
    assert loss.value == pytest.approx(direct.value, abs=1e-3)
    assert np.allclose(grad, dgrad, atol=1e-5)
    assert out.predicted_class == toy.predict_pixel(img).predicted_class


def test_subprocess_provider_reports_dead_process(toy):
    cmd = [sys.executable, "-c", "import sys; sys.exit(3)"]
    provider = SubprocessProvider(cmd, num_classes=2)
    provider.proc.wait(timeout=10)
    with pytest.raises(ExchangeError):
        provider.adversarial_loss(np.zeros((1, 3, 3)), 0, 1)
