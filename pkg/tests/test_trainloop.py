import numpy as np
import pytest

from mixpipe.core import DimMismatch, PipelineConfig, ValidationError
from mixpipe.trainloop import (
    CURVE_HEADER,
    EncoderParams,
    ShapeMismatch,
    encode,
    format_curve,
    init_encoder,
    momentum_update,
    read_encoder,
    run_training,
    write_encoder,
)
from oracles import affine_loop


def test_encode_matches_loop(rng):
    W = rng.normal(size=(3, 4))
    b = rng.normal(size=3)
    X = rng.normal(size=(5, 4))
    np.testing.assert_allclose(encode(EncoderParams(W, b), X), affine_loop(W, b, X), atol=1e-12)
    with pytest.raises(DimMismatch):
        encode(EncoderParams(W, b), rng.normal(size=(2, 5)))


def test_identity_init_is_identity(rng):
    X = rng.normal(size=(4, 6))
    np.testing.assert_array_equal(encode(init_encoder(6, 6, rng, "identity"), X), X)
    enc = init_encoder(100, 50, np.random.default_rng(0))
    assert enc.weights.shape == (50, 100)
    assert enc.weights.std() == pytest.approx(0.1, rel=0.05)


def test_momentum_example():
    m = EncoderParams(np.ones((1, 1)), np.zeros(1))
    e = EncoderParams(np.zeros((1, 1)), np.ones(1))
    out = momentum_update(m, e, 0.999)
    assert out.weights[0, 0] == pytest.approx(0.999)
    assert out.bias[0] == pytest.approx(0.001)
    # lambda = 0 copies the encoder
    zero = momentum_update(m, e, 0.0)
    np.testing.assert_array_equal(zero.weights, e.weights)


def test_momentum_contracts_geometrically(rng):
    e = EncoderParams(rng.normal(size=(3, 3)), rng.normal(size=3))
    m = EncoderParams(rng.normal(size=(3, 3)), rng.normal(size=3))
    gap0 = np.linalg.norm(m.weights - e.weights)
    for t in range(1, 6):
        m = momentum_update(m, e, 0.9)
        assert np.linalg.norm(m.weights - e.weights) == pytest.approx(0.9**t * gap0, rel=1e-12)


def test_momentum_validation(rng):
    a = init_encoder(3, 2, rng)
    with pytest.raises(ShapeMismatch):
        momentum_update(a, init_encoder(3, 3, rng), 0.5)
    with pytest.raises(ValidationError):
        momentum_update(a, a, 1.0)


def test_encoder_file_roundtrip(tmp_path, rng):
    enc = EncoderParams(rng.normal(size=(2, 5)), rng.normal(size=2))
    write_encoder(enc, tmp_path / "enc.bin")
    back = read_encoder(tmp_path / "enc.bin")
    np.testing.assert_allclose(back.weights, enc.weights, rtol=1e-6)
    np.testing.assert_allclose(back.bias, enc.bias, rtol=1e-6)


def test_zero_iterations_leave_encoders_untouched(clean_data):
    _, manifest, raw, _ = clean_data
    res = run_training(manifest, raw, PipelineConfig(epochs=2, iterations_per_epoch=0))
    np.testing.assert_array_equal(res.encoder.weights, res.initial_momentum_encoder.weights)
    np.testing.assert_array_equal(res.momentum_encoder.weights, res.initial_momentum_encoder.weights)
    assert res.loss_curve == [] and len(res.reports) == 2


def test_lambda_zero_tracks_encoder(clean_data):
    _, manifest, raw, _ = clean_data
    res = run_training(manifest, raw, PipelineConfig(epochs=1, iterations_per_epoch=3,
                                                     lambda_momentum=0.0))
    np.testing.assert_array_equal(res.momentum_encoder.weights, res.encoder.weights)


def test_training_is_deterministic_and_decreases_loss(clean_data):
    _, manifest, raw, _ = clean_data
    cfg = PipelineConfig(epochs=2, iterations_per_epoch=15, seed=2)
    a = run_training(manifest, raw, cfg)
    b = run_training(manifest, raw, cfg)
    assert format_curve(a.loss_curve) == format_curve(b.loss_curve)
    np.testing.assert_array_equal(a.momentum_encoder.weights, b.momentum_encoder.weights)
    totals = [row[-1] for row in a.loss_curve]
    assert len(totals) == 30
    assert np.mean(totals[-5:]) < np.mean(totals[:5])
    assert format_curve(a.loss_curve).splitlines()[0].split("\t") == list(CURVE_HEADER)


def test_training_checks_row_count(clean_data):
    _, manifest, raw, _ = clean_data
    with pytest.raises(DimMismatch):
        run_training(manifest, raw[:-1], PipelineConfig(epochs=1, iterations_per_epoch=1))
