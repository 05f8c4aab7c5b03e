import hashlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from multistego.codec import (FLOAT_PASSTHROUGH, LsbPlan, QuantPolicy, decode_file, encode_file,
                              load_container, lsb_decode_file, lsb_embed, lsb_encode_file,
                              lsb_extract, quantize, save_image)
from multistego.image_data import StegoBatch, load_image
from multistego.stego_net import NetworkSpec, decode_all, encode_forward, init_params
from multistego.synthetic import smooth_images


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def model():
    return init_params(NetworkSpec(k=2), seed=0)


@pytest.fixture
def inputs(tmp_path):
    imgs = smooth_images(3, 64, seed=11)
    paths = [save_image(im, tmp_path / f"in{i}.png") for i, im in enumerate(imgs)]
    return paths[0], paths[1:]


# -- quantization -------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 5, 3), elements=st.floats(-2, 3)))
def test_quantize_idempotent_and_bounded(x):
    q = quantize(x)
    assert np.array_equal(quantize(q), q)
    assert np.all(np.abs(q - np.clip(x, 0, 1)) <= 1 / 510 + 1e-12)


def test_policy_validation():
    with pytest.raises(ValueError):
        QuantPolicy("lossy")


# -- neural codec -------------------------------------------------------------

def test_encode_writes_png(model, inputs, tmp_path):
    cover, secrets = inputs
    out = tmp_path / "ct.png"
    summary = encode_file(model, cover, secrets, out)
    img = Image.open(out)
    assert img.size == (64, 64) and img.mode == "RGB"
    assert summary.mse_float >= 0 and summary.mse_quantized >= 0


def test_encode_byte_idempotent(model, inputs, tmp_path):
    cover, secrets = inputs
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    encode_file(model, cover, secrets, a)
    encode_file(model, cover, secrets, b)
    assert a.read_bytes() == b.read_bytes()
    # re-quantizing the written container reproduces the same file
    c = tmp_path / "c.png"
    save_image(quantize(load_image(a)), c)
    assert c.read_bytes() == a.read_bytes()


def test_distortion_summary_matches_direct_computation(model, inputs, tmp_path):
    cover, secrets = inputs
    summary = encode_file(model, cover, secrets, tmp_path / "ct.png")
    cov = load_image(cover).astype(np.float64)
    batch = StegoBatch(torch.from_numpy(load_image(cover)), [torch.from_numpy(load_image(p)) for p in secrets])
    with torch.no_grad():
        c = encode_forward(model, batch).double().numpy()
    q = quantize(c)
    assert summary.mse_float == pytest.approx(np.mean((c - cov) ** 2), rel=1e-9)
    assert summary.mse_quantized == pytest.approx(np.mean((q - cov) ** 2), rel=1e-9)
    # triangle inequality on RMS distances
    gap = np.sqrt(np.mean((q - c) ** 2))
    assert abs(np.sqrt(summary.mse_quantized) - np.sqrt(summary.mse_float)) <= gap + 1e-12


def test_encode_k_mismatch(model, inputs, tmp_path):
    cover, secrets = inputs
    with pytest.raises(ValueError, match="2 secrets"):
        encode_file(model, cover, secrets[:1], tmp_path / "x.png")


def test_encode_unreadable_input(model, inputs, tmp_path):
    cover, secrets = inputs
    with pytest.raises(OSError):
        encode_file(model, tmp_path / "nope.png", secrets, tmp_path / "x.png")


def test_inputs_not_modified(model, inputs, tmp_path):
    cover, secrets = inputs
    before = [digest(p) for p in [cover, *secrets]]
    out = tmp_path / "ct.png"
    encode_file(model, cover, secrets, out)
    ct = digest(out)
    decode_file(model, out, tmp_path / "dec")
    assert [digest(p) for p in [cover, *secrets]] == before
    assert digest(out) == ct


def test_decode_file_matches_in_memory(model, inputs, tmp_path):
    cover, secrets = inputs
    out = tmp_path / "ct.png"
    encode_file(model, cover, secrets, out)
    paths = decode_file(model, out, tmp_path / "dec")
    assert [p.name for p in paths] == ["secret_1.png", "secret_2.png"]
    with torch.no_grad():
        want = decode_all(model, torch.from_numpy(load_image(out)))
    for p, w in zip(paths, want):
        got = load_image(p)[0]
        assert np.max(np.abs(got - np.clip(w[0].numpy(), 0, 1))) <= 1 / 255


def test_float_passthrough_roundtrip(model, inputs, tmp_path):
    cover, secrets = inputs
    out = tmp_path / "ct.png"
    summary = encode_file(model, cover, secrets, out, QuantPolicy(FLOAT_PASSTHROUGH))
    assert summary.sidecar.exists()
    batch = StegoBatch(torch.from_numpy(load_image(cover)), [torch.from_numpy(load_image(p)) for p in secrets])
    with torch.no_grad():
        container = encode_forward(model, batch)
        want = decode_all(model, container)
    assert np.array_equal(load_container(summary.sidecar), container.numpy())
    paths = decode_file(model, summary.sidecar, tmp_path / "dec")
    for p, w in zip(paths, want):
        assert np.max(np.abs(load_image(p)[0] - np.clip(w[0].numpy(), 0, 1))) <= 1 / 255


def test_decode_unreadable(model, tmp_path):
    with pytest.raises(OSError):
        decode_file(model, tmp_path / "missing.png", tmp_path / "d")


# -- LSB baseline -------------------------------------------------------------

def test_lsb_worked_example():
    cover = np.array([0b10110100], np.uint8)
    secrets = [np.array([0b11000000], np.uint8), np.array([0b00111111], np.uint8),
               np.array([0b10000000], np.uint8)]
    out = lsb_embed(cover, secrets, LsbPlan(3, 2))
    assert out[0] == 0b10110010


def test_lsb_k1_nibble(rng):
    cover = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    secret = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    out = lsb_embed(cover, [secret], LsbPlan(1, 4))
    assert np.array_equal(out >> 4, cover >> 4)
    assert np.array_equal(out & 0x0F, secret >> 4)


def test_lsb_plan_budget():
    with pytest.raises(ValueError):
        LsbPlan(4, 2)
    with pytest.raises(ValueError):
        LsbPlan(1, 8)
    assert LsbPlan.default(3) == LsbPlan(3, 2)
    assert LsbPlan.default(1) == LsbPlan(1, 4)
    assert LsbPlan(3, 2).cover_bits_kept == 2


def test_lsb_extract_zero():
    out = lsb_extract(np.zeros((4, 4, 3), np.uint8), LsbPlan(2, 3))
    assert len(out) == 2 and all(np.count_nonzero(s) == 0 for s in out)


def test_lsb_shape_mismatch():
    with pytest.raises(ValueError):
        lsb_embed(np.zeros((2, 2), np.uint8), [np.zeros((3, 3), np.uint8)], LsbPlan(1, 1))
    with pytest.raises(ValueError):
        lsb_embed(np.zeros((2, 2), np.uint8), [np.zeros((2, 2), np.uint8)], LsbPlan(2, 1))


@settings(max_examples=60, deadline=None)
@given(k=st.integers(1, 7), data=st.data())
def test_lsb_roundtrip_property(k, data):
    bits = data.draw(st.integers(1, 7 // k))
    plan = LsbPlan(k, bits)
    shape = (6, 5, 3)
    byte = st.integers(0, 255)
    cover = data.draw(arrays(np.uint8, shape, elements=byte))
    secrets = [data.draw(arrays(np.uint8, shape, elements=byte)) for _ in range(k)]
    out = lsb_embed(cover, secrets, plan)
    keep = 8 - plan.cover_bits_kept
    assert np.array_equal(out >> keep, cover >> keep)
    low = np.uint8((0xFF << (8 - bits)) & 0xFF)
    for s, r in zip(secrets, lsb_extract(out, plan)):
        assert np.array_equal(r, s & low)


def test_lsb_files(tmp_path, rng):
    paths = []
    for i in range(4):
        p = tmp_path / f"{i}.png"
        Image.fromarray(rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)).save(p)
        paths.append(p)
    out = lsb_encode_file(paths[0], paths[1:], tmp_path / "ct.png")
    assert Image.open(out).mode == "RGB"
    got = lsb_decode_file(out, tmp_path / "dec", LsbPlan.default(3))
    for src, dec in zip(paths[1:], got):
        a = np.asarray(Image.open(src))
        b = np.asarray(Image.open(dec))
        assert np.array_equal(b, a & 0b11000000)
