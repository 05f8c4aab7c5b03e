import numpy as np
import pytest
import torch

from multistego.image_data import StegoBatch
from multistego.stego_net import (NetworkSpec, decode_all, encode_forward, init_params,
                                  param_shapes, prep_forward, reveal_forward, same_padding)

import oracles


def rand_batch(k, n=1, size=8, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    t = torch.rand((k + 1, n, size, size, 3), generator=g, dtype=torch.float64).to(dtype)
    return StegoBatch(t[0], list(t[1:]))


def test_same_padding():
    assert same_padding(3) == (1, 1)
    assert same_padding(4) == (1, 2)
    assert same_padding(5) == (2, 2)


def test_init_deterministic():
    a = init_params(NetworkSpec(k=2), seed=11)
    b = init_params(NetworkSpec(k=2), seed=11)
    c = init_params(NetworkSpec(k=2), seed=12)
    for (n, p), (_, q), (_, r) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(p, q)
        if n.endswith("weight"):
            assert not torch.equal(p, r)
        else:
            assert torch.count_nonzero(p) == 0


def test_init_k3_parameter_sets():
    m = init_params(NetworkSpec(k=3))
    assert len(m.prep) == 3 and len(m.reveal) == 3
    assert m.hiding.project.out_channels == 3


@pytest.mark.parametrize("k", [1, 2, 3, 5])
def test_param_shapes_closed_form(k):
    spec = NetworkSpec(k=k)
    m = init_params(spec)
    got = {n: tuple(p.shape) for n, p in m.named_parameters()}
    assert got == param_shapes(spec)
    assert got["hiding.layers.0.convs.0.weight"] == (50, 3 + 65 * k, 3, 3)


def test_init_bounds():
    m = init_params(NetworkSpec(k=1), seed=0)
    w = m.prep[0].layers[0].convs[1].weight
    bound = np.sqrt(6 / (3 * 4 * 4))
    assert w.abs().max() <= bound
    assert w.abs().max() > 0.9 * bound


def test_reveal_sets_independent():
    m = init_params(NetworkSpec(k=2))
    ids = {id(p) for p in m.reveal[0].parameters()} & {id(p) for p in m.reveal[1].parameters()}
    assert not ids


def test_prep_shape():
    m = init_params(NetworkSpec(k=1))
    out = prep_forward(m.prep[0], torch.rand(2, 64, 64, 3))
    assert out.shape == (2, 64, 64, 65)


def test_zero_input_zero_output():
    m = init_params(NetworkSpec(k=1))
    zeros = torch.zeros(1, 16, 16, 3)
    assert torch.count_nonzero(prep_forward(m.prep[0], zeros)) == 0
    assert torch.count_nonzero(reveal_forward(m.reveal[0], zeros)) == 0


def test_shape_errors():
    m = init_params(NetworkSpec(k=2))
    with pytest.raises(ValueError):
        prep_forward(m.prep[0], torch.rand(1, 8, 8, 4))
    with pytest.raises(ValueError):
        reveal_forward(m.reveal[0], torch.rand(8, 8, 3))
    with pytest.raises(ValueError):
        encode_forward(m, rand_batch(3))
    with pytest.raises(ValueError):
        StegoBatch(torch.rand(1, 8, 8, 3), [torch.rand(1, 4, 4, 3)])


def test_encode_shapes_k3():
    m = init_params(NetworkSpec(k=3))
    assert m.hiding.layers[0].convs[0].in_channels == 198
    b = rand_batch(3, n=4, size=64)
    assert encode_forward(m, b).shape == (4, 64, 64, 3)


def test_k1_hiding_depth():
    m = init_params(NetworkSpec(k=1))
    assert m.hiding.layers[0].convs[0].in_channels == 68


@pytest.mark.parametrize("dtype,tol", [(torch.float32, 1e-5), (torch.float64, 1e-10)])
def test_prep_matches_oracle(dtype, tol):
    m = init_params(NetworkSpec(k=1), seed=3, dtype=dtype)
    x = rand_batch(1, seed=4, dtype=dtype).cover
    got = prep_forward(m.prep[0], x).detach().double().numpy()
    want = oracles.prep(x.double().numpy(), m.prep[0])
    assert np.max(np.abs(got - want)) < tol


@pytest.mark.parametrize("dtype,tol", [(torch.float32, 1e-5), (torch.float64, 1e-10)])
def test_reveal_matches_oracle(dtype, tol):
    m = init_params(NetworkSpec(k=1), seed=5, dtype=dtype)
    x = rand_batch(1, seed=6, dtype=dtype).cover
    got = reveal_forward(m.reveal[0], x).detach().double().numpy()
    want = oracles.stack_with_projection(x.double().numpy(), m.reveal[0])
    assert np.max(np.abs(got - want)) < tol


@pytest.mark.parametrize("dtype,tol", [(torch.float32, 1e-5), (torch.float64, 1e-10)])
def test_encode_matches_oracle(dtype, tol):
    m = init_params(NetworkSpec(k=2), seed=7, dtype=dtype)
    b = rand_batch(2, seed=8, dtype=dtype)
    got = encode_forward(m, b).detach().double().numpy()
    want = oracles.encode(b.cover.double().numpy(), [s.double().numpy() for s in b.secrets], m)
    assert np.max(np.abs(got - want)) < tol


def test_decode_all_order_and_count():
    m = init_params(NetworkSpec(k=3), seed=1)
    c = torch.rand(2, 8, 8, 3)
    out = decode_all(m, c)
    assert len(out) == 3 and all(o.shape == (2, 8, 8, 3) for o in out)
    for i in range(3):
        assert torch.equal(out[i], reveal_forward(m.reveal[i], c))


def test_decode_all_k1():
    m = init_params(NetworkSpec(k=1))
    assert len(decode_all(m, torch.rand(1, 8, 8, 3))) == 1


def test_permuting_reveal_sets_permutes_outputs():
    m = init_params(NetworkSpec(k=3), seed=2)
    c = torch.rand(1, 8, 8, 3)
    before = decode_all(m, c)
    perm = [2, 0, 1]
    m.reveal = torch.nn.ModuleList(m.reveal[i] for i in perm)
    after = decode_all(m, c)
    for j, i in enumerate(perm):
        assert torch.equal(after[j], before[i])


def test_perturbing_one_decoder_changes_only_its_output():
    m = init_params(NetworkSpec(k=3), seed=2)
    c = torch.rand(1, 8, 8, 3)
    before = decode_all(m, c)
    with torch.no_grad():
        m.reveal[1].project.bias.add_(0.5)
    after = decode_all(m, c)
    assert torch.equal(before[0], after[0]) and torch.equal(before[2], after[2])
    assert not torch.equal(before[1], after[1])


def test_forward_bit_deterministic():
    m = init_params(NetworkSpec(k=2), seed=9)
    b = rand_batch(2, n=2, size=16, seed=1)
    assert torch.equal(encode_forward(m, b), encode_forward(m, b))


def test_shape_preserved_odd_sizes():
    m = init_params(NetworkSpec(k=2), seed=9)
    b = rand_batch(2, n=1, size=11)
    c = encode_forward(m, b)
    assert c.shape == (1, 11, 11, 3)
    assert all(d.shape == c.shape for d in decode_all(m, c))
