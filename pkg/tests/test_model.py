import hashlib
from pathlib import Path

import numpy as np
import pytest

from mgp import model
from mgp import tensor as T
from mgp.errors import BadMagicError, ContractError, InconsistentShapeError, ShapeError, TruncatedError
from mgp.tensor import Tensor

GOLDEN = Path(__file__).parent / "golden"


def latent(rng, d=64):
    return Tensor(rng.standard_normal((1, d, 1, 1)))


def test_golden_zero_code_image(gen):
    img = gen(Tensor(np.zeros((1, 64, 1, 1))))
    digest = hashlib.sha256(T.encode_mtd(img)).hexdigest()
    assert digest == (GOLDEN / "toy_gen_seed7_z0.sha256").read_text().strip()


def test_output_range(gen, rng):
    for _ in range(100):
        x = gen(latent(rng)).data
        assert x.shape == (1, 3, 32, 32)
        assert x.min() >= -1 and x.max() <= 1


def test_latent_mismatch(gen):
    with pytest.raises(ShapeError):
        gen(Tensor(np.zeros((1, 32, 1, 1))))


@pytest.mark.parametrize("ell", range(1, 9))
def test_split_composition_bit_exact(gen, ell):
    r = np.random.default_rng(ell)
    g1, g2 = gen.split(ell)
    with T.no_grad():
        for _ in range(50):
            z = latent(r)
            assert np.array_equal(g2(g1(z)).data, gen(z).data)


def test_split_first_block(gen):
    g1, _ = gen.split(1)
    assert len([l for l in g1.layers if l.weighted]) == 1
    assert g1(Tensor(np.zeros((1, 64, 1, 1)))).shape[1] == gen.layer_channel_counts[0] == 64


def test_split_range(gen):
    for bad in (0, 9, -1):
        with pytest.raises(ContractError, match="1..8"):
            gen.split(bad)


def test_feature_shape_matches_shipped_table(gen):
    meta = model.read_metadata(model.sidecar_path(model.TOY_GEN_PATH))
    for ell, shape in meta["feature_shapes"].items():
        assert gen.feature_shape(ell)[1:] == shape
    assert gen.feature_shape(6) == (1, 64, 16, 16)


def test_shipped_checkpoint_contents(gen):
    assert gen.latent_dim == 64
    assert gen.num_blocks == 8
    assert gen.layer_channel_counts == [64] * 8
    meta = model.read_metadata(model.sidecar_path(model.TOY_GEN_PATH))
    assert meta["sha256"] == hashlib.sha256(model.TOY_GEN_PATH.read_bytes()).hexdigest()


def test_shipped_checkpoints_regenerate_from_seed():
    assert model.encode_checkpoint(model.make_toy_generator(7, 8, 64)) == model.TOY_GEN_PATH.read_bytes()
    assert model.encode_checkpoint(model.make_toy_extractor(11)) == model.TOY_PHI_PATH.read_bytes()


def test_toy_determinism_and_seeds():
    a = model.encode_checkpoint(model.make_toy_generator(1, 4, 8, base_channels=8))
    b = model.encode_checkpoint(model.make_toy_generator(1, 4, 8, base_channels=8))
    assert a == b
    w1 = model.make_toy_generator(1, 4, 8, base_channels=8).layers[0].weight.data
    w2 = model.make_toy_generator(2, 4, 8, base_channels=8).layers[0].weight.data
    assert not np.array_equal(w1, w2)


def test_toy_parameter_validation():
    with pytest.raises(ContractError):
        model.make_toy_generator(0, depth=1)
    with pytest.raises(ContractError):
        model.make_toy_generator(0, latent_dim=0)


def test_checkpoint_roundtrip(tmp_path, small_gen, phi):
    for m in (small_gen, phi):
        p1, p2 = tmp_path / "a.mgc", tmp_path / "b.mgc"
        model.save_checkpoint(m, p1)
        model.save_checkpoint(model.load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_parse_errors(tmp_path, small_gen):
    raw = model.encode_checkpoint(small_gen)
    with pytest.raises(TruncatedError):
        model.decode_checkpoint(raw[:-1])
    with pytest.raises(BadMagicError):
        model.decode_checkpoint(b"MGC2" + raw[4:])
    # swap in a bias of the wrong length for the first weighted layer
    layer = small_gen.layers[0]
    head = raw[: 4 + 16 + 1 + 8]
    w = T.encode_mtd(layer.weight)
    b = T.encode_mtd(Tensor(np.zeros(layer.out_channels + 1)))
    rest = raw[len(head) + len(w) + len(T.encode_mtd(layer.bias)):]
    with pytest.raises(InconsistentShapeError):
        model.decode_checkpoint(head + w + b + rest)


def test_checkpoint_chain_mismatch(small_gen):
    layers = list(small_gen.layers)
    conv = layers[2]
    wrong = model.LayerSpec("conv", Tensor(np.zeros((conv.out_channels, conv.in_channels + 1, 3, 3))),
                            Tensor(np.zeros(conv.out_channels)), 1, 1)
    layers[2] = wrong
    with pytest.raises(ShapeError):
        model.Generator(layers, small_gen.latent_dim)


def test_extractor_determinism_and_zero_distance(phi, rng):
    x = Tensor(rng.uniform(-1, 1, (1, 3, 32, 32)))
    a, b = phi(x), phi(x)
    assert np.array_equal(a.data, b.data)
    assert T.l1_dist(a, b).item() == 0.0
    assert a.shape == (1, 64, 8, 8)


def test_extractor_wrong_channels(phi):
    with pytest.raises(ShapeError):
        phi(Tensor(np.zeros((1, 1, 32, 32))))


def test_extractor_gradient(small_phi):
    r = np.random.default_rng(0)
    y = Tensor(r.uniform(-1, 1, (1, 3, 8, 8)))
    err = T.grad_check(lambda x: T.l1_dist(small_phi(x), small_phi(y)), Tensor(r.uniform(-1, 1, (1, 3, 8, 8))))
    assert err < 1e-6


def test_parameters_never_get_gradients(gen, phi, rng):
    z = Tensor(rng.standard_normal((1, 64, 1, 1)), requires_grad=True)
    with T.Graph():
        T.backward(T.sum(phi(gen(z))))
    assert z.grad is not None
    assert all(p.grad is None and not p.requires_grad for p in gen.parameters() + phi.parameters())


def test_describe_mentions_every_layer(gen):
    text = model.describe(gen)
    assert "channel_counts: 64 64 64 64 64 64 64 64" in text
    assert text.count("\n") >= 8
