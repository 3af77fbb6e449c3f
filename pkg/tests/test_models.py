from types import SimpleNamespace

import numpy as np
import pytest

from core import diffcore as dc
from core import geometry as geo
from core.diffcore import DiffTensor
from core.errors import ConfigError, FrozenParameterError, NumericalError, ShapeError
from services.classifier_model import (
    ClassifierHead,
    check_frozen,
    classifier_step,
    evaluate_classifier,
    train_classifier,
)
from services.dataset_service import synth_images, synth_mixture
from services.hypervq_quantizer import HyperVQ, hypervq_logits
from services.layers import Module
from services.quantizers import IdentityQuantizer, get_quantizer
from services.vqvae_model import VQVAE, EncoderConfig, extract_embeddings, train_vqvae, vqvae_step
from utils.checkpoint import decode_checkpoint, encode_checkpoint

TINY = EncoderConfig(height=8, width=8, hidden_channels=4, residual_blocks=1, latent_dim=2, downsample=2)


def tiny_model(quantizer_name='hypervq', seed=0):
    rng = np.random.default_rng(seed)
    config = SimpleNamespace(num_codes=4, latent_dim=2, curvature=1.0, boundary_eps=1e-5, beta=0.25, tau_max=2.0,
                             tau_min=0.5, tau_decay=0.0, gumbel_hard=True, kmeans_ema=False, ema_decay=0.99)
    return VQVAE(TINY, get_quantizer(quantizer_name, config, rng, total_steps=20), rng)


def tiny_images(n=16, seed=0):
    return synth_images(3, n // 3 + 1, 8, np.random.default_rng(seed)).images[:n]


def test_encoder_shape_on_mnist_sized_batch(rng):
    model = VQVAE(EncoderConfig(), HyperVQ(16, 3, rng), rng)
    z_e = model.encode(rng.random((4, 1, 28, 28)))
    assert z_e.shape == (4, 3, 7, 7)
    assert np.all(np.isfinite(z_e.values))
    assert model.decode(z_e).shape == (4, 1, 28, 28)


def test_zero_weights_give_zero_latents(rng):
    model = tiny_model()
    for tensor in model.encoder.parameters():
        tensor.values[...] = 0.0
    assert np.array_equal(model.encode(rng.random((2, 1, 8, 8))).values, np.zeros((2, 2, 4, 4)))


def test_shape_checks(rng):
    model = tiny_model()
    with pytest.raises(ShapeError):
        model.encode(rng.random((2, 1, 9, 8)))
    with pytest.raises(ShapeError):
        model.decode(rng.random((2, 3, 4, 4)))


def test_decode_codes_shape():
    model = tiny_model('hypervq')
    decoded = model.decode_codes()
    assert decoded.shape == (4, 1, 2, 2)
    assert np.all(np.isfinite(decoded))

    rng = np.random.default_rng(0)
    mnist_like = VQVAE(EncoderConfig(), HyperVQ(16, 3, rng), rng)
    assert mnist_like.decode_codes().shape == (16, 1, 4, 4)


def test_decode_codes_follows_given_rows():
    model = tiny_model('kmeansvq')
    codebook = model.quantizer.codebook()
    with dc.no_grad():
        direct = model.decoder(codebook[:, :, None, None], strict=False).values
    assert np.array_equal(model.decode_codes(codebook), direct)
    assert np.allclose(model.decode_codes()[1:2], model.decode_codes(codebook[1:2]), rtol=1e-12, atol=1e-14)
    with pytest.raises(ShapeError):
        model.decode_codes(np.zeros((4, 3)))
    with pytest.raises(ShapeError):
        model.decode(np.zeros((1, 2, 1, 1)))


def test_bad_downsample_is_config_error():
    with pytest.raises(ConfigError):
        EncoderConfig(height=8, width=8, downsample=3)
    with pytest.raises(ConfigError):
        VQVAE(TINY, HyperVQ(4, 3, np.random.default_rng(0)), np.random.default_rng(0))


def test_no_downsampling_keeps_resolution(rng):
    config = EncoderConfig(height=4, width=4, hidden_channels=2, residual_blocks=0, latent_dim=2, downsample=1)
    model = VQVAE(config, IdentityQuantizer(2), rng)
    x = rng.random((1, 1, 4, 4))
    assert model.encode(x).shape == (1, 2, 4, 4)
    assert model(DiffTensor(x)).reconstruction.shape == x.shape


def test_encoder_receives_gradient_through_quantizer():
    model = tiny_model('hypervq').train()
    x = DiffTensor(tiny_images(4))
    out = model(x)
    dc.backward(dc.mse(out.reconstruction, x) + out.quantized.aux_loss)
    assert max(np.max(np.abs(p.grad)) for p in model.encoder.parameters()) > 0


@pytest.mark.parametrize('name', ['hypervq', 'kmeansvq', 'gumbelvq', 'hyperkmeansvq', 'hyperembmatvq', 'identity'])
def test_same_training_loop_for_every_quantizer(name):
    model = tiny_model(name)
    history = train_vqvae(model, tiny_images(), np.random.default_rng(1), batch_size=8, epochs=1, max_steps=2)
    assert len(history) == 2
    assert all(np.isfinite(r.loss) for r in history)
    if name in ('hypervq', 'gumbelvq', 'hyperembmatvq', 'identity'):
        assert all(r.aux_loss == 0.0 for r in history)


def test_hypervq_training_stays_finite():
    model = tiny_model('hypervq')
    optimizer = dc.Adam(model.parameters(), learning_rate=5e-3)
    images = tiny_images(8)
    for step in range(60):
        record = vqvae_step(images, model, optimizer, step)
        assert np.isfinite(record.loss)
        assert 1.0 <= record.perplexity <= 4.0
    assert record.tau < 2.0


def test_plain_autoencoder_reduces_loss():
    rng = np.random.default_rng(0)
    model = VQVAE(TINY, IdentityQuantizer(2), rng)
    optimizer = dc.Adam(model.parameters(), learning_rate=3e-3)
    sample = np.repeat(tiny_images(1), 4, axis=0)
    losses = [vqvae_step(sample, model, optimizer, step).reconstruction_loss for step in range(50)]
    assert losses[-1] < losses[0]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_plain_autoencoder_loss_decreases_every_step():
    model = VQVAE(TINY, IdentityQuantizer(2), np.random.default_rng(0))
    optimizer = dc.Adam(model.parameters(), learning_rate=5e-4)
    sample = np.repeat(tiny_images(1), 4, axis=0)
    losses = [vqvae_step(sample, model, optimizer, step).loss for step in range(50)]
    assert all(after <= before + 1e-12 for before, after in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


@pytest.mark.slow
def test_plain_autoencoder_fits_small_dataset():
    model = VQVAE(TINY, IdentityQuantizer(2), np.random.default_rng(0))
    images = tiny_images(100)
    history = train_vqvae(model, images, np.random.default_rng(1), batch_size=100, epochs=2000,
                          learning_rate=3e-3, max_steps=2000)
    assert len(history) == 2000
    model.eval()
    assert np.mean((model.reconstruct(images) - images) ** 2) < 0.05


@pytest.mark.slow
def test_hypervq_long_run_stays_inside_ball():
    model = tiny_model('hypervq')
    optimizer = dc.Adam(model.parameters(), learning_rate=3e-3)
    images = tiny_images(16)
    for step in range(1000):
        record = vqvae_step(images, model, optimizer, step)
        assert np.isfinite(record.loss)
        if step % 100 == 99:
            embeddings = extract_embeddings(model, images)
            assert np.all(np.linalg.norm(embeddings.projected, axis=1) < 1.0)
            with dc.no_grad():
                logits = hypervq_logits(embeddings.latents, model.quantizer.planes, model.quantizer.ball).values
            assert logits.shape == (16 * 16, 4)
            assert np.all(np.isfinite(logits))
    assert all(np.all(np.isfinite(p.values)) for p in model.parameters())


def test_non_finite_loss_aborts():
    model = tiny_model('kmeansvq')
    images = tiny_images(4)
    model.decoder.head[-1].bias.values[...] = np.inf
    with pytest.raises(NumericalError):
        vqvae_step(images, model, dc.Adam(model.parameters()), 0)


def test_features_leave_mode_and_schedule_alone():
    model = tiny_model('hypervq').train()
    step = model.quantizer.schedule.step
    features = model.features(DiffTensor(tiny_images(2)))
    assert features.shape == (2, 2, 4, 4)
    assert not features.requires_grad
    assert model.quantizer.mode == 'train'
    assert model.quantizer.schedule.step == step


def test_extract_embeddings_layout():
    model = tiny_model('kmeansvq')
    embeddings = extract_embeddings(model, tiny_images(5), batch_size=2)
    assert embeddings.latents.shape == (5 * 16, 2)
    assert embeddings.projected.shape == (5 * 16, 2)
    assert np.all(np.linalg.norm(embeddings.projected, axis=1) < 1)
    assert embeddings.sample_index.tolist() == np.repeat(np.arange(5), 16).tolist()
    assert embeddings.usage_counts.sum() == 80


def test_state_dict_roundtrip_through_checkpoint_bytes():
    model = tiny_model('hyperembmatvq', seed=0)
    train_vqvae(model, tiny_images(), np.random.default_rng(2), batch_size=8, max_steps=2)
    state, _ = decode_checkpoint(encode_checkpoint(model.state_dict()))
    restored = tiny_model('hyperembmatvq', seed=5)
    restored.load_state_dict(state)
    images = tiny_images(3)
    model.eval()
    restored.eval()
    assert np.array_equal(model.reconstruct(images), restored.reconstruct(images))
    assert restored.quantizer.schedule.step == model.quantizer.schedule.step


class FixedFeatures(Module):
    """Backbone stand-in whose features are its input"""

    def __init__(self):
        self.scale = DiffTensor(np.ones(1))

    def features(self, x):
        return DiffTensor(x.values * self.scale.values)


def separable(n_per=10):
    rng = np.random.default_rng(3)
    labels = np.repeat([0, 1], n_per)
    features = np.zeros((2 * n_per, 2, 3, 3))
    features[labels == 0, 0] = 1.0
    features[labels == 1, 1] = 1.0
    features += 0.05 * rng.standard_normal(features.shape)
    return features, labels


def test_classifier_head_logit_width(rng):
    head = ClassifierHead(2, 8, 5, rng)
    assert head(DiffTensor(rng.random((3, 2, 4, 4)))).shape == (3, 5)


def test_classifier_learns_separable_features():
    backbone = FixedFeatures()
    features, labels = separable()
    head = ClassifierHead(2, 8, 2, np.random.default_rng(0))
    optimizer = dc.Adam(head.parameters(), learning_rate=1e-2)
    for step in range(200):
        classifier_step(features, labels, backbone, head, optimizer, step)
    assert evaluate_classifier(backbone, head, features, labels) >= 0.95


def test_classifier_rejects_unfrozen_backbone():
    backbone = FixedFeatures()
    backbone.scale.requires_grad = True
    features, labels = separable(2)
    head = ClassifierHead(2, 4, 2, np.random.default_rng(0))
    with pytest.raises(FrozenParameterError):
        check_frozen(backbone)
    with pytest.raises(FrozenParameterError):
        classifier_step(features, labels, backbone, head, dc.Adam(head.parameters()))


def test_frozen_vqvae_backbone_is_untouched():
    model = tiny_model('hypervq')
    model.freeze()
    before = {k: v.copy() for k, v in model.state_dict().items()}
    images = tiny_images(9)
    labels = np.arange(9) % 3
    head = ClassifierHead(2, 4, 3, np.random.default_rng(0))
    epochs = []
    train_classifier(model, head, images, labels, np.random.default_rng(0), epochs=2, batch_size=4,
                     epoch_callback=lambda epoch, loss, acc: epochs.append((epoch, loss, acc)))
    after = model.state_dict()
    assert before.keys() == after.keys()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert [e[0] for e in epochs] == [1, 2]


def test_classifier_separates_mixture_codes():
    mixture = synth_mixture(3, 60, 4, separation=8.0, rng=np.random.default_rng(7))
    codes = mixture.points[:, :, None, None]
    train, test = np.arange(len(codes)) % 2 == 0, np.arange(len(codes)) % 2 == 1
    backbone = FixedFeatures()
    head = ClassifierHead(4, 16, 3, np.random.default_rng(0))
    epochs = []
    train_classifier(backbone, head, codes[train], mixture.labels[train], np.random.default_rng(1), epochs=60,
                     batch_size=16, learning_rate=1e-2,
                     epoch_callback=lambda epoch, loss, acc: epochs.append(acc))
    assert epochs[-1] >= 0.95
    assert evaluate_classifier(backbone, head, codes[test], mixture.labels[test]) > 0.95
