import numpy as np
import pytest
import torch

from tubemae.errors import ConfigError
from tubemae.model import (
    DecoderConfig,
    EncoderConfig,
    ModelConfig,
    VideoClassifier,
    VideoPretrainModel,
    count_parameters,
)
from tubemae.tokenization import make_tube_mask, patchify, unpatchify


def vit_params(layers, dim, mlp_ratio, in_dim):
    """Closed-form parameter count of a pre-norm ViT encoder without class token."""
    hidden = dim * mlp_ratio
    block = 4 * dim + (dim * 3 * dim + 3 * dim) + (dim * dim + dim) + (dim * hidden + hidden) + (hidden * dim + dim)
    return in_dim * dim + dim + layers * block + 2 * dim


def decoder_params(enc_dim, dim, layers, out_dim):
    return enc_dim * dim + dim + dim + vit_params(layers, dim, 4, 0) - dim + dim * out_dim + out_dim


def test_encoder_count_matches_closed_form():
    cfg = ModelConfig.vit_b()
    assert count_parameters(cfg, "encoder") == vit_params(12, 768, 4, 1536)


def test_vit_b_counts_within_tolerance():
    cfg = ModelConfig.vit_b()
    enc = count_parameters(cfg, "encoder")
    total = count_parameters(cfg, "all")
    assert abs(enc - 87.4e6) / 87.4e6 <= 0.015
    assert abs(total - 100.8e6) / 100.8e6 <= 0.03
    expected = (
        vit_params(12, 768, 4, 1536)
        + decoder_params(768, 384, 4, 1536)
        + decoder_params(768, 384, 2, 1024)
    )
    assert total == expected


def test_toy_count_frozen():
    assert count_parameters(ModelConfig.toy()) == 1_841_664
    assert count_parameters(ModelConfig.toy(), "encoder", n_classes=4) == count_parameters(ModelConfig.toy(), "encoder") + 128 * 4 + 4


def test_count_unknown_part():
    with pytest.raises(ConfigError):
        count_parameters(ModelConfig.toy(), "head")


def test_config_validation_and_round_trip():
    with pytest.raises(ConfigError):
        EncoderConfig(layers=2, dim=130, heads=4)
    cfg = ModelConfig.toy()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.fingerprint() == ModelConfig.toy().fingerprint()
    assert cfg.fingerprint() != ModelConfig.toy(distill_out_dim=32).fingerprint()


def _clip_and_mask(b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    clips = torch.randn(b, 16, 64, 64, 3, generator=g)
    masks = [make_tube_mask(4, 4, 0.85, seed + i) for i in range(b)]
    return clips, masks


def test_forward_shapes():
    model = VideoPretrainModel(ModelConfig.toy())
    clips, masks = _clip_and_mask()
    vis = np.stack([m.visible_index(8) for m in masks])
    latents, recon, distill = model(clips, vis)
    assert latents.shape == (2, 24, 128)
    assert recon.shape == (2, 128, 1536)
    assert distill.shape == (2, 128, 64)
    assert model(clips, vis, with_distill=False)[2] is None


def test_encoder_ignores_masked_cubes():
    model = VideoPretrainModel(ModelConfig.toy()).double()
    clips, masks = _clip_and_mask(1)
    clips = clips.double()
    vis = masks[0].visible_index(8)[None]
    base, _ = model.encode(clips, vis)
    # overwrite every masked cube with noise; the encoder output must not move
    tm = torch.from_numpy(masks[0].token_mask(8))
    cubes = patchify(clips, (2, 16, 16))
    cubes[0, tm] = torch.randn_like(cubes[0, tm]) * 100
    perturbed = unpatchify(cubes, (8, 4, 4))
    again, _ = model.encode(perturbed, vis)
    assert torch.equal(base, again)


def test_joint_spatiotemporal_attention():
    model = VideoPretrainModel(ModelConfig.toy())
    tokens = model.encoder.patch_embed(torch.zeros(1, 24, 1536))
    pos = torch.zeros_like(tokens)
    _, maps = model.encoder.encode_visible(tokens, pos, return_attention=True)
    assert len(maps) == 4
    for a in maps:
        # every visible token attends over all visible tokens across space and time
        assert a.shape == (1, 4, 24, 24)
        torch.testing.assert_close(a.sum(-1), torch.ones(1, 4, 24))


def test_init_is_seeded():
    a = VideoPretrainModel(ModelConfig.toy(), seed=3).state_dict()
    b = VideoPretrainModel(ModelConfig.toy(), seed=3).state_dict()
    c = VideoPretrainModel(ModelConfig.toy(), seed=4).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)
    assert torch.all(a["encoder.blocks.0.norm1.weight"] == 1)
    assert torch.all(a["encoder.patch_embed.bias"] == 0)


def test_classifier_head():
    model = VideoPretrainModel(ModelConfig.toy())
    clf = VideoClassifier(model.encoder, 5)
    clips, _ = _clip_and_mask()
    assert clf(clips).shape == (2, 5)
    with pytest.raises(ConfigError):
        VideoClassifier(model.encoder, 1)


def test_decoder_config_defaults():
    d = DecoderConfig()
    assert (d.recon_layers, d.distill_layers, d.decoder_dim) == (4, 2, 384)
