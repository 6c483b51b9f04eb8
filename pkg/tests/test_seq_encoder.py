import numpy as np
import pytest
from hypothesis import given, strategies as st

from genreward.gridworld import GridConfig, collect_expert_videos
from genreward.numcore import checksum
from genreward.seq_encoder import (
    N_FRAMES, EncoderConfig, SeqEncoderParams, autoencoder_loss, decode_video, encode_video,
    load_encoder, load_latent, patchify, reconstruction_mse, save_encoder, save_latent,
    train_autoencoder, uniform_sample_frames, unpatchify,
)

SMALL = EncoderConfig(image_size=8, hidden=16, steps=200, batch_size=16)


def test_uniform_sampling_indices():
    seq = np.arange(16)
    np.testing.assert_array_equal(uniform_sample_frames(seq), np.arange(16))
    np.testing.assert_array_equal(uniform_sample_frames(np.array([7])), np.full(16, 7))
    np.testing.assert_array_equal(uniform_sample_frames(np.arange(31)), np.arange(0, 31, 2))
    with pytest.raises(ValueError):
        uniform_sample_frames(np.arange(0))


@given(st.integers(1, 500))
def test_uniform_sampling_endpoints_and_order(L):
    idx = uniform_sample_frames(np.arange(L))
    assert len(idx) == 16 and idx[0] == 0 and idx[-1] == L - 1
    assert np.all(np.diff(idx) >= 0)


def test_patchify_inverse(rng):
    x = rng.random((2, 3, 8, 8))
    np.testing.assert_array_equal(unpatchify(patchify(x, 4), 4, 3), x)


def test_latent_shapes_roundtrip(rng):
    cfg = EncoderConfig()
    enc = SeqEncoderParams.init(cfg, rng)
    z = encode_video(enc, rng.random((16, 3, 24, 24)))
    assert z.shape == cfg.latent_shape == (4, 4, 6, 6)
    assert z.size == 16 // cfg.temporal_stride * cfg.latent_channels * (24 // cfg.spatial_stride) ** 2
    frames = decode_video(enc, z)
    assert frames.shape == (16, 3, 24, 24)
    assert encode_video(enc, frames).shape == z.shape


def test_encode_rejects_wrong_length(rng):
    enc = SeqEncoderParams.init(SMALL, rng)
    with pytest.raises(ValueError):
        encode_video(enc, rng.random((15, 3, 8, 8)))


def test_zero_data_gives_small_latent():
    frames = np.zeros((64, 3, 8, 8), dtype=np.float32)
    enc, _ = train_autoencoder(frames, SMALL, seed=0)
    z = encode_video(enc, frames[:N_FRAMES])
    assert np.linalg.norm(z) < 0.1


def test_encoding_is_deterministic(rng):
    enc = SeqEncoderParams.init(SMALL, rng)
    x = rng.random((16, 3, 8, 8))
    assert encode_video(enc, x).tobytes() == encode_video(enc, x).tobytes()


@pytest.fixture(scope="module")
def trained():
    cfg = GridConfig(side=9, tasks=("red", "green", "blue"))
    episodes = collect_expert_videos(cfg, 40, 0)
    frames = np.concatenate([ep.frames for ep in episodes])
    enc, trace = train_autoencoder(frames, EncoderConfig(), seed=1)
    return enc, episodes, frames, trace


def test_reconstruction_below_threshold(trained):
    enc, _, frames, trace = trained
    assert reconstruction_mse(enc, frames) < 0.02
    assert np.mean(trace[-50:]) < np.mean(trace[:50])


def test_distinct_paths_distinct_latents(trained):
    enc, episodes, _, _ = trained
    a = encode_video(enc, uniform_sample_frames(episodes[0].frames))
    b = encode_video(enc, uniform_sample_frames(episodes[1].frames))
    assert np.linalg.norm(a - b) >= 1e-3


def test_zero_kl_is_plain_mse(rng):
    enc = SeqEncoderParams.init(SMALL, rng)
    x = rng.random((5, 3, 8, 8)).astype(np.float32)
    loss, _ = autoencoder_loss(enc, x, grad=False)
    assert loss == pytest.approx(reconstruction_mse(enc, x), rel=1e-6)


def test_training_reproducible(rng):
    frames = rng.random((40, 3, 8, 8)).astype(np.float32)
    a, _ = train_autoencoder(frames, SMALL, seed=5, steps=30)
    b, _ = train_autoencoder(frames, SMALL, seed=5, steps=30)
    assert checksum(a.arrays()) == checksum(b.arrays())


def test_checkpoint_and_latent_files(tmp_path, rng):
    enc = SeqEncoderParams.init(SMALL, rng)
    save_encoder(tmp_path / "e.nnp", enc)
    back = load_encoder(tmp_path / "e.nnp", SMALL)
    assert checksum(back.arrays()) == checksum(enc.arrays())
    z = rng.standard_normal(SMALL.latent_shape).astype(np.float32)
    save_latent(tmp_path / "z.gvd1", z)
    np.testing.assert_array_equal(load_latent(tmp_path / "z.gvd1"), z)
