import numpy as np
import pytest

from morphgen.autodiff import Tensor, shadow_f64
from morphgen.errors import ShapeError
from morphgen.vqgan import (
    VQGAN,
    VqganConfig,
    discriminator_loss,
    reconstruction_loss,
    train_vqgan,
    vqgan_losses,
)
from morphgen.vq import vq_losses
from morphgen.volume import CellVolume


def small_config(**kw):
    base = dict(cube=16, n_z=4, codebook_size=32, widths=(4, 4, 8), disc_widths=(4, 4, 4), steps=6, seed=3)
    base.update(kw)
    return VqganConfig(**base)


def random_volumes(n, cube=16, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 2, cube, cube, cube)).astype(np.float32)


def test_cube_32_gives_8_cubed_latents():
    model = VQGAN(small_config(cube=32, n_z=16))
    lat = model.encode(CellVolume(random_volumes(1, 32)[0]))
    assert lat.cytoplasm.shape == (16, 8, 8, 8)
    assert lat.nucleus.shape == (16, 8, 8, 8)


def test_channel_independence():
    model = VQGAN(small_config())
    a = random_volumes(1, seed=1)[0]
    b = a.copy()
    b[1] = random_volumes(1, seed=2)[0, 1]
    la, lb = model.encode(CellVolume(a)), model.encode(CellVolume(b))
    assert np.array_equal(la.cytoplasm, lb.cytoplasm)
    assert not np.array_equal(la.nucleus, lb.nucleus)


def test_background_volume_has_uniform_interior_latents():
    # zero padding reaches five latent voxels in, so a 16^3 latent grid is needed
    model = VQGAN(small_config(cube=64))
    lat = model.encode(CellVolume(-np.ones((2, 64, 64, 64))))
    assert np.isfinite(lat.cytoplasm).all()
    inner = lat.cytoplasm[:, 5:-5, 5:-5, 5:-5].reshape(4, -1)
    assert np.all(inner == inner[:, :1])


def test_round_trip_shape_and_bounded_output():
    model = VQGAN(small_config())
    x = CellVolume(random_volumes(1)[0])
    assert model.decode(model.encode(x)).data.shape == x.data.shape
    z = np.random.default_rng(0).standard_normal((1, 2, 4, 4, 4, 4)) * 10
    out = model.decode_latents(z, quantize_first=False)
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_unpreprocessed_input_rejected():
    model = VQGAN(small_config())
    with pytest.raises(ShapeError):
        model.encode(CellVolume(np.full((2, 16, 16, 16), 3.0)))
    with pytest.raises(ShapeError):
        model.decode_latents(np.zeros((1, 2, 4, 5, 5, 5)))


def test_reconstruction_loss_equal_inputs_is_zero():
    x = Tensor(random_volumes(2, 4))
    assert float(reconstruction_loss(x, x).data) == 0.0


def test_reconstruction_loss_matches_channel_mean_of_mse():
    rng = np.random.default_rng(5)
    x, y = rng.standard_normal((2, 3, 2, 5, 5, 5))
    m0 = float(((x[:, 0] - y[:, 0]) ** 2).mean())
    m1 = float(((x[:, 1] - y[:, 1]) ** 2).mean())
    with shadow_f64():
        got = float(reconstruction_loss(Tensor(x), Tensor(y)).data)
    assert got == pytest.approx((m0 + m1) / 2, rel=1e-12)


def test_hinge_real_at_one_contributes_nothing():
    ones = Tensor(np.ones((1, 1, 2, 2, 2)))
    very_negative = Tensor(-np.ones((1, 1, 2, 2, 2)))
    assert float(discriminator_loss(ones, very_negative).data) == 0.0
    assert float(discriminator_loss(ones, ones, paper_literal_hinge=True).data) == 0.0
    assert float(discriminator_loss(ones, ones).data) == pytest.approx(1.0)


def test_vqgan_losses_keys_and_totals():
    model = VQGAN(small_config())
    x = random_volumes(1)
    z = model.encode_batch(x)
    zq, res, rows = model.quantize_batch(z, count=False)
    vq = vq_losses(rows, [r.selected for r in res])
    x_hat = model.decode_batch(zq)
    out = vqgan_losses(x, x_hat, model.disc, vq, disc_weight=0.1)
    want = out["L_rec"].item() + out["L_comm"].item() + 0.1 * out["L_gen"].item() + vq["codebook_loss"].item()
    assert out["total_G"].item() == pytest.approx(want, rel=1e-5)
    assert out["total_D"].item() == out["L_disc"].item()


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train_vqgan(np.zeros((0, 2, 16, 16, 16)), small_config())


def test_training_is_deterministic():
    data = random_volumes(4)
    a = train_vqgan(data, small_config(), progress_every=0).train_log
    b = train_vqgan(data, small_config(), progress_every=0).train_log
    assert a == b
    assert any(r[3] != 0.0 for r in a)


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    model = train_vqgan(random_volumes(3), small_config(steps=3), progress_every=0)
    model.save(str(tmp_path / "m"))
    back = VQGAN.load(str(tmp_path / "m"))
    back.save(str(tmp_path / "n"))
    for ext in (".mfwt", ".mfos", ".cfg"):
        assert (tmp_path / f"m{ext}").read_bytes() == (tmp_path / f"n{ext}").read_bytes()
    x = random_volumes(1, seed=9)
    assert np.array_equal(model.reconstruct(x), back.reconstruct(x))


def test_config_text_round_trip():
    cfg = small_config(codebook_update="ema", paper_literal_hinge=True)
    assert VqganConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ValueError):
        small_config(cube=18)
