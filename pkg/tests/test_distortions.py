import math
import sys

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from end2wm import distortions as dist
from end2wm.core import ConfigError, DistortionEntry, DistortionFailedError
from end2wm.evaluation import psnr

ALL_BUILTIN = [
    ("identity", {}),
    ("gaussian_noise", {"std": 0.01}),
    ("gaussian_filter", {"sigma": 2.0}),
    ("color", {}),
    ("rotate", {"deg": 10.0}),
    ("translate", {"dis": 0.05}),
    ("scale", {"f": 0.65}),
    ("shear", {"deg": 10.0}),
    ("crop", {"p": 0.1}),
    ("dropout", {"p": 0.5}),
    ("cropout", {"p": 0.5}),
    ("jpeg_real", {"quality": 50}),
]


@pytest.mark.parametrize("name,params", ALL_BUILTIN)
def test_shape_and_range_preserved(name, params, rand_images):
    d = dist.make_distortion(name, **params)
    out = dist.apply_blocked(d, rand_images, seed=3, cover=rand_images.flip(0))
    assert out.shape == rand_images.shape
    assert out.min() >= 0 and out.max() <= 1


@pytest.mark.parametrize("name,params", ALL_BUILTIN)
def test_deterministic_given_seed(name, params, rand_images):
    d = dist.make_distortion(name, **params)
    cover = rand_images.flip(0)
    a = dist.apply_blocked(d, rand_images, seed=11, cover=cover)
    b = dist.apply_blocked(d, rand_images, seed=11, cover=cover)
    assert torch.equal(a, b)


@pytest.mark.parametrize("name,params", ALL_BUILTIN)
def test_gradient_barrier(name, params, rand_images):
    x_hat = rand_images.clone().requires_grad_(True)
    y = x_hat * 1.0  # non-leaf, like an encoder output
    out = dist.apply_blocked(dist.make_distortion(name, **params), y, seed=1, cover=rand_images)
    assert not out.requires_grad
    loss = (out**2).sum() + 0.0 * y.sum()
    loss.backward()
    assert torch.count_nonzero(x_hat.grad) == 0


def test_gradient_barrier_finite_difference(rand_images):
    # perturbing x_hat changes the forward value, but the blocked path reports zero slope
    d = dist.make_distortion("gaussian_filter", sigma=2.0)
    x_hat = rand_images.double().requires_grad_(True)
    loss = dist.apply_blocked(d, x_hat, seed=0).sum() + 0.0 * x_hat.sum()
    (g,) = torch.autograd.grad(loss, x_hat)
    assert float(g.abs().max()) == 0.0
    eps = 1e-4
    bumped = x_hat.detach().clone()
    bumped[0, 0, 5, 5] += eps
    fd = (dist.apply_blocked(d, bumped, seed=0).sum() - dist.apply_blocked(d, x_hat.detach(), seed=0).sum()) / eps
    assert abs(float(fd)) > 0.1  # the op is not constant, the zero comes from the barrier


def test_identity_is_exact():
    x = torch.rand(2, 3, 16, 16)
    assert torch.equal(dist.apply_blocked(dist.make_distortion("identity"), x), x)


def test_gaussian_noise_half_normal_mean():
    std = 0.01
    x = torch.full((64, 3, 32, 32), 0.5)
    out = dist.apply_blocked(dist.make_distortion("gaussian_noise", std=std), x, seed=0)
    expected = std * math.sqrt(2 / math.pi)
    # Monte-Carlo oracle from an independent generator
    mc = np.abs(np.random.default_rng(0).normal(0, std, 200_000)).mean()
    assert abs(mc - expected) / expected < 0.01
    assert abs(float((out - x).abs().mean()) - expected) / expected < 0.10


def test_jpeg_q100_high_psnr(natural_batch):
    out = dist.apply_blocked(dist.make_distortion("jpeg_real", quality=100), natural_batch)
    assert psnr(natural_batch, out) >= 40.0


def test_jpeg_q50_lossy_and_deterministic(natural_batch):
    d = dist.make_distortion("jpeg_real", quality=50)
    a = dist.apply_blocked(d, natural_batch)
    b = dist.apply_blocked(d, natural_batch)
    assert torch.equal(a, b)
    assert not torch.equal(a, natural_batch)
    assert math.isfinite(psnr(natural_batch, a))


@pytest.mark.parametrize("q", [0, 101, 50.5])
def test_jpeg_quality_range(q):
    with pytest.raises(ConfigError):
        dist.make_distortion("jpeg_real", quality=q)


def test_rotate_zero_and_scale_one_are_identity(rand_images):
    for d in (dist.make_distortion("rotate", deg=0.0), dist.make_distortion("scale", f=1.0)):
        out = dist.apply_blocked(d, rand_images)
        assert float((out - rand_images).abs().max()) < 1e-6


def test_rotate_360_grid_interpolation_identity_small_angle():
    # zero-angle through the resampling path (not the shortcut) is still exact up to interpolation
    x = torch.rand(1, 3, 16, 16)
    theta = torch.tensor([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
    assert float((dist._affine(x, theta) - x).abs().max()) < 1e-6


@pytest.mark.parametrize("name,params", [("rotate", {"deg": 50}), ("translate", {"dis": 0.6}), ("scale", {"f": 0.0}), ("scale", {"f": 2.5}), ("crop", {"p": 0.0}), ("crop", {"p": 1.5})])
def test_geometric_param_ranges(name, params):
    with pytest.raises(ConfigError):
        dist.make_distortion(name, **params)


@pytest.mark.parametrize("h,w,p", [(32, 32, 0.1), (128, 128, 0.1), (17, 29, 0.37), (16, 16, 1.0)])
def test_crop_keeps_exact_pixel_count(h, w, p):
    x = torch.rand(3, 3, h, w) * 0.9 + 0.05  # strictly positive
    out = dist.apply_blocked(dist.make_distortion("crop", p=p), x, seed=2)
    expected = math.ceil(p * h * w)
    for img in out:
        kept = int((img.abs().sum(0) > 0).sum())
        assert kept == expected


def test_dropout_full_replacement_equals_cover(rand_images):
    cover = torch.rand_like(rand_images)
    out = dist.apply_blocked(dist.make_distortion("dropout", p=1.0), rand_images, cover=cover)
    assert torch.equal(out, cover)


def test_dropout_half_fraction():
    x = torch.zeros(1, 3, 128, 128)
    cover = torch.ones_like(x)
    out = dist.apply_blocked(dist.make_distortion("dropout", p=0.5), x, seed=4, cover=cover)
    frac = float((out[0, 0] == 1).double().mean())
    assert abs(frac - 0.5) <= 0.02


@pytest.mark.parametrize("name", ["dropout", "cropout"])
def test_masking_pixels_from_either_source(name, rand_images):
    cover = torch.rand_like(rand_images)
    out = dist.apply_blocked(dist.make_distortion(name, p=0.4), rand_images, seed=9, cover=cover)
    from_cover = (out == cover).all(1)
    from_wm = (out == rand_images).all(1)
    assert bool((from_cover | from_wm).all())


@pytest.mark.parametrize("name", ["dropout", "cropout"])
def test_masking_needs_cover(name, rand_images):
    with pytest.raises(ConfigError):
        dist.apply_blocked(dist.make_distortion(name), rand_images)


def test_cropout_single_rectangle():
    x = torch.zeros(2, 3, 32, 32)
    out = dist.apply_blocked(dist.make_distortion("cropout", p=0.3), x, seed=5, cover=torch.ones_like(x))
    for img in out:
        mask = img[0] == 1
        rows = torch.nonzero(mask.any(1)).flatten()
        cols = torch.nonzero(mask.any(0)).flatten()
        box = mask[rows.min() : rows.max() + 1, cols.min() : cols.max() + 1]
        assert bool(box.all()) and int(mask.sum()) == box.numel()


def test_color_factor_bounds():
    x = torch.full((8, 3, 16, 16), 0.5)
    out = dist.apply_blocked(dist.make_distortion("color"), x, seed=1)
    # grey input: only brightness acts, factor in [0.8, 1.2]
    assert float(out.min()) >= 0.4 - 1e-6 and float(out.max()) <= 0.6 + 1e-6


# -- external commands ------------------------------------------------------

PY = sys.executable


def test_external_copy_is_identity(natural_batch):
    d = dist.make_distortion("external", command=f"cp {{input}} {{output}}")
    out = dist.apply_blocked(d, natural_batch)
    q = (natural_batch * 255).round() / 255
    assert torch.equal(out, q)


def test_external_wrong_dimensions_fails(natural_batch, tmp_path):
    script = tmp_path / "shrink.py"
    script.write_text(
        "import sys\nfrom PIL import Image\n"
        "im = Image.open(sys.argv[1]); im.resize((im.width // 2, im.height // 2)).save(sys.argv[2])\n"
    )
    d = dist.make_distortion("external", command=f"{PY} {script} {{input}} {{output}}")
    with pytest.raises(DistortionFailedError, match="external"):
        dist.apply_blocked(d, natural_batch[:2])


def test_external_nonzero_exit_fails(natural_batch):
    d = dist.make_distortion("external", command=f"{PY} -c 'import sys; sys.exit(3)' {{input}} {{output}}")
    with pytest.raises(DistortionFailedError, match="exit code 3"):
        dist.apply_blocked(d, natural_batch[:1])


def test_external_command_template_checked():
    with pytest.raises(ConfigError):
        dist.make_distortion("external", command="cp a b")


def test_external_jpeg_matches_internal_codec(natural_batch, tmp_path):
    script = tmp_path / "jpeg.py"
    script.write_text(
        "import io, sys\nfrom PIL import Image\n"
        "im = Image.open(sys.argv[1]).convert('RGB'); buf = io.BytesIO()\n"
        "im.save(buf, format='JPEG', quality=50); buf.seek(0)\n"
        "Image.open(buf).convert('RGB').save(sys.argv[2])\n"
    )
    ext = dist.make_distortion("external", command=f"{PY} {script} {{input}} {{output}}")
    internal = dist.make_distortion("jpeg_real", quality=50)
    assert torch.equal(dist.apply_blocked(ext, natural_batch), dist.apply_blocked(internal, natural_batch))


# -- suites -------------------------------------------------------------------


def test_sample_suite_single_entry():
    suite = dist.DistortionSuite.from_entries([DistortionEntry("gaussian_noise", {"std": 0.02})])
    assert all(dist.sample_suite(suite, s).name == "gaussian_noise" for s in range(50))


@pytest.mark.parametrize("weights,expected", [((1, 1), 0.5), ((3, 1), 0.75)])
def test_sample_suite_frequencies(weights, expected):
    suite = dist.DistortionSuite.from_entries(
        [DistortionEntry("identity", weight=weights[0]), DistortionEntry("color", weight=weights[1])]
    )
    draws = [dist.sample_suite(suite, s).name for s in range(10_000)]
    assert abs(draws.count("identity") / 10_000 - expected) <= 0.02


def test_sample_suite_fixed_mode_round_robin():
    suite = dist.DistortionSuite.from_entries([DistortionEntry("identity"), DistortionEntry("color")], mode="fixed")
    assert [dist.sample_suite(suite, 0, step=i).name for i in range(4)] == ["identity", "color"] * 2


def test_empty_suite_rejected():
    with pytest.raises(ConfigError):
        dist.DistortionSuite.from_entries([])


def test_unknown_distortion():
    with pytest.raises(ConfigError):
        dist.make_distortion("print_scan")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([n for n, _ in ALL_BUILTIN if n != "jpeg_real"]))
def test_blocked_output_pure_function_of_seed(seed, name):
    x = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(1))
    d = dist.make_distortion(name)
    assert torch.equal(dist.apply_blocked(d, x, seed, cover=x.flip(0)), dist.apply_blocked(d, x, seed, cover=x.flip(0)))
