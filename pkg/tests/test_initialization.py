"""Content-adaptive seeding of the initial primitive cloud."""

import numpy as np
import pytest

from conftest import make_stack
from gsvr.errors import InvalidParameterError
from gsvr.initialization import (InitConfig, gradient_magnitude, init_field,
                                 sample_init_positions)
from gsvr.motion import build_point_batch


def test_positions_are_masked_pixel_centers():
    stack = make_stack(nx=8, ny=7, n_slices=3, seed=1)
    cfg = InitConfig(n_gaussians=200, seed=0)
    pos = sample_init_positions([stack], cfg)
    assert pos.shape == (200, 3)
    batch = build_point_batch([stack])
    # Every sampled position coincides with some lifted masked pixel.
    d2 = np.min(np.sum((pos[:, None, :] - batch.lifted[None]) ** 2, axis=2), axis=1)
    assert np.max(d2) < 1e-20


def test_sampling_is_seed_deterministic():
    stack = make_stack(seed=2)
    a = sample_init_positions([stack], InitConfig(n_gaussians=64, seed=5))
    b = sample_init_positions([stack], InitConfig(n_gaussians=64, seed=5))
    c = sample_init_positions([stack], InitConfig(n_gaussians=64, seed=6))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_gradient_magnitude_prefers_edges():
    # Left half 0, right half 1: mass concentrates on the step column.
    data = np.zeros((10, 10, 1))
    data[5:, :, :] = 1.0
    stack = make_stack(nx=10, ny=10, n_slices=1)
    stack.data = data
    grad = gradient_magnitude(stack)
    assert grad[4:6, :, 0].min() > 0.4
    assert grad[0:3, :, 0].max() == 0.0

    cfg = InitConfig(n_gaussians=500, lambda_init=0.0, seed=0)
    pos = sample_init_positions([stack], cfg)
    x_pixel = (pos[:, 0] - stack.affine[0, 3]) / stack.affine[0, 0]
    assert np.all((x_pixel > 3.5) & (x_pixel < 6.5))


def test_lambda_init_blends_toward_uniform():
    data = np.zeros((10, 10, 1))
    data[5:, :, :] = 1.0
    stack = make_stack(nx=10, ny=10, n_slices=1)
    stack.data = data
    cfg = InitConfig(n_gaussians=2000, lambda_init=1.0, seed=0)
    pos = sample_init_positions([stack], cfg)
    x_pixel = (pos[:, 0] - stack.affine[0, 3]) / stack.affine[0, 0]
    # Uniform sampling reaches flat regions the gradient weighting never would.
    assert (x_pixel < 3.5).sum() > 300


def test_flat_image_falls_back_to_uniform():
    stack = make_stack(nx=6, ny=6, n_slices=1)
    stack.data = np.full((6, 6, 1), 0.5)
    with pytest.warns(UserWarning):
        pos = sample_init_positions([stack], InitConfig(n_gaussians=50, seed=0))
    assert pos.shape == (50, 3)


def test_init_field_parameters():
    stack = make_stack(seed=3)
    cfg = InitConfig(n_gaussians=40, seed=1, initial_scale=1.6)
    pos = sample_init_positions([stack], cfg)
    field = init_field(pos, [stack], cfg)
    assert field.count == 40
    np.testing.assert_allclose(field.scales(), 1.6, rtol=1e-12)
    np.testing.assert_array_equal(field.quaternions[:, 0], 1.0)
    np.testing.assert_array_equal(field.quaternions[:, 1:], 0.0)
    np.testing.assert_array_equal(field.means, pos)


def test_source_intensity_policy_reads_the_source_pixel():
    stack = make_stack(nx=5, ny=4, n_slices=2, seed=4)
    cfg = InitConfig(n_gaussians=30, seed=2, intensity_policy="source")
    pos = sample_init_positions([stack], cfg)
    field = init_field(pos, [stack], cfg)
    batch = build_point_batch([stack])
    # Each intensity equals the observed value at the matching lifted pixel.
    for mu, c in zip(field.means, field.intensities):
        j = np.argmin(np.sum((batch.lifted - mu) ** 2, axis=1))
        assert abs(c - batch.intensities[j]) < 1e-12


def test_mean_intensity_policy():
    stack = make_stack(seed=5)
    cfg = InitConfig(n_gaussians=10, seed=0, intensity_policy="mean")
    pos = sample_init_positions([stack], cfg)
    field = init_field(pos, [stack], cfg)
    np.testing.assert_allclose(field.intensities,
                               stack.data[stack.mask].mean(), rtol=1e-12)


def test_config_validation():
    with pytest.raises(InvalidParameterError):
        InitConfig(n_gaussians=0)
    with pytest.raises(InvalidParameterError):
        InitConfig(lambda_init=1.5)
    with pytest.raises(InvalidParameterError):
        InitConfig(initial_scale=0.0)
    with pytest.raises(InvalidParameterError):
        InitConfig(intensity_policy="median")
