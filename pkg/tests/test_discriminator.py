import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nsggan.discriminator import Discriminator, patch_grid

# four 4x4 stride (2, 2, 2, 1) stages plus a 4x4 stride-1 head, padding 1 everywhere
JUMP, OFFSET, FIELD = 8, 1 + 2 + 4 + 8 + 8, 1 + 3 * (1 + 2 + 4 + 8 + 8)


def covers(u: int, pixel: int) -> bool:
    lo = JUMP * u - OFFSET
    return lo <= pixel < lo + FIELD


@pytest.mark.parametrize("size,grid", [(64, 6), (128, 14), (256, 30)])
def test_patch_grid(size, grid):
    assert patch_grid(size) == grid
    assert Discriminator(4)(torch.zeros(1, 3, size, size)).realism_map.shape == (1, 1, grid, grid)


def test_receptive_field_is_70():
    assert FIELD == 70


def test_dead_network_outputs_bias():
    d = Discriminator(4)
    with torch.no_grad():
        for p in d.parameters():
            p.zero_()
        d.patch.bias.fill_(0.3)
        d.age.bias.fill_(-0.2)
    out = d(torch.randn(2, 3, 64, 64))
    assert torch.allclose(out.realism_map, torch.full_like(out.realism_map, 0.3))
    assert torch.allclose(out.age_estimate, torch.full((2,), -0.2))


@given(st.integers(0, 63), st.integers(0, 63), st.integers(0, 100))
@settings(max_examples=15, deadline=None)
def test_single_pixel_perturbation_is_local(row, col, seed):
    torch.manual_seed(seed)
    d = Discriminator(4)
    x = torch.rand(1, 3, 64, 64) * 2 - 1
    y = x.clone()
    y[0, :, row, col] += 0.7
    with torch.no_grad():
        a, b = d(x).realism_map[0, 0], d(y).realism_map[0, 0]
    for u in range(a.shape[0]):
        for v in range(a.shape[1]):
            if not (covers(u, row) and covers(v, col)):
                assert a[u, v] == b[u, v]


def test_gradient_support_matches_field():
    torch.manual_seed(0)
    d = Discriminator(4)
    x = torch.randn(1, 3, 64, 64, requires_grad=True)
    d(x).realism_map[0, 0, 2, 3].backward()
    support = x.grad[0].abs().sum(0) > 0
    rows, cols = torch.nonzero(support, as_tuple=True)
    assert rows.min() >= 2 * JUMP - OFFSET and rows.max() < 2 * JUMP - OFFSET + FIELD
    assert cols.min() >= 3 * JUMP - OFFSET and cols.max() < 3 * JUMP - OFFSET + FIELD


@pytest.mark.parametrize("size", [32, 64, 128])
def test_age_head_is_scalar(size):
    assert Discriminator(4)(torch.zeros(3, 3, size, size)).age_estimate.shape == (3,)


def test_projection_starts_unconditioned_and_needs_groups():
    torch.manual_seed(0)
    plain = Discriminator(4)
    torch.manual_seed(0)
    cond = Discriminator(4, n_groups=4)
    x = torch.randn(2, 3, 64, 64)
    assert torch.equal(cond(x, torch.tensor([0, 3])).realism_map, plain(x).realism_map)
    with pytest.raises(ValueError):
        cond(x)


def test_projection_changes_only_realism_and_stays_local():
    torch.manual_seed(1)
    d = Discriminator(4, n_groups=4)
    torch.nn.init.normal_(d.group_embed.weight)
    x = torch.rand(1, 3, 64, 64) * 2 - 1
    a, b = d(x, torch.tensor([0])), d(x, torch.tensor([3]))
    assert not torch.equal(a.realism_map, b.realism_map)
    assert torch.equal(a.age_estimate, b.age_estimate)
    y = x.clone()
    y[0, :, 5, 60] += 0.7
    with torch.no_grad():
        u, v = d(x, torch.tensor([2])).realism_map[0, 0], d(y, torch.tensor([2])).realism_map[0, 0]
    for i in range(u.shape[0]):
        for j in range(u.shape[1]):
            if not (covers(i, 5) and covers(j, 60)):
                assert u[i, j] == v[i, j]


def test_spectral_norm_bounds_weights():
    d = Discriminator(4, spectral_norm=True)
    d.train()
    x = torch.randn(2, 3, 64, 64)
    for _ in range(20):
        d(x)
    w = d.trunk[0].weight.reshape(d.trunk[0].weight.shape[0], -1)
    assert torch.linalg.matrix_norm(w, ord=2) <= 1.05
