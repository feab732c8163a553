import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tubemae.errors import ShapeError
from tubemae.tokenization import (
    cube_embed,
    gather_visible,
    grid_shape,
    make_tube_mask,
    patchify,
    positional_table,
    scatter_visible,
    unpatchify,
)


def naive_patchify(clip, cube):
    """Loop oracle: cube (t, h, w) in row-major order, pixels in (dt, dh, dw, c) order."""
    T, H, W, C = clip.shape
    ct, ch, cw = cube
    rows = []
    for t in range(T // ct):
        for h in range(H // ch):
            for w in range(W // cw):
                vec = []
                for dt in range(ct):
                    for dh in range(ch):
                        for dw in range(cw):
                            for c in range(C):
                                vec.append(clip[t * ct + dt, h * ch + dh, w * cw + dw, c])
                rows.append(vec)
    return np.array(rows)


def test_default_clip_token_count():
    assert grid_shape((16, 224, 224, 3)) == (8, 14, 14)
    assert np.prod(grid_shape((16, 224, 224, 3))) == 1568


def test_grid_rejects_indivisible():
    with pytest.raises(ShapeError):
        grid_shape((15, 224, 224, 3))
    with pytest.raises(ShapeError):
        grid_shape((16, 200, 224, 3))


def test_patchify_matches_loop_oracle(rng):
    clip = rng.normal(size=(4, 6, 4, 2))
    cube = (2, 3, 2)
    got = patchify(torch.from_numpy(clip), cube).numpy()
    np.testing.assert_array_equal(got, naive_patchify(clip, cube))


def test_patchify_default_cube_dim():
    cubes = patchify(torch.zeros(2, 16, 64, 64, 3))
    assert cubes.shape == (2, 128, 1536)


@settings(max_examples=30, deadline=None)
@given(
    t=st.integers(1, 3), h=st.integers(1, 3), w=st.integers(1, 3),
    ct=st.integers(1, 2), ch=st.integers(1, 3), cw=st.integers(1, 3), b=st.integers(0, 2),
)
def test_unpatchify_inverts_patchify(t, h, w, ct, ch, cw, b):
    lead = (2,) * b
    clip = torch.randn(*lead, t * ct, h * ch, w * cw, 3)
    cubes = patchify(clip, (ct, ch, cw))
    assert torch.equal(unpatchify(cubes, (t, h, w), (ct, ch, cw)), clip)


def test_cube_embed_projects_each_cube():
    proj = torch.nn.Linear(2 * 16 * 16 * 3, 8)
    clip = torch.randn(4, 32, 48, 3)
    grid = cube_embed(clip, proj)
    assert (grid.t_tokens, grid.h_tokens, grid.w_tokens, grid.dim) == (2, 2, 3, 8)
    assert grid.values.shape == (12, 8)
    torch.testing.assert_close(grid.values[5], proj(patchify(clip)[5]))
    with pytest.raises(ShapeError):
        cube_embed(clip, torch.nn.Linear(10, 8))


# -- tube masks ----------------------------------------------------------------


def test_tube_mask_counts_at_default_ratio():
    m = make_tube_mask(14, 14, 0.85, seed=0)
    assert m.n_masked_spatial == 166
    assert (~m.spatial_mask).sum() == 30
    assert len(m.visible_index(8)) == 240


@settings(max_examples=50, deadline=None)
@given(h=st.integers(1, 16), w=st.integers(1, 16), ratio=st.floats(0, 1), seed=st.integers(0, 2**32), t=st.integers(1, 8))
def test_tube_mask_properties(h, w, ratio, seed, t):
    m = make_tube_mask(h, w, ratio, seed)
    assert m.n_masked_spatial == int(np.floor(ratio * h * w + 1e-9))
    tm = m.token_mask(t).reshape(t, h, w)
    # every time step shares the same spatial pattern
    assert all(np.array_equal(tm[k], m.spatial_mask) for k in range(t))
    vis = m.visible_index(t)
    assert np.all(np.diff(vis) > 0)
    assert len(vis) == t * (h * w - m.n_masked_spatial)


def test_tube_mask_seeded():
    a, b, c = (make_tube_mask(14, 14, 0.85, s) for s in (3, 3, 4))
    assert np.array_equal(a.spatial_mask, b.spatial_mask)
    assert not np.array_equal(a.spatial_mask, c.spatial_mask)


def test_tube_mask_ratio_bounds():
    with pytest.raises(ValueError):
        make_tube_mask(4, 4, 1.5, 0)


def test_tube_mask_positions_roughly_uniform():
    counts = np.zeros((4, 4))
    for s in range(2000):
        counts += make_tube_mask(4, 4, 0.5, s).spatial_mask
    # each position masked with probability 1/2
    assert np.all(np.abs(counts / 2000 - 0.5) < 0.05)


# -- positional table ----------------------------------------------------------


def sincos_oracle(pos, k, band):
    half = band // 2
    omega = 1.0 / 10000 ** ((k // 2) / half)
    return np.sin(pos * omega) if k % 2 == 0 else np.cos(pos * omega)


@pytest.mark.parametrize("dim,bands", [(768, (256, 256, 256)), (128, (44, 42, 42)), (6, (2, 2, 2))])
def test_positional_table_matches_formula(dim, bands):
    t, h, w = 3, 4, 5
    table = positional_table(t, h, w, dim).table
    assert table.shape == (t * h * w, dim)
    rng = np.random.default_rng(dim)
    for _ in range(200):
        n = int(rng.integers(t * h * w))
        col = int(rng.integers(dim))
        pt, rem = divmod(n, h * w)
        ph, pw = divmod(rem, w)
        if col < bands[0]:
            expect = sincos_oracle(pt, col, bands[0])
        elif col < bands[0] + bands[1]:
            expect = sincos_oracle(ph, col - bands[0], bands[1])
        else:
            expect = sincos_oracle(pw, col - bands[0] - bands[1], bands[2])
        assert table[n, col] == pytest.approx(expect, abs=1e-12)


def test_positional_rows_distinct():
    table = positional_table(8, 14, 14, 768).table
    assert len(np.unique(table.round(10), axis=0)) == 1568


@pytest.mark.parametrize("dim", [5, 4, 7])
def test_positional_dim_validation(dim):
    with pytest.raises(ShapeError):
        positional_table(2, 2, 2, dim)


# -- gather / scatter ----------------------------------------------------------


def test_gather_scatter_round_trip():
    vals = torch.randn(3, 10, 4)
    idx = np.stack([np.sort(np.random.default_rng(i).choice(10, 4, replace=False)) for i in range(3)])
    vis = gather_visible(vals, idx)
    assert vis.shape == (3, 4, 4)
    fill = torch.full((4,), -7.0)
    full = scatter_visible(vis, idx, 10, fill)
    for b in range(3):
        mask = np.zeros(10, bool)
        mask[idx[b]] = True
        assert torch.equal(full[b, mask], vals[b, mask])
        assert torch.all(full[b, ~mask] == -7.0)


def test_gather_unbatched_and_errors():
    vals = torch.arange(12.0).reshape(6, 2)
    assert torch.equal(gather_visible(vals, [1, 4]), vals[[1, 4]])
    with pytest.raises(ShapeError):
        gather_visible(vals, [9])
    with pytest.raises(ShapeError):
        gather_visible(torch.zeros(2, 6, 2), np.zeros((3, 2), int))
