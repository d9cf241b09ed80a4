import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from oracles import FLO_2X1_BYTES, FLO_2X1_FIELD, flow_fixtures_64, shift_image
from refbridge import flow
from refbridge.synthetic import textured_image


@pytest.mark.parametrize("fixture", flow_fixtures_64(), ids=lambda f: f[0])
def test_block_matching_equals_brute_force(fixture):
    _, src, dst, block, search = fixture
    est = flow.estimate_flow(src, dst, block, search)
    np.testing.assert_array_equal(est[::block, ::block].astype(np.int64), flow.brute_force_flow(src, dst, block, search))


def test_brute_force_on_32x32_random_texture():
    src = textured_image(32, 32, seed=8)
    dst = textured_image(32, 32, seed=9)
    est = flow.estimate_flow(src, dst, 8, 4)
    np.testing.assert_array_equal(est[::8, ::8].astype(np.int64), flow.brute_force_flow(src, dst, 8, 4))


def test_known_shift_is_recovered_on_interior_blocks():
    src = textured_image(64, 64, seed=1)
    dst = shift_image(src, -5, -3)  # src[y, x] == dst[y - 3, x - 5]
    est = flow.estimate_flow(src, dst, 16, 8)
    assert np.all(est[16:48, 16:48] == [-5, -3])


def test_identity_gives_zero_flow():
    img = textured_image(48, 40, seed=2)
    assert not flow.estimate_flow(img, img, 16, 6).any()


def test_flow_is_replicated_over_blocks_and_ragged_edges():
    src = textured_image(40, 40, seed=4)
    est = flow.estimate_flow(src, shift_image(src, 2, 1), 16, 4)
    assert est.shape == (40, 40, 2)
    np.testing.assert_array_equal(est[32:, 32:], np.broadcast_to(est[31, 31], (8, 8, 2)))


def test_estimate_flow_errors():
    with pytest.raises(ValueError):
        flow.estimate_flow(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(ValueError):
        flow.estimate_flow(np.zeros((8, 8)), np.zeros((8, 8)), block=16)


def test_synthetic_fields():
    np.testing.assert_array_equal(flow.synthetic_flow("translation", (3, -2), 4, 5)[..., 0], 3)
    np.testing.assert_array_equal(flow.synthetic_flow("translation", (3, -2), 4, 5)[..., 1], -2)
    assert not flow.synthetic_flow("rotation", 0.0, 6, 6).any()
    s, h, w = 1.25, 9, 13
    z = flow.synthetic_flow("zoom", s, h, w)
    dist = np.hypot((w - 1) / 2, (h - 1) / 2)
    assert abs(np.hypot(*z[0, 0]) - (s - 1) * dist) < 1e-6
    with pytest.raises(ValueError):
        flow.synthetic_flow("shear", 1.0, 4, 4)


def test_warp_identities(rng):
    img = rng.random((10, 12, 3)).astype(np.float32)
    np.testing.assert_array_equal(flow.warp(img, np.zeros((10, 12, 2))), img)
    const = np.full((10, 12, 3), 0.3, np.float32)
    np.testing.assert_array_equal(flow.warp(const, flow.synthetic_flow("translation", (2, -3), 10, 12)), const)
    with pytest.raises(ValueError):
        flow.warp(img, np.zeros((9, 12, 2)))


def test_warp_inverts_an_integer_shift():
    src = textured_image(64, 64, seed=5).astype(np.float32)
    dst = shift_image(src, 4, -3)
    est = flow.estimate_flow(src, dst, 16, 8)
    back = flow.warp(dst, est)
    err = np.mean((back[16:-16, 16:-16] - src[16:-16, 16:-16]) ** 2)  # blocks whose match stays inside
    assert err == 0 or 10 * np.log10(1 / err) > 40


def test_warp_matrix_matches_warp(rng):
    img = rng.random((5, 6, 2))
    fl = rng.normal(0, 1.5, (5, 6, 2))
    m = flow.warp_matrix(fl)
    np.testing.assert_allclose(m @ img.reshape(30, 2), flow.warp(img, fl).reshape(30, 2), atol=1e-12)
    np.testing.assert_allclose(m.sum(1), 1)


def test_downscale_flow():
    np.testing.assert_array_equal(flow.downscale_flow(np.broadcast_to([8.0, 4.0], (8, 8, 2)), 4), np.full((2, 2, 2), [2, 1]))
    assert not flow.downscale_flow(np.zeros((4, 4, 2)), 2).any()
    checker = np.zeros((4, 4, 2))
    checker[(np.indices((4, 4)).sum(0) % 2) == 1, 0] = 4
    # pooling gives a mean u of 2 pixels, which is 1 latent cell at f = 2
    np.testing.assert_array_equal(flow.downscale_flow(checker, 2), np.broadcast_to([1.0, 0.0], (2, 2, 2)))
    with pytest.raises(ValueError):
        flow.downscale_flow(np.zeros((5, 4, 2)), 2)


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6).map(lambda s: s + (2,)),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_flo_roundtrip_is_bit_exact(tmp_path_factory, field):
    path = tmp_path_factory.mktemp("flo") / "f.flo"
    flow.write_flo(field, path)
    back = flow.read_flo(path)
    assert back.tobytes() == field.tobytes() and back.shape == field.shape


def test_hand_assembled_flo_fixture(tmp_path):
    path = tmp_path / "fixture.flo"
    path.write_bytes(FLO_2X1_BYTES)
    assert len(FLO_2X1_BYTES) == 28
    np.testing.assert_array_equal(flow.read_flo(path), FLO_2X1_FIELD)
    out = tmp_path / "written.flo"
    flow.write_flo(FLO_2X1_FIELD, out)
    assert out.read_bytes() == FLO_2X1_BYTES


@pytest.mark.parametrize("raw, message", [
    (b"XXXX" + FLO_2X1_BYTES[4:], "magic"),
    (FLO_2X1_BYTES[:20], "truncated"),
    (FLO_2X1_BYTES[:4] + b"\x00\x00\x00\x00" + FLO_2X1_BYTES[8:], "nonpositive"),
    (b"PIE", "too short"),
])
def test_flo_format_errors(tmp_path, raw, message):
    path = tmp_path / "bad.flo"
    path.write_bytes(raw)
    with pytest.raises(flow.FlowFormatError, match=message):
        flow.read_flo(path)
