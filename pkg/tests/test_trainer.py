import numpy as np
import pytest

from refbridge import bridge, codec
from refbridge import numerics as nx
from refbridge import trainer as tr
from refbridge.model import ModelConfig, Restorer, Wiring
from refbridge.numerics import Tensor

SMALL = ModelConfig(d_model=16, depth=1, motion_hidden=8)


@pytest.fixture(scope="module")
def pairs(shifted_pairs):
    return tr.load_pairs(shifted_pairs, tr.TrainConfig(model=SMALL))


def test_adam_single_step_matches_hand_computation():
    x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    opt = tr.Adam([x], lr=0.1)
    loss = nx.sum_all(nx.mul(x, x))  # gradient 2x
    loss.backward()
    opt.step()
    g = np.array([2.0, -4.0, 1.0])
    m = 0.1 * g / (1 - 0.9)
    v = 0.001 * g * g / (1 - 0.999)
    expected = np.array([1.0, -2.0, 0.5]) - 0.1 * m / (np.sqrt(v) + 1e-8)
    np.testing.assert_allclose(x.data, expected, atol=1e-6)


def test_adam_second_step_uses_bias_corrected_moments():
    x = Tensor(np.array([3.0]), requires_grad=True)
    opt = tr.Adam([x], lr=0.01)
    m = v = 0.0
    val = 3.0
    for t in (1, 2):
        x.grad = None
        nx.sum_all(nx.mul(x, x)).backward()
        g = 2 * val
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        val -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        opt.step()
    assert abs(x.data[0] - val) < 1e-12


def test_load_pairs_shapes(pairs):
    assert pairs.z_hs.shape == (40, 12, 8, 8) and pairs.ref.shape == (40, 16, 16, 3)
    assert pairs.attn_flow.shape == (40, 16, 16, 2)
    train_set, val_set = tr.split_train_val(pairs)
    assert (len(train_set), len(val_set)) == (36, 4)
    np.testing.assert_array_equal(val_set.z_hs, pairs.z_hs[36:])


def test_zero_learning_rate_leaves_parameters_unchanged(pairs, tmp_path):
    cfg = tr.TrainConfig(lr=0.0, steps=3, batch_size=4, model=SMALL)
    init = Restorer(SMALL, seed=0)
    before = init.state_dict()
    tr.save_checkpoint(init, tmp_path / "a.ckpt")
    res = tr.train(cfg, pairs=pairs, init_model=init)
    for k, v in res.model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    tr.save_checkpoint(res.model, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_training_is_deterministic_and_learns(pairs):
    cfg = tr.toy_config(steps=12, batch_size=8, model=SMALL)
    a = tr.train(cfg, pairs=pairs)
    b = tr.train(cfg, pairs=pairs)
    assert a.losses == b.losses and a.val_loss == b.val_loss
    assert len(a.losses) == 12 and all(np.isfinite(a.losses))
    assert np.mean(a.losses[-4:]) < np.mean(a.losses[:4])


def test_non_finite_loss_names_the_step(pairs):
    model = Restorer(SMALL)
    model.params["out.b"].data[:] = np.inf
    with pytest.raises(tr.TrainingError, match="step 0"):
        tr.train(tr.TrainConfig(steps=2, batch_size=2, model=SMALL), pairs=pairs, init_model=model)


def test_ablation_mapping():
    assert tr.apply_ablation([]).mode == "full"
    assert tr.apply_ablation(["no_reference_branch"]).mode == "no_reference"
    assert tr.apply_ablation(["warp_ref_kv", "no_motion_bias"]).mode == "warp_ref_kv"
    for bad in (["warp_ref_image", "warp_ref_kv"], ["no_reference_branch", "warp_ref_image"], ["bogus"]):
        with pytest.raises(ValueError):
            tr.apply_ablation(bad)


def test_no_reference_equals_restoration_only_path(pairs):
    model = Restorer(SMALL, seed=3, zero_output=False)
    b = pairs.take(np.arange(3))
    vel = tr.apply_ablation(["no_reference_branch"]).velocity_fn(model, b.ref, b.attn_flow, b.align_flow)
    np.testing.assert_array_equal(vel(b.z_ls, 0.1).data, model.predict_velocity(b.z_ls, 0.1).data)


@pytest.mark.parametrize("flag", ["warp_ref_image", "warp_ref_latent", "warp_ref_kv"])
def test_warp_with_zero_flow_equals_the_unwarped_baseline(pairs, flag):
    model = Restorer(SMALL, seed=3, zero_output=False)
    b = pairs.take(np.arange(3))
    zero = np.zeros_like(b.align_flow)
    warped = tr.apply_ablation([flag]).velocity_fn(model, b.ref, zero, zero)(b.z_ls, 0.1).data
    plain = Wiring("no_motion_bias").velocity_fn(model, b.ref, zero, zero)(b.z_ls, 0.1).data
    np.testing.assert_array_equal(warped, plain)


def test_oracle_velocity_has_zero_loss_through_the_trainer_batch(pairs):
    b = pairs.take(np.arange(4))
    target = bridge.draw_sample(b.z_hs, b.z_ls, 7).target_velocity
    assert float(bridge.bridge_loss(lambda z, t: target, b.z_hs, b.z_ls, 7).data) == 0.0


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    model = Restorer(SMALL, seed=5, zero_output=False)
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(model, path, step=7, seed=5, config_hash="abc", wiring="full")
    back, meta = tr.load_checkpoint(path, with_meta=True)
    assert meta["step"] == 7 and meta["wiring"] == "full" and back.config == SMALL
    z = np.random.default_rng(0).standard_normal((1, 12, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(back.predict_velocity(z, 0.1).data, model.predict_velocity(z, 0.1).data)


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(Restorer(SMALL), path)
    raw = path.read_bytes()
    cases = {
        "version": raw.replace(b"REFBRIDGE-CKPT 1", b"REFBRIDGE-CKPT 9", 1),
        "not a checkpoint": b"HELLO" + raw[14:],
        "payload": raw[:-4],
        "corrupted header": raw.replace(b"step: 0", b"step: x", 1),
        "declares": raw.replace(b"params: ", b"params: 1", 1),
        "end_header": raw.replace(b"end_header", b"end_headr", 1),
    }
    for message, blob in cases.items():
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(blob)
        with pytest.raises(tr.CheckpointError, match=message):
            tr.load_checkpoint(bad)


def test_checkpoint_dims_must_match_the_header(tmp_path):
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(Restorer(SMALL), path)
    raw = path.read_bytes()
    bad = tmp_path / "dims.ckpt"
    bad.write_bytes(raw.replace(b'"d_model": 16', b'"d_model": 8', 1))
    with pytest.raises(tr.CheckpointError, match="shape"):
        tr.load_checkpoint(bad)


def test_config_roundtrip():
    cfg = tr.toy_config(ablation=tr.AblationFlags(warp_ref_kv=True))
    assert tr.TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() == tr.TrainConfig.from_dict(cfg.to_dict()).digest()
    assert tr.TrainConfig().lr == 5e-5 and cfg.lr == 4e-3
