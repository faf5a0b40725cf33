import dataclasses
import struct

import numpy as np
import pytest

from gspretrain.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from gspretrain.config import TrainConfig, fixture_config, reference_config
from gspretrain.errors import (
    CheckpointVersionError,
    ConfigMismatchError,
    ConfigurationError,
    CorruptCheckpointError,
    EmptyBatchError,
)
from gspretrain.loss import ReconTargets
from gspretrain.masking import MaskConfig
from gspretrain.optim import adamw_step
from gspretrain.train import (
    STREAM_EVAL,
    STREAM_TRAIN,
    evaluate,
    forward,
    init_params,
    init_state,
    iou,
    make_batch,
    reconstruction_metrics,
    train,
    train_step,
)

SMALL = dict(ray_budget=48, anchors_per_ray=8)


def small_cfg(**kw):
    return fixture_config(**{**SMALL, **kw})


# --- config ----------------------------------------------------------------------------

def test_reference_defaults():
    c = reference_config()
    assert (c.mask.patch_size, c.mask.mask_ratio, c.mask.depth_range) == (32, 0.3, (0.0, 50.0))
    assert (c.loss.rgb, c.loss.depth, c.loss.occupancy) == (10.0, 1.0, 10.0)
    assert (c.optim.learning_rate, c.optim.weight_decay) == (2e-4, 0.01)
    assert (c.ray_budget, c.anchors_per_ray) == (1024, 100)


def test_config_json_round_trip():
    c = fixture_config(encoder="lss", render_mode="splat", steps=3)
    assert TrainConfig.from_json(c.to_json()) == c
    assert TrainConfig.from_json(c.to_json()).to_json() == c.to_json()


def test_config_rejects_bad_values():
    for kw in ({"encoder": "mlp"}, {"render_mode": "mesh"}, {"steps": 0}, {"dtype": "int8"}):
        with pytest.raises(ConfigurationError):
            fixture_config(**kw)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"nonsense": 1})
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"mask": {"mask_ratio": 2.0}})


# --- steps ------------------------------------------------------------------------------

def test_zero_residual_step_is_pure_weight_decay(fixture_ctx):
    cfg = small_cfg(dtype="float64")
    params = init_params(cfg, fixture_ctx)
    batch = make_batch(cfg, fixture_ctx, STREAM_TRAIN, 0)
    out = forward(cfg, params, fixture_ctx, batch, grads=False).output
    batch.targets = ReconTargets(out.rgb.copy(), np.where(batch.targets.has_depth, out.depth, np.nan),
                                 out.occupancy.copy())
    res = forward(cfg, params, fixture_ctx, batch)
    assert res.loss == 0.0
    assert all(not g.any() for g in res.grads.values())
    from gspretrain.optim import ParamStore

    before = {k: v.copy() for k, v in params.items()}
    store = ParamStore(params)
    adamw_step(store, res.grads, cfg.optim)
    k = 1 - cfg.optim.learning_rate * cfg.optim.weight_decay
    for name, p in store.params.items():
        np.testing.assert_array_equal(p, before[name] * k)


def test_skipped_steps_do_not_touch_parameters(fixture_ctx):
    # no LiDAR return is that far away, so every masked patch is invalid
    cfg = small_cfg(mask=MaskConfig(patch_size=16, mask_ratio=0.3, depth_range=(500.0, 600.0)))
    st = init_state(cfg, fixture_ctx)
    before = {k: v.copy() for k, v in st.store.params.items()}
    with pytest.raises(EmptyBatchError):
        make_batch(cfg, fixture_ctx, STREAM_TRAIN, 0)
    assert train_step(st, fixture_ctx) is None
    train(st, fixture_ctx, 3)
    assert (st.step, st.skipped, st.store.step) == (3, 3, 0)
    for k, v in st.store.params.items():
        assert v.tobytes() == before[k].tobytes()


def test_fixed_seed_replay_identical_trace(fixture_ctx):
    traces = []
    for _ in range(2):
        st = init_state(small_cfg(), fixture_ctx)
        train(st, fixture_ctx, 4)
        traces.append([row["L"] for row in st.history])
    assert traces[0] == traces[1] and len(traces[0]) == 4


def test_loss_decreases_over_a_few_steps(fixture_ctx):
    st = init_state(small_cfg(), fixture_ctx)
    train(st, fixture_ctx, 20)
    L = [row["L"] for row in st.history]
    assert np.mean(L[-5:]) < np.mean(L[:5])


@pytest.mark.parametrize("encoder,mode", [("grid", "splat"), ("lss", "ray"), ("lss", "splat")])
def test_other_modes_train(fixture_ctx, encoder, mode):
    st = init_state(small_cfg(encoder=encoder, render_mode=mode, ray_budget=16), fixture_ctx)
    train(st, fixture_ctx, 2)
    assert st.store.step == 2 and all(np.isfinite(r["L"]) for r in st.history)


def _subgradient_ok(f, x, i, g, eps_c=1e-6, eps_1=1e-7, tol=1e-4):
    """Analytic value matches the central difference, or one one-sided derivative at a kink."""
    x0 = x.flat[i]

    def at(v):
        x.flat[i] = v
        try:
            return f(x)
        finally:
            x.flat[i] = x0

    f0 = f(x)
    cands = [(at(x0 + eps_c) - at(x0 - eps_c)) / (2 * eps_c),
             (at(x0 + eps_1) - f0) / eps_1, (f0 - at(x0 - eps_1)) / eps_1]
    return min(abs(g - c) / max(abs(g), abs(c), 1e-8) for c in cands) < tol


@pytest.mark.parametrize("encoder,mode", [("grid", "ray"), ("grid", "splat"), ("lss", "ray"), ("lss", "splat")])
def test_end_to_end_gradients(fixture_ctx, encoder, mode):
    cfg = fixture_config(dtype="float64", ray_budget=12, anchors_per_ray=6, encoder=encoder, render_mode=mode)
    params = init_params(cfg, fixture_ctx)
    batch = make_batch(cfg, fixture_ctx, STREAM_TRAIN, 0)
    res = forward(cfg, params, fixture_ctx, batch)
    rng = np.random.default_rng(0)
    checked = 0
    for name, arr in params.items():
        g = res.grads[name]
        big = np.flatnonzero(np.abs(g) > 1e-3)  # well above FD round-off on a loss of order 10
        for i in rng.choice(big, size=min(3, len(big)), replace=False):
            def f(x, name=name):
                return forward(cfg, {**params, name: x}, fixture_ctx, batch, grads=False).loss

            assert _subgradient_ok(f, arr, i, g.flat[i]), (name, i)
            checked += 1
    assert checked >= 10


# --- evaluation ---------------------------------------------------------------------------

def test_iou_examples():
    assert iou([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(1 / 3)
    assert iou([0, 0], [0, 0]) == 1.0


def test_perfect_predictions_give_perfect_metrics(fixture_ctx):
    cfg = small_cfg()
    batch = make_batch(cfg, fixture_ctx, STREAM_EVAL, 0)
    t = batch.targets
    from gspretrain.render import RenderOutput

    out = RenderOutput(t.colors, np.nan_to_num(t.depth), np.ones(len(t.colors)), t.occupancy)
    m = reconstruction_metrics([out], [t])
    assert m == {"rgb_l1": 0.0, "depth_l1": 0.0, "occ_iou": 1.0}


def test_evaluation_uses_held_out_masks_and_is_deterministic(fixture_ctx):
    cfg = small_cfg()
    tr = make_batch(cfg, fixture_ctx, STREAM_TRAIN, 0)
    ev = make_batch(cfg, fixture_ctx, STREAM_EVAL, 0)
    assert [v.patches for v in tr.valid_masks] != [v.patches for v in ev.valid_masks]
    st = init_state(cfg, fixture_ctx)
    assert evaluate(st, fixture_ctx, 2) == evaluate(st, fixture_ctx, 2)


# --- checkpoints ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(fixture_ctx):
    st = init_state(small_cfg(steps=6), fixture_ctx)
    train(st, fixture_ctx, 3)
    return st


def test_checkpoint_forward_bit_exact(tmp_path, fixture_ctx, trained):
    save_checkpoint(tmp_path / "a.gpck", trained, fixture_ctx)
    st2 = load_checkpoint(tmp_path / "a.gpck", trained.cfg)
    assert (st2.step, st2.skipped, st2.store.step) == (trained.step, trained.skipped, trained.store.step)
    for k, v in trained.store.params.items():
        assert st2.store.params[k].tobytes() == v.tobytes() and st2.store.params[k].dtype == v.dtype
    b = make_batch(trained.cfg, fixture_ctx, STREAM_EVAL, 0)
    a = forward(trained.cfg, trained.store.params, fixture_ctx, b, grads=False)
    c = forward(trained.cfg, st2.store.params, fixture_ctx, b, grads=False)
    assert a.output.rgb.tobytes() == c.output.rgb.tobytes() and a.loss == c.loss
    assert checkpoint_bytes(st2, fixture_ctx) == (tmp_path / "a.gpck").read_bytes()


def test_resume_equivalence(tmp_path, fixture_ctx):
    cfg = small_cfg(steps=5)
    straight = init_state(cfg, fixture_ctx)
    train(straight, fixture_ctx, 5)
    first = init_state(cfg, fixture_ctx)
    train(first, fixture_ctx, 2)
    save_checkpoint(tmp_path / "c.gpck", first, fixture_ctx)
    resumed = load_checkpoint(tmp_path / "c.gpck", cfg)
    train(resumed, fixture_ctx, 5)
    for k in straight.store.params:
        assert straight.store.params[k].tobytes() == resumed.store.params[k].tobytes()


def test_lss_checkpoint_round_trip(tmp_path, fixture_ctx):
    cfg = small_cfg(encoder="lss", ray_budget=16)
    st = init_state(cfg, fixture_ctx)
    train(st, fixture_ctx, 1)
    save_checkpoint(tmp_path / "l.gpck", st, fixture_ctx)
    st2 = load_checkpoint(tmp_path / "l.gpck", cfg)
    for k, v in st.store.params.items():
        assert st2.store.params[k].tobytes() == v.tobytes()


def test_truncated_checkpoint(tmp_path, fixture_ctx, trained):
    data = checkpoint_bytes(trained, fixture_ctx)
    for cut in (3, 40, len(data) // 2, len(data) - 1):
        (tmp_path / "t.gpck").write_bytes(data[:cut])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(tmp_path / "t.gpck")


def test_flipped_byte_fails_checksum(tmp_path, fixture_ctx, trained):
    data = bytearray(checkpoint_bytes(trained, fixture_ctx))
    data[len(data) // 2] ^= 0xFF
    (tmp_path / "f.gpck").write_bytes(bytes(data))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "f.gpck")


def test_version_mismatch(tmp_path, fixture_ctx, trained):
    data = bytearray(checkpoint_bytes(trained, fixture_ctx))
    data[4:8] = struct.pack("<I", 9)
    (tmp_path / "v.gpck").write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "v.gpck")


def test_config_mismatch(tmp_path, fixture_ctx, trained):
    save_checkpoint(tmp_path / "m.gpck", trained, fixture_ctx)
    other = dataclasses.replace(trained.cfg, feature_dim=16)
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(tmp_path / "m.gpck", other)
    # training-only knobs do not block loading
    load_checkpoint(tmp_path / "m.gpck", dataclasses.replace(trained.cfg, steps=999))
