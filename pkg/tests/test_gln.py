import io
import json
import zipfile

import numpy as np
import pytest

from gridlift.engine import make_rng
from gridlift.gln import (
    CheckpointError,
    GLNConfig,
    GLNModel,
    NumericalAbort,
    TrainHyper,
    _batches,
    build_gln,
    closed_form_parameter_count,
    gln_loss,
    gln_loss_grad,
    load_model,
    parse_kernel_plan,
    save_model,
    train,
)
from gridlift.sgt import SkeletonTopology, sgt_forward, sgt_inverse


def tiny(mode="handcrafted", seed=0, **kw):
    mode = kw.pop("sgt_mode", mode)
    kw.setdefault("latent_channels", 4)
    kw.setdefault("blocks", 1)
    return GLNConfig(sgt_mode=mode, seed=seed, **kw)


def poses(rng, n, j=17):
    return rng.normal(size=(n, j, 2)) * 0.3, rng.normal(size=(n, j, 3)) * 0.3


# -- configuration ----------------------------------------------------------


@pytest.mark.parametrize("plan, blocks, sizes", [
    ("3-33-33-3", 2, [3, 3, 3, 3, 3, 3]),
    ("5-13-31-1", 2, [5, 1, 3, 3, 1, 1]),
    ("3-3", 0, [3, 3]),
    ([1, 3, 5, 7], 1, [1, 3, 5, 7]),
])
def test_kernel_plan_parsing(plan, blocks, sizes):
    assert parse_kernel_plan(plan, blocks) == sizes


@pytest.mark.parametrize("plan, blocks", [("3-33-3", 2), ("3-3-3", 1), ("3-34-3", 1), ("33-33-3", 1), ([3, 3], 1)])
def test_bad_kernel_plan_rejected(plan, blocks):
    with pytest.raises(ValueError):
        parse_kernel_plan(plan, blocks)


@pytest.mark.parametrize("kw", [
    {"blocks": -1}, {"latent_channels": 0}, {"sgt_mode": "magic"}, {"sgt_mode": "file"},
    {"normalization": "minmax"}, {"dropout_p": 1.0}, {"blocks": 1, "kernel_plan": "3-33-33-3"},
])
def test_invalid_config_rejected(kw):
    with pytest.raises(ValueError):
        GLNConfig(**kw)


def test_config_dict_round_trip():
    cfg = tiny(branches=("circular",), dropout_p=0.1)
    assert GLNConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        GLNConfig.from_dict({**cfg.to_dict(), "widht": 3})


def test_train_hyper_validation():
    for kw in ({"batch_size": 1}, {"epochs": 0}, {"base_lr": 0.0}, {"lr_schedule": "cosine"}):
        with pytest.raises(ValueError):
            TrainHyper(**kw)


def test_learning_rate_schedules():
    hyper = TrainHyper()
    assert hyper.lr_at(0, "handcrafted") == 0.001
    assert np.isclose(hyper.lr_at(1, "handcrafted"), 0.00096, rtol=1e-12)
    assert np.isclose(hyper.lr_at(2, "random"), 0.001 * 0.96**2, rtol=1e-12)
    assert hyper.lr_at(9, "learnable") == 0.001
    assert np.isclose(hyper.lr_at(10, "learnable"), 0.0001, rtol=1e-12)
    assert np.isclose(hyper.lr_at(25, "learnable"), 0.00001, rtol=1e-12)
    assert TrainHyper(lr_schedule="step").lr_at(10, "handcrafted") == pytest.approx(0.0001)


# -- parameter budget ----------------------------------------------------


def test_default_parameter_count(topology):
    model = build_gln(GLNConfig(), topology)
    total = model.num_parameters()
    closed = closed_form_parameter_count(GLNConfig(), topology.num_joints)
    assert total == closed["total"] == 4_792_880
    assert abs(total - 4.79e6) / 4.79e6 <= 0.01
    assert model.num_parameters(attention_only=True) == closed["attention"] == 46_122
    assert closed["conv"] == 4_744_198 and closed["batch_norm"] == 2_560


@pytest.mark.parametrize("kw", [
    {"blocks": 0}, {"blocks": 3, "latent_channels": 7}, {"dynamic": False},
    {"kernel_plan": "1-35-53-1", "blocks": 2}, {"branches": ("replicate",)}, {"sgt_mode": "learnable"},
])
def test_count_matches_closed_form(topology, kw):
    cfg = tiny(**kw)
    assert GLNModel(cfg, topology).num_parameters() == closed_form_parameter_count(cfg, 17)["total"]


def test_count_independent_of_seed(topology):
    assert len({GLNModel(tiny(seed=s), topology).num_parameters() for s in range(4)}) == 1


def test_initialization_scheme(topology):
    model = GLNModel(tiny(latent_channels=6), topology)
    k = model.expand.conv.branches[0].kernel.value
    assert np.all(np.abs(k) <= np.sqrt(1 / (3 * 3 * 2)))
    assert np.all(model.expand.gamma.value == 1) and np.all(model.expand.beta.value == 0)


# -- forward ---------------------------------------------------------------


def test_output_shape_and_eval_determinism(topology, rng):
    model = GLNModel(tiny(), topology)
    x, _ = poses(rng, 5)
    a = model.forward(x)
    assert a.shape == (5, 17, 3)
    assert np.array_equal(a, model.forward(x))


def test_zero_blocks_still_lift(topology, rng):
    model = GLNModel(tiny(blocks=0), topology)
    assert model.blocks == []
    assert model.forward(poses(rng, 2)[0]).shape == (2, 17, 3)


def test_forward_equals_step_by_step_composition(topology, rng):
    model = GLNModel(tiny(latent_channels=5), topology)
    x, _ = poses(rng, 3)
    S = model.assignment
    h0 = model.expand.forward(sgt_forward(S, x), False, None)
    h1 = h0 + model.blocks[0].unit2.forward(model.blocks[0].unit1.forward(h0, False, None), False, None)
    expected = sgt_inverse(S, model.shrink.forward(h1, False))
    assert np.max(np.abs(model.forward(x) - expected)) <= 1e-12


def test_zeroed_block_is_identity(topology, rng):
    model = GLNModel(tiny(latent_channels=5), topology)
    blk = model.blocks[0]
    for unit in (blk.unit1, blk.unit2):
        for br in unit.conv.branches:
            br.kernel.value[:] = 0.0
            br.bias.value[:] = 0.0
    x = rng.normal(size=(2, 5, 5, 5))
    assert np.array_equal(blk.forward(x, False, None), x)


def test_non_finite_and_misshapen_inputs_rejected(topology, rng):
    model = GLNModel(tiny(), topology)
    x, _ = poses(rng, 2)
    x[1, 3, 0] = np.nan
    with pytest.raises(ValueError):
        model.forward(x)
    with pytest.raises(ValueError):
        model.forward(np.zeros((2, 16, 2)))
    with pytest.raises(ValueError):
        model.forward(np.zeros((2, 17, 2)), training=True)


def test_random_and_learnable_models_build(topology, rng):
    x, _ = poses(rng, 2)
    for mode in ("random", "learnable"):
        model = GLNModel(tiny(mode), topology)
        assert model.coverage() == 17
        assert model.forward(x).shape == (2, 17, 3)


def test_file_mode_reads_layout(tmp_path, topology, rng):
    from gridlift.sgt import build_handcrafted_layout, save_layout

    path = tmp_path / "layout.csv"
    save_layout(build_handcrafted_layout(topology), topology, path)
    a = GLNModel(tiny("file", layout_path=str(path)), topology)
    b = GLNModel(tiny(), topology)
    x, _ = poses(rng, 2)
    assert np.array_equal(a.forward(x), b.forward(x))


# -- loss ------------------------------------------------------------------


def test_loss_examples(rng):
    gt = rng.normal(size=(1, 17, 3))
    assert gln_loss(gt, gt) == 0.0
    pred = gt.copy()
    pred[0, 4] += [3.0, 4.0, 0.0]
    assert gln_loss(pred, gt) == pytest.approx(25 / 17, rel=1e-15)
    with pytest.raises(ValueError):
        gln_loss(pred, gt[:, :16])


def test_loss_matches_loop_and_gradient(rng, fd):
    pred, gt = rng.normal(size=(4, 17, 3)), rng.normal(size=(4, 17, 3))
    loop = 0.0
    for n in range(4):
        for j in range(17):
            loop += sum((pred[n, j, c] - gt[n, j, c]) ** 2 for c in range(3))
    assert abs(gln_loss(pred, gt) - loop / 68) <= 1e-12
    assert gln_loss(pred, gt) >= 0
    assert fd(lambda: gln_loss(pred, gt), pred, gln_loss_grad(pred, gt)) <= 1e-6


# -- gradients -------------------------------------------------------------


@pytest.mark.parametrize("mode", ["handcrafted", "random"])
def test_end_to_end_gradients(topology, fd, mode):
    from gridlift.verify import tiny_model

    model = tiny_model(mode, seed=3)
    rng = make_rng(3)
    x, y = poses(rng, 4)

    def loss():
        return gln_loss(model.forward(x, training=True, rng=make_rng(11), epoch=0), y)

    pred = model.forward(x, training=True, rng=make_rng(11), epoch=0)
    gx = model.backward(gln_loss_grad(pred, y))
    grads = {n: p.grad.copy() for n, p in model.parameters().items()}
    assert fd(loss, x, gx) <= 1e-4
    for name in ("expand.conv.branch1.kernel", "block0.unit2.bn.gamma", "shrink.attention.fc2_w",
                 "shrink.branch0.bias"):
        assert fd(loss, model.parameters()[name].value, grads[name]) <= 1e-4, name


# -- training --------------------------------------------------------------


def test_batches_merge_single_leftover():
    order = np.arange(11)
    sizes = [len(b) for b in _batches(order, 5)]
    assert sizes == [5, 6]
    assert [len(b) for b in _batches(np.arange(12), 5)] == [5, 5, 2]
    assert np.array_equal(np.concatenate(_batches(order, 5)), order)


def test_training_reduces_loss_and_is_deterministic(topology):
    rng = make_rng(0)
    x, y = poses(rng, 40)
    runs = []
    for _ in range(2):
        model = GLNModel(tiny(latent_channels=8), topology)
        hist = train(model, x, y, TrainHyper(batch_size=10, epochs=4), make_rng(5))
        runs.append((hist.to_csv(), model.forward(x)))
    assert runs[0][0] == runs[1][0]
    assert np.array_equal(runs[0][1], runs[1][1])
    losses = [float(line.split(",")[2]) for line in runs[0][0].splitlines()[1:]]
    assert losses[-1] < losses[0]
    assert runs[0][0].splitlines()[0] == "epoch,lr,loss,train_mpjpe_mm,sgt_coverage,gumbel_noise"


def test_history_reports_schedule_and_noise(topology):
    rng = make_rng(0)
    x, y = poses(rng, 8)
    model = GLNModel(tiny("learnable", latent_channels=2, gumbel_cutoff=2), topology)
    hist = train(model, x, y, TrainHyper(batch_size=4, epochs=4, lr_step_epochs=2), make_rng(1))
    assert hist.column("gumbel_noise") == [1, 1, 0, 0]
    assert hist.column("lr") == pytest.approx([1e-3, 1e-3, 1e-4, 1e-4])
    assert all(c <= 17 for c in hist.column("sgt_coverage"))


def test_learnable_training_updates_assignment_logits(topology):
    rng = make_rng(0)
    x, y = poses(rng, 8)
    model = GLNModel(tiny("learnable", latent_channels=2), topology)
    before = model.s_prob.value.copy()
    train(model, x, y, TrainHyper(batch_size=4, epochs=1), make_rng(1))
    assert not np.array_equal(before, model.s_prob.value)
    assert np.all(model.s_prob.value >= 1e-8)


def test_missing_joint_uses_previous_covering_cells(topology, rng):
    model = GLNModel(tiny("learnable", latent_channels=2), topology)
    model.s_prob.value[:, 0] = 1e-8
    model.autogrids.s_prob = model.s_prob.value
    S, S_inv, missing = model.current_assignment()
    assert missing[0] and not S[:, 0].any()
    assert np.array_equal(S_inv[:, 0], model.last_covering.S[:, 0])
    assert model.substitution_events == 1
    assert np.all(np.isfinite(model.forward(poses(rng, 2)[0])))


def test_nan_loss_aborts_with_batch_index(topology):
    rng = make_rng(0)
    x, y = poses(rng, 12)
    y[7, 2, 1] = np.nan
    model = GLNModel(tiny(), topology)
    order = make_rng(9).permutation(12)
    expected_batch = int(np.flatnonzero(order == 7)[0] // 4)
    with pytest.raises(NumericalAbort) as info:
        train(model, x, y, TrainHyper(batch_size=4, epochs=2), make_rng(9))
    assert info.value.epoch == 0 and info.value.batch_index == expected_batch
    assert f"batch {expected_batch}" in str(info.value)


def test_training_needs_two_samples(topology):
    x, y = poses(make_rng(0), 1)
    with pytest.raises(ValueError):
        train(GLNModel(tiny(), topology), x, y, TrainHyper(batch_size=2, epochs=1), make_rng(0))


# -- checkpoints -----------------------------------------------------------


@pytest.mark.parametrize("mode", ["handcrafted", "random", "learnable"])
def test_checkpoint_round_trip_is_exact(tmp_path, topology, mode):
    rng = make_rng(0)
    x, y = poses(rng, 8)
    model = GLNModel(tiny(mode, seed=4), topology)
    train(model, x, y, TrainHyper(batch_size=4, epochs=1), make_rng(2))
    path = tmp_path / "m.npz"
    save_model(model, path)
    loaded = load_model(path, topology)
    assert np.array_equal(model.forward(x), loaded.forward(x))
    for name, p in model.parameters().items():
        q = loaded.parameters()[name]
        assert np.array_equal(p.value, q.value) and np.array_equal(p.adam_m, q.adam_m)
        assert np.array_equal(p.adam_v, q.adam_v) and p.step_count == q.step_count
    for name, st in model.buffers().items():
        assert np.array_equal(st.running_mean, loaded.buffers()[name].running_mean)
        assert np.array_equal(st.running_var, loaded.buffers()[name].running_var)
    assert np.array_equal(model.last_covering.S, loaded.last_covering.S)
    if mode == "learnable":
        assert np.array_equal(model.s_prob.value, loaded.autogrids.s_prob)
    save_model(loaded, tmp_path / "again.npz")
    assert (tmp_path / "again.npz").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_other_skeleton(tmp_path, topology):
    path = tmp_path / "m.npz"
    save_model(GLNModel(tiny(), topology), path)
    names = topology.joint_names[:16]
    edges = tuple(e for e in topology.edges if max(e) < 16)
    with pytest.raises(CheckpointError):
        load_model(path, SkeletonTopology(names, edges, 0))
    renamed = SkeletonTopology(("Root",) + topology.joint_names[1:], topology.edges, 0)
    with pytest.raises(CheckpointError):
        load_model(path, renamed)


def test_checkpoint_rejects_foreign_archives(tmp_path):
    path = tmp_path / "other.npz"
    np.savez(path, weights=np.zeros(3))
    with pytest.raises(CheckpointError):
        load_model(path)


def test_checkpoint_rejects_shape_mismatch(tmp_path, topology):
    path = tmp_path / "m.npz"
    save_model(GLNModel(tiny(), topology), path)
    with zipfile.ZipFile(path) as zf:
        entries = {n: zf.read(n) for n in zf.namelist()}
    meta = json.loads(bytes(np.load(path)["meta.json"]).decode())
    meta["config"]["latent_channels"] = 6
    out = io.BytesIO()
    np.lib.format.write_array(out, np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))
    entries["meta.json.npy"] = out.getvalue()
    with zipfile.ZipFile(path, "w") as zf:
        for name, data in entries.items():
            zf.writestr(name, data)
    with pytest.raises(CheckpointError):
        load_model(path)
