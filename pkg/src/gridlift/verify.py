"""Self-check suites: finite-difference gradients, brute-force oracles and round trips.

Each check returns a measured value and a tolerance; it passes when the
value is at most the tolerance. ``run_suites`` collects the results.
"""
from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gridlift import engine, oracles
from gridlift.data import (
    denormalize_2d,
    load_dataset,
    normalize_2d,
    save_dataset,
    synth_generate,
    uvz_project,
)
from gridlift.gln import GLNConfig, GLNModel, gln_loss, gln_loss_grad, load_model, save_model
from gridlift.gridconv import AttentionHead, DGridConvLayer
from gridlift.metrics import mpjpe, procrustes_align
from gridlift.sgt import (
    GridSpec,
    autogrids_sample,
    build_handcrafted_layout,
    h36m_skeleton,
    init_autogrids,
    layout_to_csv,
    load_layout,
    random_sgt,
    rowwise_onehot,
    sgt_forward,
    sgt_inverse,
    validate_constraints,
)

GRAD_TOL = 1e-4
FD_STEP = 1e-5
MAX_COORDS = 24
DIRECTIONS = 2


@dataclass
class CheckResult:
    suite: str
    name: str
    value: float
    tolerance: float
    seconds: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.suite:<9} {self.name:<44} value={self.value:.3e} "
                f"tol={self.tolerance:.1e} {self.seconds:6.2f}s {self.detail}").rstrip()


# ---------------------------------------------------------------------------
# Finite-difference machinery
# ---------------------------------------------------------------------------


def gradient_error(loss_fn, array: np.ndarray, analytic: np.ndarray, rng: np.random.Generator,
                   max_coords: int = MAX_COORDS, directions: int = DIRECTIONS, h: float = FD_STEP) -> float:
    """Worst relative error between ``analytic`` and central differences of ``loss_fn``.

    Small arrays are checked coordinate by coordinate. Larger ones use a
    random coordinate sample plus a few random directional derivatives.
    """
    analytic = np.asarray(analytic, dtype=np.float64).reshape(array.shape)
    if array.size <= max_coords:
        coords = None
    else:
        coords = rng.choice(array.size, size=max_coords, replace=False)
    numeric = oracles.numeric_gradient(loss_fn, array, h, coords)
    picked = analytic.reshape(-1) if coords is None else analytic.reshape(-1)[coords]
    worst = relative_error_floor(picked, numeric)
    if coords is not None:
        for _ in range(directions):
            d = rng.normal(size=array.shape)
            num = oracles.directional_derivative(loss_fn, array, d, h)
            ana = float(np.sum(analytic * d))
            worst = max(worst, relative_error_floor(np.array([ana]), np.array([num])))
    return worst


def relative_error_floor(analytic, numeric, floor: float = 1e-6) -> float:
    """Relative error whose denominator never drops below ``floor`` (absorbs difference noise)."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def _check_grads(pairs, loss_fn, rng):
    """``pairs`` maps names to (array, analytic gradient); returns worst error and its name."""
    worst, where = 0.0, ""
    for name, (arr, grad) in pairs.items():
        err = gradient_error(loss_fn, arr, grad, rng)
        if err > worst or not where:
            worst, where = err, name
    return worst, where


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------


def _grad_conv2d(rng):
    x = rng.normal(size=(2, 6, 5, 3))
    k = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    r = rng.normal(size=(2, 4, 3, 4))
    loss = lambda: float(np.sum(r * engine.conv2d(x, k, b)))
    gx, gk, gb = engine.conv2d_backward(r, x, k)
    return _check_grads({"input": (x, gx), "kernel": (k, gk), "bias": (b, gb)}, loss, rng)


def _grad_padding(rng):
    worst, where = 0.0, ""
    for mode in ("circular", "replicate", "circular:replicate"):
        x = rng.normal(size=(2, 4, 5, 2))
        r = rng.normal(size=(2, 8, 9, 2))
        loss = lambda: float(np.sum(r * engine.pad_grid(x, 2, mode)))
        g = engine.pad_grid_backward(r, 4, 5, 2, mode)
        err = gradient_error(loss, x, g, rng, max_coords=x.size)
        if err >= worst:
            worst, where = err, mode
    return worst, where


def _grad_batch_norm(rng):
    worst, where = 0.0, ""
    for training in (True, False):
        x = rng.normal(size=(6, 4))
        gamma, beta = rng.normal(size=4), rng.normal(size=4)
        state = engine.BatchNormState(rng.normal(size=4), rng.uniform(0.5, 2, 4))
        r = rng.normal(size=(6, 4))

        def loss():
            return float(np.sum(r * engine.batch_norm(x, gamma, beta, state, training)[0]))

        _, cache = engine.batch_norm(x, gamma, beta, state, training)
        gx, gg, gb = engine.batch_norm_backward(r, cache)
        err, name = _check_grads({"x": (x, gx), "gamma": (gamma, gg), "beta": (beta, gb)}, loss, rng)
        if err >= worst:
            worst, where = err, f"{'train' if training else 'eval'}:{name}"
    return worst, where


def _grad_elementwise(rng):
    x = rng.normal(size=(5, 7))
    x[np.abs(x) < 1e-3] = 0.5  # stay off the ReLU kink
    r = rng.normal(size=(5, 7))
    err_relu = gradient_error(lambda: float(np.sum(r * engine.relu(x))), x, engine.relu_backward(r, x), rng,
                              max_coords=x.size)
    y = rng.normal(size=(5, 7)) * 3
    s = engine.sigmoid(y)
    err_sig = gradient_error(lambda: float(np.sum(r * engine.sigmoid(y))), y, engine.sigmoid_backward(r, s), rng,
                             max_coords=y.size)
    z = rng.normal(size=(5, 7))
    _, mask = engine.dropout(z, 0.3, True, engine.make_rng(3))
    err_drop = gradient_error(lambda: float(np.sum(r * engine.dropout(z, 0.3, True, engine.make_rng(3))[0])), z,
                              engine.dropout_backward(r, mask), rng, max_coords=z.size)
    errs = {"relu": err_relu, "sigmoid": err_sig, "dropout": err_drop}
    name = max(errs, key=errs.get)
    return errs[name], name


def _grad_affine_pool(rng):
    x = rng.normal(size=(4, 5))
    w, b = rng.normal(size=(5, 3)), rng.normal(size=3)
    r = rng.normal(size=(4, 3))
    gx, gw, gb = engine.affine_backward(r, x, w)
    err_aff, name = _check_grads({"x": (x, gx), "w": (w, gw), "b": (b, gb)},
                                 lambda: float(np.sum(r * engine.affine(x, w, b))), rng)
    grid = rng.normal(size=(2, 3, 4, 5))
    rp = rng.normal(size=(2, 5))
    err_pool = gradient_error(lambda: float(np.sum(rp * engine.global_average_pool(grid))), grid,
                              engine.global_average_pool_backward(rp, grid.shape), rng)
    return (err_aff, f"affine:{name}") if err_aff >= err_pool else (err_pool, "pool")


def _grad_attention(rng):
    grid = GridSpec(4, 3)
    head = AttentionHead(5, grid, 3, engine.make_rng(int(rng.integers(1 << 31))), hidden=6)
    x = rng.normal(size=(4, 4, 3, 5))
    r = rng.normal(size=(4, 4, 3, 3, 3))
    loss = lambda: float(np.sum(r * head.forward(x, training=True)))
    head.forward(x, training=True)
    gx = head.backward(r)
    pairs = {"x": (x, gx)}
    pairs.update({n: (p.value, p.grad) for n, p in head.parameters().items()})
    return _check_grads(pairs, loss, rng)


def _layer_check(rng, dynamic, branches, k, training):
    grid = GridSpec(4, 5)
    layer = DGridConvLayer(3, 4, k, grid, engine.make_rng(int(rng.integers(1 << 31))), dynamic=dynamic,
                           branches=branches, attention_hidden=5)
    x = rng.normal(size=(3, 4, 5, 3))
    r = rng.normal(size=(3, 4, 5, 4))
    loss = lambda: float(np.sum(r * layer.forward(x, training=training)))
    layer.forward(x, training=training)
    gx = layer.backward(r)
    pairs = {"x": (x, gx)}
    pairs.update({n: (p.value, p.grad) for n, p in layer.parameters().items()})
    return _check_grads(pairs, loss, rng)


def _grad_gridconv(rng):
    return _layer_check(rng, False, ("circular", "replicate"), 3, False)


def _grad_dgridconv(rng):
    worst, where = 0.0, ""
    for branches, k, training in [(("circular", "replicate"), 3, True),
                                  (("replicate:circular",), 3, False),
                                  (("circular", "replicate", "circular:replicate"), 1, True)]:
        err, name = _layer_check(rng, True, branches, k, training)
        if err >= worst:
            worst, where = err, f"{'+'.join(branches)}/k{k}:{name}"
    return worst, where


def _grad_loss(rng):
    pred, gt = rng.normal(size=(3, 5, 3)), rng.normal(size=(3, 5, 3))
    return gradient_error(lambda: gln_loss(pred, gt), pred, gln_loss_grad(pred, gt), rng, max_coords=pred.size), ""


def tiny_model(sgt_mode: str = "handcrafted", seed: int = 0, latent: int = 8, blocks: int = 1) -> GLNModel:
    return GLNModel(GLNConfig(latent_channels=latent, blocks=blocks, sgt_mode=sgt_mode, seed=seed), h36m_skeleton())


def _grad_gln(rng):
    """End-to-end tiny network in training mode; dropout masks are pinned by re-seeding."""
    model = tiny_model()
    topo = model.topology
    x = rng.normal(size=(4, topo.num_joints, 2)) * 0.5
    y = rng.normal(size=(4, topo.num_joints, 3)) * 0.3

    def loss():
        return gln_loss(model.forward(x, training=True, rng=engine.make_rng(11), epoch=0), y)

    pred = model.forward(x, training=True, rng=engine.make_rng(11), epoch=0)
    gx = model.backward(gln_loss_grad(pred, y))
    pairs = {"input": (x, gx)}
    pairs.update({n: (p.value, p.grad) for n, p in model.parameters().items()})
    return _check_grads(pairs, loss, rng)


def _grad_assignment(rng):
    """Gradient w.r.t. a continuous assignment used by both the forward and the averaging inverse."""
    model = tiny_model("random", seed=int(rng.integers(1000)))
    S = model.assignment.S
    S += rng.uniform(0.0, 0.2, size=S.shape) * (S > 0)  # keep support, vary the weights
    x = rng.normal(size=(3, model.topology.num_joints, 2)) * 0.5
    y = rng.normal(size=(3, model.topology.num_joints, 3)) * 0.3
    loss = lambda: gln_loss(model.forward(x, training=False), y)
    pred = model.forward(x, training=False)
    g3 = gln_loss_grad(pred, y)
    model.backward(g3)
    analytic = model.assignment_gradient(model.grad_grid_input, g3)
    return gradient_error(loss, S, analytic, rng, max_coords=48, directions=4), ""


GRADCHECKS = [
    ("conv2d", _grad_conv2d),
    ("padding", _grad_padding),
    ("batch_norm", _grad_batch_norm),
    ("relu/sigmoid/dropout", _grad_elementwise),
    ("affine/pool", _grad_affine_pool),
    ("attention_head", _grad_attention),
    ("gridconv_layer", _grad_gridconv),
    ("dgridconv_layer", _grad_dgridconv),
    ("loss", _grad_loss),
    ("assignment_inverse", _grad_assignment),
    ("gln_end_to_end", _grad_gln),
]


# ---------------------------------------------------------------------------
# Oracle checks
# ---------------------------------------------------------------------------

BRANCH_CHOICES = [
    ("circular", "replicate"),
    ("circular",),
    ("replicate",),
    ("circular:replicate", "replicate:circular"),
    ("circular", "replicate", "circular:replicate", "replicate:circular"),
]


def random_layer(rng, dynamic=True):
    k = int(rng.choice([1, 3, 5]))
    lo = max(2, (k - 1) // 2 + 1)
    grid = GridSpec(int(rng.integers(lo, 7)), int(rng.integers(lo, 7)))
    branches = BRANCH_CHOICES[int(rng.integers(len(BRANCH_CHOICES)))]
    layer = DGridConvLayer(int(rng.integers(1, 5)), int(rng.integers(1, 5)), k, grid,
                           engine.make_rng(int(rng.integers(1 << 31))), dynamic=dynamic, branches=branches,
                           attention_hidden=int(rng.integers(2, 9)))
    if layer.attention is not None:
        st = layer.attention.bn_state
        st.running_mean = rng.normal(size=st.running_mean.shape)
        st.running_var = rng.uniform(0.5, 2.0, size=st.running_var.shape)
    return layer


def conv_oracle_error(rng, cases: int = 200) -> float:
    worst = 0.0
    for _ in range(cases):
        layer = random_layer(rng)
        x = rng.normal(size=(layer.grid.h, layer.grid.p, layer.c_in))
        fast_static = layer.forward(x[None], use_attention=False)[0]
        fast_dynamic = layer.forward(x[None], use_attention=True)[0]
        worst = max(worst,
                    float(np.max(np.abs(fast_static - oracles.layer_loop(layer, x, use_attention=False)))),
                    float(np.max(np.abs(fast_dynamic - oracles.layer_loop(layer, x, use_attention=True)))))
    return worst


def saturation_error(rng, cases: int = 100) -> float:
    """Dynamic layer with every attention factor pinned at 1 versus the plain layer."""
    worst = 0.0
    for _ in range(cases):
        layer = random_layer(rng)
        layer.attention.fc2_w.value[...] = 0.0
        layer.attention.fc2_b.value[...] = 50.0
        x = rng.normal(size=(int(rng.integers(1, 4)), layer.grid.h, layer.grid.p, layer.c_in))
        alpha = layer.attention.forward(x)
        if np.min(alpha) < 1.0 - 1e-15:
            return float("inf")
        worst = max(worst, float(np.max(np.abs(layer.forward(x, use_attention=True)
                                               - layer.forward(x, use_attention=False)))))
    return worst


def _oracle_conv(rng):
    return conv_oracle_error(rng), "200 cases"


def _oracle_saturation(rng):
    return saturation_error(rng), "100 cases"


def _oracle_sgt(rng):
    topo = h36m_skeleton()
    worst = 0.0
    for _ in range(50):
        S = random_sgt(topo, GridSpec(), rng)
        G = rng.normal(size=(topo.num_joints, 3))
        D = rng.normal(size=(25, 3))
        worst = max(worst,
                    float(np.max(np.abs(sgt_forward(S, G).reshape(25, 3) - oracles.sgt_forward_loop(S.S, G)))),
                    float(np.max(np.abs(sgt_inverse(S, D) - oracles.sgt_inverse_loop(S.S, D)))))
    return worst, "50 layouts"


def _oracle_procrustes(rng):
    worst = 0.0
    for _ in range(100):
        pred, gt = rng.normal(size=(17, 3)) * 100, rng.normal(size=(17, 3)) * 100
        for scale in (True, False):
            fast = procrustes_align(pred, gt, scale=scale).aligned[0]
            worst = max(worst, float(np.max(np.abs(fast - oracles.quaternion_procrustes(pred, gt, scale)))))
    return worst, "100 cases x 2 modes"


def _oracle_pa_bound(rng):
    # least squares alignment bounds the summed squared error, not the mean distance
    worst = -np.inf
    for _ in range(1000):
        gt = rng.normal(size=(1, 17, 3)) * 200
        pred = gt + rng.normal(size=gt.shape) * rng.uniform(1, 300)
        before = float(np.sum((pred - gt) ** 2))
        for scale in (True, False):
            after = float(np.sum((procrustes_align(pred, gt, scale=scale).aligned - gt) ** 2))
            worst = max(worst, (after - before) / before)
    return max(worst, 0.0), "relative increase of squared error over 1000 cases x 2 modes"


def _oracle_mpjpe(rng):
    pred, gt = rng.normal(size=(20, 17, 3)) * 100, rng.normal(size=(20, 17, 3)) * 100
    return abs(mpjpe(pred, gt) - oracles.mpjpe_loop(pred, gt)), ""


def reprojection_error(ds) -> tuple[float, float]:
    """Worst pixel error re-projecting stored 3D poses, and worst mm error of the uvz back-projection.

    The root is placed on the ray through its own projection at the
    camera's ``root_depth``.
    """
    root = ds.topology.root_index
    worst_px = worst_mm = 0.0
    for i in range(len(ds)):
        cam = ds.camera(i)
        u0, v0 = ds.pose2d[i, root]
        root_cam = np.array([(u0 - cam.cx) * cam.root_depth / cam.fx, (v0 - cam.cy) * cam.root_depth / cam.fy,
                             cam.root_depth])
        px = oracles.project_loop(ds.pose3d[i] + root_cam, cam.fx, cam.fy, cam.cx, cam.cy)
        worst_px = max(worst_px, float(np.max(np.abs(px - ds.pose2d[i]))))
        uvz = np.concatenate([ds.pose2d[i], ds.pose3d[i, :, 2:]], axis=1)
        worst_mm = max(worst_mm, float(np.max(np.abs(uvz_project(uvz, cam, root) - ds.pose3d[i]))))
    return worst_px, worst_mm


def _oracle_projection(rng):
    worst_px, worst_mm = reprojection_error(synth_generate(200, rng=rng))
    return max(worst_px, worst_mm), f"px {worst_px:.1e}, mm {worst_mm:.1e}"


def check_dataset(path, topology=None) -> CheckResult:
    """Reprojection consistency of a dataset file that carries cameras."""
    t0 = time.perf_counter()
    name = f"reprojection {Path(path).name}"
    tol = ORACLE_TOL["projection_consistency"]
    ds = load_dataset(path, topology)
    if ds.cameras is None:
        return CheckResult("data", name, float("inf"), tol, time.perf_counter() - t0, "no camera sidecar")
    worst_px, worst_mm = reprojection_error(ds)
    return CheckResult("data", name, max(worst_px, worst_mm), tol, time.perf_counter() - t0,
                       f"{len(ds)} samples, px {worst_px:.1e}, mm {worst_mm:.1e}")


def _oracle_autogrids(rng):
    grid = GridSpec()
    state = init_autogrids(None, grid, rng, num_joints=17)
    _, noiseless = autogrids_sample(state, None, None)
    mismatch = float(np.sum(noiseless.S != rowwise_onehot(state.s_prob)))
    # uniform logits: every joint equally likely per row
    state.s_prob = np.ones((grid.cells, 17))
    draws = 10_000
    counts = np.zeros(17)
    for _ in range(draws):
        S_soft, sampled = autogrids_sample(state, rng, 0)
        counts += sampled.S[0]
    p = 1.0 / 17
    sigma = np.sqrt(draws * p * (1 - p))
    z = float(np.max(np.abs(counts - draws * p)) / sigma)
    # value: worst z over 4 (passes at <= 1) plus any argmax mismatch
    return z / 4.0 + mismatch, f"max |z| = {z:.2f}"


ORACLES = [
    ("gridconv_vs_loops", _oracle_conv),
    ("saturated_attention", _oracle_saturation),
    ("sgt_vs_loops", _oracle_sgt),
    ("procrustes_vs_quaternion", _oracle_procrustes),
    ("alignment_reduces_sq_error", _oracle_pa_bound),
    ("mpjpe_vs_loop", _oracle_mpjpe),
    ("projection_consistency", _oracle_projection),
    ("autogrids_sampling", _oracle_autogrids),
]
ORACLE_TOL = {
    "gridconv_vs_loops": 1e-10,
    "saturated_attention": 1e-6,
    "sgt_vs_loops": 1e-12,
    "procrustes_vs_quaternion": 1e-9,
    "alignment_reduces_sq_error": 1e-9,
    "mpjpe_vs_loop": 1e-12,
    "projection_consistency": 1e-6,
    "autogrids_sampling": 1.0,
}


# ---------------------------------------------------------------------------
# Round trips
# ---------------------------------------------------------------------------


def _rt_sgt(rng):
    topo = h36m_skeleton()
    failures = 0
    for _ in range(1000):
        S = random_sgt(topo, GridSpec(), rng)
        G = rng.normal(size=(topo.num_joints, 3)) * 1000
        failures += not np.array_equal(sgt_inverse(S, sgt_forward(S, G)), G)
    return float(failures), "inexact cases out of 1000"


def _rt_replica_mean(rng):
    S = np.array([[1.0], [1.0]])
    return float(abs(sgt_inverse(S, np.array([[2.0], [4.0]]))[0, 0] - 3.0)), "(2, 4) -> 3"


def _rt_handcrafted(rng):
    topo = h36m_skeleton()
    report = validate_constraints(build_handcrafted_layout(topo), topo)
    bad = len(report.violations) + (report.coverage != topo.num_joints)
    return float(bad), f"coverage {report.coverage}/{topo.num_joints}"


def _rt_layout_csv(rng):
    topo = h36m_skeleton()
    with tempfile.TemporaryDirectory() as tmp:
        bad = 0
        for _ in range(20):
            S = random_sgt(topo, GridSpec(), rng)
            path = Path(tmp) / "layout.csv"
            path.write_text(layout_to_csv(S, topo))
            bad += not np.array_equal(load_layout(path, topo).S, S.S)
    return float(bad), "20 layouts"


def _rt_normalization(rng):
    ds = synth_generate(50, rng=rng)
    back = denormalize_2d(normalize_2d(ds.pose2d, ds.cameras), ds.cameras)
    return float(np.max(np.abs(back - ds.pose2d))), ""


def _rt_dataset(rng):
    ds = synth_generate(30, rng=rng)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "d.csv"
        save_dataset(ds, path)
        back = load_dataset(path)
    bad = (not np.array_equal(back.pose2d, ds.pose2d)) + (not np.array_equal(back.pose3d, ds.pose3d)) + (
        not np.array_equal(back.cameras, ds.cameras))
    return float(bad), "fields differing"


def _rt_checkpoint(rng):
    worst = 0.0
    x = rng.normal(size=(5, 17, 2)) * 0.5
    with tempfile.TemporaryDirectory() as tmp:
        for mode in ("handcrafted", "learnable", "random"):
            model = tiny_model(mode, seed=int(rng.integers(1000)))
            path = Path(tmp) / f"{mode}.npz"
            save_model(model, path)
            back = load_model(path)
            worst = max(worst, float(np.max(np.abs(back.predict(x) - model.predict(x)))))
    return worst, "3 sgt modes"


ROUNDTRIPS = [
    ("sgt_inverse_of_forward", _rt_sgt),
    ("replica_mean", _rt_replica_mean),
    ("handcrafted_layout_valid", _rt_handcrafted),
    ("layout_csv", _rt_layout_csv),
    ("normalization", _rt_normalization),
    ("dataset_csv", _rt_dataset),
    ("checkpoint", _rt_checkpoint),
]
ROUNDTRIP_TOL = {"normalization": 1e-12}

SUITES = {
    "gradcheck": (GRADCHECKS, lambda name: GRAD_TOL),
    "oracle": (ORACLES, ORACLE_TOL.__getitem__),
    "roundtrip": (ROUNDTRIPS, lambda name: ROUNDTRIP_TOL.get(name, 0.0)),
}


def run_suite(suite: str, seed: int = 0, on_result=None) -> list[CheckResult]:
    checks, tol = SUITES[suite]
    results = []
    for i, (name, fn) in enumerate(checks):
        rng = engine.make_rng(seed * 1000 + i)
        t0 = time.perf_counter()
        value, detail = fn(rng)
        res = CheckResult(suite, name, float(value), tol(name), time.perf_counter() - t0, detail)
        results.append(res)
        if on_result is not None:
            on_result(res)
    return results


def run_suites(names, seed: int = 0, on_result=None) -> list[CheckResult]:
    out = []
    for name in names:
        out.extend(run_suite(name, seed, on_result))
    return out
