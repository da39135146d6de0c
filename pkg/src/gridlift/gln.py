"""Grid lifting network: SGT -> expand -> residual blocks -> shrink -> inverse SGT.

Training uses mean squared joint distance, Adam on every parameter, and the
epoch-indexed learning-rate schedules. Checkpoints are ``.npz`` archives
written with fixed zip timestamps so identical models give identical bytes.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from gridlift import engine
from gridlift.engine import AdamHyper, BatchNormState, Parameter
from gridlift.gridconv import DEFAULT_BRANCHES, DGridConvLayer
from gridlift.sgt import (
    AssignmentMatrix,
    AutoGridsState,
    GridSpec,
    SkeletonTopology,
    autogrids_sample,
    build_handcrafted_layout,
    init_autogrids,
    load_layout,
    random_sgt,
    ste_backward,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gridlift-checkpoint/1"
SGT_MODES = ("handcrafted", "learnable", "random", "file")
NORMALIZATIONS = ("standard", "uvz")
S_PROB_FLOOR = 1e-8


class NumericalAbort(RuntimeError):
    def __init__(self, message, epoch, batch_index):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index


class CheckpointError(ValueError):
    pass


def parse_kernel_plan(plan, blocks: int) -> list[int]:
    """Expand an ``a-bc-bc-d`` plan into one kernel size per conv layer."""
    if isinstance(plan, str):
        groups = plan.split("-")
        if len(groups) != blocks + 2:
            raise ValueError(f"kernel plan {plan!r} needs {blocks + 2} groups for {blocks} blocks")
        if len(groups[0]) != 1 or len(groups[-1]) != 1 or any(len(g) != 2 for g in groups[1:-1]):
            raise ValueError(f"kernel plan {plan!r} must look like a-bc-...-d")
        sizes = [int(ch) for g in groups for ch in g]
    else:
        sizes = [int(v) for v in plan]
        if len(sizes) != 2 * blocks + 2:
            raise ValueError(f"kernel plan needs {2 * blocks + 2} sizes for {blocks} blocks, got {len(sizes)}")
    for s in sizes:
        if s < 1 or s % 2 == 0:
            raise ValueError(f"kernel sizes must be odd and positive, got {s}")
    return sizes


def default_kernel_plan(blocks: int) -> str:
    return "-".join(["3"] + ["33"] * blocks + ["3"])


@dataclass
class GLNConfig:
    latent_channels: int = 256
    blocks: int = 2
    kernel_plan: str | None = None
    dropout_p: float = 0.25
    dynamic: bool = True
    grid_h: int = 5
    grid_p: int = 5
    sgt_mode: str = "handcrafted"
    layout_path: str | None = None
    normalization: str = "standard"
    branches: tuple = DEFAULT_BRANCHES
    attention_hidden: int = 16
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    gumbel_temperature: float = 1.0
    gumbel_noise: bool = True
    gumbel_cutoff: int = 30
    seed: int = 0

    def __post_init__(self):
        self.branches = tuple(self.branches)
        if self.kernel_plan is None:
            self.kernel_plan = default_kernel_plan(self.blocks)
        if self.blocks < 0:
            raise ValueError("blocks must be >= 0")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be >= 1")
        if self.sgt_mode not in SGT_MODES:
            raise ValueError(f"sgt_mode must be one of {SGT_MODES}")
        if self.sgt_mode == "file" and not self.layout_path:
            raise ValueError("sgt_mode 'file' needs layout_path")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        parse_kernel_plan(self.kernel_plan, self.blocks)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.grid_h, self.grid_p)

    def kernel_sizes(self) -> list[int]:
        return parse_kernel_plan(self.kernel_plan, self.blocks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branches"] = list(self.branches)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GLNConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GLNConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainHyper:
    batch_size: int = 200
    epochs: int = 100
    base_lr: float = 1e-3
    lr_schedule: str = "auto"
    lr_decay_epoch: float = 0.96
    lr_decay_step: float = 0.1
    lr_step_epochs: int = 10

    def __post_init__(self):
        if self.batch_size < 2 or self.epochs < 1 or self.base_lr <= 0:
            raise ValueError("batch_size >= 2, epochs >= 1 and base_lr > 0 are required")
        if self.lr_schedule not in ("auto", "epoch", "step"):
            raise ValueError("lr_schedule must be 'auto', 'epoch' or 'step'")

    def schedule_for(self, sgt_mode: str) -> str:
        if self.lr_schedule != "auto":
            return self.lr_schedule
        return "step" if sgt_mode == "learnable" else "epoch"

    def lr_at(self, epoch: int, sgt_mode: str) -> float:
        if self.schedule_for(sgt_mode) == "step":
            return self.base_lr * self.lr_decay_step ** (epoch // self.lr_step_epochs)
        return self.base_lr * self.lr_decay_epoch**epoch


# ---------------------------------------------------------------------------
# Network pieces
# ---------------------------------------------------------------------------


class GridUnit:
    """Grid convolution followed by batch norm, ReLU and dropout."""

    def __init__(self, c_in, c_out, k, config: GLNConfig, rng):
        self.conv = DGridConvLayer(c_in, c_out, k, config.grid, rng, dynamic=config.dynamic,
                                   branches=config.branches, attention_hidden=config.attention_hidden,
                                   bn_momentum=config.bn_momentum, bn_eps=config.bn_eps)
        self.gamma = Parameter(np.ones(c_out))
        self.beta = Parameter(np.zeros(c_out))
        self.bn_state = BatchNormState.fresh(c_out, config.bn_momentum, config.bn_eps)
        self.dropout_p = config.dropout_p
        self._cache = None

    def parameters(self):
        out = {f"conv.{k}": v for k, v in self.conv.parameters().items()}
        out["bn.gamma"] = self.gamma
        out["bn.beta"] = self.beta
        return out

    def buffers(self):
        out = {f"conv.{k}": v for k, v in self.conv.buffers().items()}
        out["bn"] = self.bn_state
        return out

    def forward(self, x, training, rng):
        y = self.conv.forward(x, training)
        shape = y.shape
        z, bn_cache = engine.batch_norm(y.reshape(-1, shape[-1]), self.gamma.value, self.beta.value,
                                        self.bn_state, training)
        z = z.reshape(shape)
        a = engine.relu(z)
        out, mask = engine.dropout(a, self.dropout_p, training, rng)
        self._cache = (shape, bn_cache, z, mask)
        return out

    def backward(self, grad):
        shape, bn_cache, z, mask = self._cache
        g = engine.dropout_backward(grad, mask)
        g = engine.relu_backward(g, z)
        g, self.gamma.grad, self.beta.grad = engine.batch_norm_backward(g.reshape(-1, shape[-1]), bn_cache)
        return self.conv.backward(g.reshape(shape))


class ResidualBlock:
    """Two grid units with an identity skip added after the second dropout."""

    def __init__(self, channels, k1, k2, config, rng):
        self.unit1 = GridUnit(channels, channels, k1, config, rng)
        self.unit2 = GridUnit(channels, channels, k2, config, rng)

    def parameters(self):
        out = {f"unit1.{k}": v for k, v in self.unit1.parameters().items()}
        out.update({f"unit2.{k}": v for k, v in self.unit2.parameters().items()})
        return out

    def buffers(self):
        out = {f"unit1.{k}": v for k, v in self.unit1.buffers().items()}
        out.update({f"unit2.{k}": v for k, v in self.unit2.buffers().items()})
        return out

    def forward(self, x, training, rng):
        return x + self.unit2.forward(self.unit1.forward(x, training, rng), training, rng)

    def backward(self, grad):
        return grad + self.unit1.backward(self.unit2.backward(grad))


class GLNModel:
    """Grid lifting network with its assignment state."""

    def __init__(self, config: GLNConfig, topology: SkeletonTopology, in_channels: int = 2,
                 out_channels: int = 3, assignment: AssignmentMatrix | None = None):
        self.config = config
        self.topology = topology
        grid = config.grid
        grid.check_fits(topology.num_joints)
        self.in_channels, self.out_channels = in_channels, out_channels
        rng = engine.make_rng(config.seed)
        self.autogrids: AutoGridsState | None = None
        self.s_prob: Parameter | None = None
        if config.sgt_mode == "learnable":
            seed_layout = _try_handcrafted(topology, grid)
            self.autogrids = init_autogrids(
                seed_layout, grid, rng, num_joints=topology.num_joints,
                temperature=config.gumbel_temperature, noise_enabled=config.gumbel_noise,
                noise_cutoff_epoch=config.gumbel_cutoff,
            )
            self.s_prob = Parameter(self.autogrids.s_prob)
            _, first = autogrids_sample(self.autogrids, None, None)
            self.last_covering = first if first.is_covering() else (
                seed_layout or random_sgt(topology, grid, rng))
            self.assignment = None
        else:
            if assignment is not None:
                self.assignment = assignment
            elif config.sgt_mode == "handcrafted":
                self.assignment = build_handcrafted_layout(topology, grid)
            elif config.sgt_mode == "random":
                self.assignment = random_sgt(topology, grid, rng)
            else:
                self.assignment = load_layout(config.layout_path, topology, grid)
            if not self.assignment.is_covering():
                raise ValueError("the fixed assignment must place every joint on the grid")
            self.last_covering = self.assignment
        sizes = config.kernel_sizes()
        c = config.latent_channels
        self.expand = GridUnit(in_channels, c, sizes[0], config, rng)
        self.blocks = [ResidualBlock(c, sizes[1 + 2 * b], sizes[2 + 2 * b], config, rng)
                       for b in range(config.blocks)]
        self.shrink = DGridConvLayer(c, out_channels, sizes[-1], grid, rng, dynamic=config.dynamic,
                                     branches=config.branches, attention_hidden=config.attention_hidden,
                                     bn_momentum=config.bn_momentum, bn_eps=config.bn_eps)
        self._cache = None
        self.grad_grid_input = None
        self.substitution_events = 0

    # -- bookkeeping --------------------------------------------------------

    def parameters(self) -> dict[str, Parameter]:
        out = {f"expand.{k}": v for k, v in self.expand.parameters().items()}
        for i, blk in enumerate(self.blocks):
            out.update({f"block{i}.{k}": v for k, v in blk.parameters().items()})
        out.update({f"shrink.{k}": v for k, v in self.shrink.parameters().items()})
        if self.s_prob is not None:
            out["sgt.s_prob"] = self.s_prob
        return out

    def buffers(self) -> dict[str, BatchNormState]:
        out = {f"expand.{k}": v for k, v in self.expand.buffers().items()}
        for i, blk in enumerate(self.blocks):
            out.update({f"block{i}.{k}": v for k, v in blk.buffers().items()})
        out.update({f"shrink.{k}": v for k, v in self.shrink.buffers().items()})
        return out

    def num_parameters(self, attention_only: bool = False) -> int:
        return sum(p.size for name, p in self.parameters().items()
                   if not attention_only or ".attention." in name)

    # -- assignment --------------------------------------------------------

    def current_assignment(self, training: bool = False, rng=None, epoch: int | None = None):
        """Return ``(S_forward, S_inverse, substituted_columns)``."""
        if self.autogrids is None:
            S = self.assignment.S
            return S, S, np.zeros(S.shape[1], dtype=bool)
        _, sampled = autogrids_sample(self.autogrids, rng, epoch if training else None)
        S = sampled.S
        missing = S.sum(axis=0) == 0
        if missing.any():
            S_inv = S.copy()
            S_inv[:, missing] = self.last_covering.S[:, missing]
            self.substitution_events += 1
            logger.debug("assignment misses joints %s; using previous covering cells", np.flatnonzero(missing))
        else:
            S_inv = S
            if training:
                self.last_covering = sampled
        return S, S_inv, missing

    def eval_assignment(self) -> AssignmentMatrix:
        if self.autogrids is None:
            return self.assignment
        return autogrids_sample(self.autogrids, None, None)[1]

    def coverage(self) -> int:
        return self.eval_assignment().coverage()

    # -- forward / backward -------------------------------------------------

    def forward(self, G2d: np.ndarray, training: bool = False, rng=None, epoch: int | None = None):
        G2d = np.asarray(G2d, dtype=np.float64)
        if G2d.ndim != 3 or G2d.shape[1:] != (self.topology.num_joints, self.in_channels):
            raise ValueError(f"expected input (N, {self.topology.num_joints}, {self.in_channels}), got {G2d.shape}")
        if not np.all(np.isfinite(G2d)):
            raise ValueError("input poses contain non-finite values")
        if training and rng is None:
            raise ValueError("training forward needs an rng")
        grid = self.config.grid
        n = G2d.shape[0]
        S, S_inv, missing = self.current_assignment(training, rng, epoch)
        D = np.matmul(S, G2d).reshape(n, grid.h, grid.p, self.in_channels)
        h = self.expand.forward(D, training, rng)
        for blk in self.blocks:
            h = blk.forward(h, training, rng)
        out = self.shrink.forward(h, training)
        D3 = out.reshape(n, grid.cells, self.out_channels)
        counts = S_inv.sum(axis=0)
        W = (S_inv / counts).T
        G3 = np.matmul(W, D3)
        self._cache = (G2d, S, S_inv, missing, counts, W, D3)
        return G3

    def backward(self, grad_G3: np.ndarray) -> np.ndarray:
        """Backpropagate ``dL/dG3``; fills every parameter's ``grad`` and returns ``dL/dG2d``."""
        G2d, S, S_inv, missing, counts, W, D3 = self._cache
        grid = self.config.grid
        n = grad_G3.shape[0]
        dD3 = np.matmul(W.T, grad_G3)
        g = self.shrink.backward(dD3.reshape(n, grid.h, grid.p, self.out_channels))
        for blk in reversed(self.blocks):
            g = blk.backward(g)
        g = self.expand.backward(g)
        dD = g.reshape(n, grid.cells, self.in_channels)
        self.grad_grid_input = dD
        if self.s_prob is not None:
            self.s_prob.grad = ste_backward(self.assignment_gradient(dD, grad_G3))
        return np.matmul(S.T, dD)

    def assignment_gradient(self, dD: np.ndarray, grad_G3: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the assignment as a continuous matrix (both uses of S)."""
        G2d, S, S_inv, missing, counts, W, D3 = self._cache
        grad_fwd = np.einsum("npc,njc->pj", dD, G2d)
        dW = np.einsum("njc,npc->jp", grad_G3, D3)  # d/dW, W = (S_inv / counts).T
        dWt = dW.T
        Wt = W.T
        grad_inv = (dWt - np.sum(dWt * Wt, axis=0, keepdims=True)) / counts
        grad_inv[:, missing] = 0.0
        return grad_fwd + grad_inv

    def predict(self, G2d: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        G2d = np.asarray(G2d, dtype=np.float64)
        outs = [self.forward(G2d[i : i + batch_size], training=False)
                for i in range(0, G2d.shape[0], batch_size)]
        return np.concatenate(outs, axis=0)

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def apply_adam(self, lr: float):
        hyper = AdamHyper(lr=lr)
        for p in self.parameters().values():
            engine.adam_update(p, p.grad, hyper)
        if self.s_prob is not None:
            self.s_prob.value = np.maximum(self.s_prob.value, S_PROB_FLOOR)
            self.autogrids.s_prob = self.s_prob.value


def _try_handcrafted(topology, grid):
    try:
        return build_handcrafted_layout(topology, grid)
    except ValueError:
        return None


def build_gln(config: GLNConfig, topology: SkeletonTopology) -> GLNModel:
    return GLNModel(config, topology)


def closed_form_parameter_count(config: GLNConfig, num_joints: int, in_channels: int = 2,
                                out_channels: int = 3) -> dict:
    """Parameter count from the configuration alone."""
    grid = config.grid
    sizes = config.kernel_sizes()
    c = config.latent_channels
    layers = [(in_channels, c, sizes[0], True)]
    for b in range(config.blocks):
        layers += [(c, c, sizes[1 + 2 * b], True), (c, c, sizes[2 + 2 * b], True)]
    layers.append((c, out_channels, sizes[-1], False))
    nb = len(config.branches)
    hid = config.attention_hidden
    conv = attn = bn = 0
    for cin, cout, k, has_bn in layers:
        conv += nb * (k * k * cin * cout + cout)
        if config.dynamic:
            n_out = grid.cells * k * k
            attn += 2 * cin + cin * hid + hid + hid * n_out + n_out
        if has_bn:
            bn += 2 * cout
    sgt = grid.cells * num_joints if config.sgt_mode == "learnable" else 0
    return {"conv": conv, "attention": attn, "batch_norm": bn, "sgt": sgt,
            "total": conv + attn + bn + sgt}


# ---------------------------------------------------------------------------
# Loss and training
# ---------------------------------------------------------------------------


def gln_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean over samples and joints of the squared joint distance."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target {gt.shape}")
    n, j = pred.shape[:2]
    return float(np.sum((pred - gt) ** 2) / (n * j))


def gln_loss_grad(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    n, j = pred.shape[:2]
    return 2.0 * (pred - gt) / (n * j)


HISTORY_COLUMNS = ("epoch", "lr", "loss", "train_mpjpe_mm", "sgt_coverage", "gumbel_noise")


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)

    def column(self, name):
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"], repr(r["lr"]), repr(r["loss"]), repr(r["train_mpjpe_mm"]),
                        r["sgt_coverage"], r["gumbel_noise"]])
        return buf.getvalue()


def _batches(order, batch_size):
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    # batch norm cannot train on a single row
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def default_to_mm(pred):
    return pred * 1000.0


def mean_joint_error(pred_mm, gt_mm) -> float:
    return float(np.mean(np.linalg.norm(pred_mm - gt_mm, axis=-1)))


def train(model: GLNModel, X: np.ndarray, Y: np.ndarray, hyper: TrainHyper, rng: np.random.Generator,
          to_mm=default_to_mm, Y_mm: np.ndarray | None = None, callback=None) -> TrainHistory:
    """Fit ``model`` on normalized inputs ``X`` (N, J, 2) and targets ``Y`` (N, J, 3).

    ``to_mm`` maps normalized predictions to millimetres for the per-epoch
    training MPJPE; ``Y_mm`` defaults to ``to_mm(Y)``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("training needs at least two samples")
    Y_mm = to_mm(Y) if Y_mm is None else Y_mm
    history = TrainHistory()
    mode = model.config.sgt_mode
    for epoch in range(hyper.epochs):
        lr = hyper.lr_at(epoch, mode)
        order = rng.permutation(X.shape[0])
        total, count = 0.0, 0
        for b, idx in enumerate(_batches(order, hyper.batch_size)):
            pred = model.forward(X[idx], training=True, rng=rng, epoch=epoch)
            loss = gln_loss(pred, Y[idx])
            if not np.isfinite(loss):
                raise NumericalAbort(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b)
            model.backward(gln_loss_grad(pred, Y[idx]))
            try:
                model.apply_adam(lr)
            except ValueError as exc:
                raise NumericalAbort(f"{exc} at epoch {epoch}, batch {b}", epoch, b) from exc
            total += loss * len(idx)
            count += len(idx)
        mpjpe = mean_joint_error(to_mm(model.predict(X)), Y_mm)
        noise = int(model.autogrids is not None and model.autogrids.noise_active(epoch))
        row = {"epoch": epoch, "lr": lr, "loss": total / count, "train_mpjpe_mm": mpjpe,
               "sgt_coverage": model.coverage(), "gumbel_noise": noise}
        history.rows.append(row)
        logger.info("epoch %d lr %.6g loss %.6g mpjpe %.3f mm coverage %d",
                    epoch, lr, row["loss"], mpjpe, row["sgt_coverage"])
        if callback is not None:
            callback(row)
    return history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _npy_bytes(arr) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_model(model: GLNModel, path, extra: dict | None = None):
    """Write config, topology, parameters, Adam moments, BN stats and assignment state."""
    topo = model.topology
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "topology": {"joint_names": list(topo.joint_names), "edges": [list(e) for e in topo.edges],
                     "root_index": topo.root_index},
        "in_channels": model.in_channels,
        "out_channels": model.out_channels,
        "extra": extra or {},
    }
    arrays = {"meta.json": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, p in model.parameters().items():
        arrays[f"param/{name}/value"] = p.value
        arrays[f"param/{name}/adam_m"] = p.adam_m
        arrays[f"param/{name}/adam_v"] = p.adam_v
        arrays[f"param/{name}/step_count"] = np.array(p.step_count, dtype=np.int64)
    for name, st in model.buffers().items():
        arrays[f"buffer/{name}/running_mean"] = st.running_mean
        arrays[f"buffer/{name}/running_var"] = st.running_var
    if model.autogrids is None:
        arrays["sgt/assignment"] = model.assignment.S
    arrays["sgt/last_covering"] = model.last_covering.S
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            zf.writestr(info, _npy_bytes(arrays[name]))


def load_model(path, topology: SkeletonTopology | None = None) -> GLNModel:
    """Rebuild a model from a checkpoint; ``topology`` (if given) must match."""
    with np.load(path, allow_pickle=False) as z:
        data = {k: z[k] for k in z.files}
    if "meta.json" not in data:
        raise CheckpointError("not a gridlift checkpoint")
    meta = json.loads(bytes(data["meta.json"]).decode())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
    t = meta["topology"]
    stored = SkeletonTopology(tuple(t["joint_names"]), tuple(tuple(e) for e in t["edges"]), t["root_index"])
    if topology is not None and (topology.num_joints != stored.num_joints
                                 or topology.joint_names != stored.joint_names):
        raise CheckpointError(
            f"checkpoint skeleton has {stored.num_joints} joints {stored.joint_names}, "
            f"expected {topology.num_joints}"
        )
    config = GLNConfig.from_dict(meta["config"])
    grid = config.grid
    # the stored assignment is authoritative; a layout file may no longer exist
    stored_S = AssignmentMatrix(data["sgt/assignment"].copy(), grid) if "sgt/assignment" in data else None
    model = GLNModel(config, stored, meta["in_channels"], meta["out_channels"], assignment=stored_S)
    params = model.parameters()
    for name, p in params.items():
        key = f"param/{name}/value"
        if key not in data:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if data[key].shape != p.value.shape:
            raise CheckpointError(f"parameter {name} has shape {data[key].shape}, expected {p.value.shape}")
        p.value = data[key].copy()
        p.adam_m = data[f"param/{name}/adam_m"].copy()
        p.adam_v = data[f"param/{name}/adam_v"].copy()
        p.step_count = int(data[f"param/{name}/step_count"].item())
    for name, st in model.buffers().items():
        st.running_mean = data[f"buffer/{name}/running_mean"].copy()
        st.running_var = data[f"buffer/{name}/running_var"].copy()
    if model.autogrids is not None:
        model.autogrids.s_prob = model.s_prob.value
    model.last_covering = AssignmentMatrix(data["sgt/last_covering"].copy(), grid)
    return model


def read_checkpoint_meta(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        return json.loads(bytes(z["meta.json"]).decode())
