"""scikit-learn style wrappers around the lifting network and the grid transform."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from gridlift.gln import GLNConfig, GLNModel, TrainHyper, mean_joint_error, train
from gridlift.gridconv import DEFAULT_BRANCHES
from gridlift.sgt import (
    AssignmentMatrix,
    GridSpec,
    build_handcrafted_layout,
    h36m_skeleton,
    load_layout,
    random_sgt,
    sgt_forward,
    sgt_inverse,
)
from gridlift.validation import (
    check_matching_samples,
    check_poses,
    check_positive_int,
    check_probability,
    check_seed,
    rng_from,
)


class GridLiftingRegressor(RegressorMixin, BaseEstimator):
    """Lift normalized 2D poses (N, J, 2) to normalized 3D poses (N, J, 3).

    Flat inputs of shape (N, J*2) are accepted; ``predict`` then returns
    (N, J*3). ``score`` is the negative mean joint distance in target units.
    """

    def __init__(self, latent_channels=256, blocks=2, kernel_plan=None, dropout_p=0.25, dynamic=True,
                 sgt_mode="handcrafted", layout_path=None, branches=DEFAULT_BRANCHES, batch_size=200,
                 epochs=100, base_lr=1e-3, topology=None, random_state=0):
        self.latent_channels = latent_channels
        self.blocks = blocks
        self.kernel_plan = kernel_plan
        self.dropout_p = dropout_p
        self.dynamic = dynamic
        self.sgt_mode = sgt_mode
        self.layout_path = layout_path
        self.branches = branches
        self.batch_size = batch_size
        self.epochs = epochs
        self.base_lr = base_lr
        self.topology = topology
        self.random_state = random_state

    def _config(self, seed):
        return GLNConfig(
            latent_channels=check_positive_int(self.latent_channels, "latent_channels"),
            blocks=check_positive_int(self.blocks, "blocks", minimum=0),
            kernel_plan=self.kernel_plan,
            dropout_p=check_probability(self.dropout_p, "dropout_p"),
            dynamic=bool(self.dynamic),
            sgt_mode=self.sgt_mode,
            layout_path=self.layout_path,
            branches=tuple(self.branches),
            seed=seed,
        )

    def fit(self, X, y):
        topology = self.topology or h36m_skeleton()
        j = topology.num_joints
        X, _ = check_poses(X, j, 2, "X")
        y, flat = check_poses(y, j, 3, "y")
        check_matching_samples(X, y)
        seed = check_seed(self.random_state)
        hyper = TrainHyper(batch_size=check_positive_int(self.batch_size, "batch_size", minimum=2),
                           epochs=check_positive_int(self.epochs, "epochs"), base_lr=float(self.base_lr))
        self.model_ = GLNModel(self._config(seed), topology)
        self.history_ = train(self.model_, X, y, hyper, rng_from(seed), to_mm=lambda a: a)
        self.topology_ = topology
        self.n_joints_ = j
        self.flat_output_ = flat
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X, _ = check_poses(X, self.n_joints_, 2, "X")
        pred = self.model_.predict(X)
        return pred.reshape(pred.shape[0], -1) if self.flat_output_ else pred

    def score(self, X, y, sample_weight=None):
        check_is_fitted(self, "model_")
        y, _ = check_poses(y, self.n_joints_, 3, "y")
        pred = self.predict(X).reshape(y.shape)
        if sample_weight is None:
            return -mean_joint_error(pred, y)
        per_sample = np.linalg.norm(pred - y, axis=-1).mean(axis=1)
        return -float(np.average(per_sample, weights=sample_weight))


class SemanticGridTransform(TransformerMixin, BaseEstimator):
    """Place joint features (N, J, C) on an H x P grid and back.

    ``sgt_mode`` picks the assignment: the shipped handcrafted layout, a
    random covering layout, or a layout file.
    """

    def __init__(self, sgt_mode="handcrafted", layout_path=None, grid_h=5, grid_p=5, topology=None,
                 random_state=0):
        self.sgt_mode = sgt_mode
        self.layout_path = layout_path
        self.grid_h = grid_h
        self.grid_p = grid_p
        self.topology = topology
        self.random_state = random_state

    def fit(self, X=None, y=None):
        topology = self.topology or h36m_skeleton()
        grid = GridSpec(check_positive_int(self.grid_h, "grid_h"), check_positive_int(self.grid_p, "grid_p"))
        grid.check_fits(topology.num_joints)
        if self.sgt_mode == "handcrafted":
            S = build_handcrafted_layout(topology, grid)
        elif self.sgt_mode == "random":
            S = random_sgt(topology, grid, rng_from(self.random_state))
        elif self.sgt_mode == "file":
            if not self.layout_path:
                raise ValueError("sgt_mode 'file' needs layout_path")
            S = load_layout(self.layout_path, topology, grid)
        else:
            raise ValueError(f"sgt_mode must be 'handcrafted', 'random' or 'file', got {self.sgt_mode!r}")
        self.assignment_: AssignmentMatrix = S
        self.topology_ = topology
        self.grid_ = grid
        return self

    def transform(self, X):
        check_is_fitted(self, "assignment_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[1] != self.topology_.num_joints:
            raise ValueError(f"X must have shape (N, {self.topology_.num_joints}, C), got {X.shape}")
        X, _ = check_poses(X, self.topology_.num_joints, X.shape[2], "X", allow_flat=False)
        return sgt_forward(self.assignment_, X, self.grid_)

    def inverse_transform(self, X):
        check_is_fitted(self, "assignment_")
        D = np.asarray(X, dtype=np.float64)
        if D.ndim != 4 or D.shape[1:3] != (self.grid_.h, self.grid_.p):
            raise ValueError(f"grid input must have shape (N, {self.grid_.h}, {self.grid_.p}, C), got {D.shape}")
        return sgt_inverse(self.assignment_, D, self.grid_)
