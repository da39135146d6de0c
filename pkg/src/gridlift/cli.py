"""Command line: data generation, layout tools, training, evaluation and self-checks.

Exit codes: 0 success, 1 verification failure, 2 usage or malformed input,
3 numerical abort, 4 incompatible checkpoint/data, 5 layout constraint
violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from gridlift import __version__
from gridlift.data import (
    CameraModel,
    DatasetFormatError,
    TopologyMismatchError,
    load_dataset,
    normalized_arrays,
    save_dataset,
    synth_generate,
    to_mm_function,
)
from gridlift.engine import make_rng
from gridlift.gln import (
    CheckpointError,
    GLNConfig,
    GLNModel,
    NumericalAbort,
    TrainHyper,
    closed_form_parameter_count,
    load_model,
    save_model,
    train,
)
from gridlift.metrics import evaluate
from gridlift.sgt import (
    SHUFFLE_MODES,
    AssignmentMatrix,
    GridSpec,
    LayoutError,
    build_handcrafted_layout,
    dump_assignment,
    load_assignment_csv,
    load_layout,
    load_skeleton,
    layout_to_csv,
    random_sgt,
    shuffle_layout,
    validate_constraints,
)

log = logging.getLogger("gridlift")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC, EXIT_COMPAT, EXIT_CONSTRAINT = 0, 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

_GLN_KEYS = [f.name for f in fields(GLNConfig)]
_TRAIN_KEYS = [f.name for f in fields(TrainHyper)]


@dataclass
class RunConfig:
    """Everything a training run needs, as one flat JSON document."""

    train_data: str = "train.csv"
    out_dir: str = "run"
    topology: str | None = None
    model: GLNConfig = field(default_factory=GLNConfig)
    hyper: TrainHyper = field(default_factory=TrainHyper)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "RunConfig":
        own = {"train_data", "out_dir", "topology"}
        unknown = set(d) - own - set(_GLN_KEYS) - set(_TRAIN_KEYS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        try:
            model = GLNConfig(**{k: d[k] for k in _GLN_KEYS if k in d})
            hyper = TrainHyper(**{k: d[k] for k in _TRAIN_KEYS if k in d})
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config: {exc}") from None
        cfg = cls(model=model, hyper=hyper, **{k: d[k] for k in own if k in d})
        if base_dir is not None:
            cfg.train_data = str(_resolve(base_dir, cfg.train_data))
            if cfg.topology:
                cfg.topology = str(_resolve(base_dir, cfg.topology))
            if model.layout_path:
                model.layout_path = str(_resolve(base_dir, model.layout_path))
        return cfg

    def to_dict(self) -> dict:
        out = {"train_data": self.train_data, "out_dir": self.out_dir, "topology": self.topology}
        out.update(self.model.to_dict())
        out.update(asdict(self.hyper))
        return out


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else (base / path)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sidecar_config(out: Path, args: argparse.Namespace):
    """Write the resolved flags of a command next to its main output."""
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    _write_json(out.with_name(out.name + ".config.json"), resolved)


def _topology(path):
    try:
        return load_skeleton(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read skeleton: {exc}") from None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _parse_camera(text) -> CameraModel:
    if text is None:
        return CameraModel()
    try:
        raw = Path(text).read_text() if Path(text).is_file() else text
        return CameraModel(**json.loads(raw))
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid camera: {exc}") from None


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    topology = _topology(args.topology)
    camera = _parse_camera(args.camera)
    ds = synth_generate(args.n, topology, camera, rng=make_rng(args.seed), seed=args.seed)
    out = Path(args.out)
    try:
        save_dataset(ds, out)
        args.camera = asdict(camera)
        _sidecar_config(out, args)
    except OSError as exc:
        print(f"error: cannot write {out}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"wrote {len(ds)} samples to {out}")
    return EXIT_OK


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    return RunConfig.from_dict(raw, base_dir=path.parent)


def run_training(cfg: RunConfig, out_dir: Path):
    """Train per ``cfg``; writes checkpoint, history and resolved config into ``out_dir``."""
    topology = _topology(cfg.topology)
    ds = load_dataset(cfg.train_data, topology)
    mode = cfg.model.normalization
    X, Y = normalized_arrays(ds, mode)
    try:
        model = GLNModel(cfg.model, topology)
    except (LayoutError, OSError) as exc:
        raise UsageError(f"cannot build model: {exc}") from None
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "config.json", cfg.to_dict())
    history = train(model, X, Y, cfg.hyper, make_rng(cfg.model.seed), to_mm=to_mm_function(ds, mode),
                    Y_mm=ds.pose3d)
    (out_dir / "history.csv").write_text(history.to_csv())
    save_model(model, out_dir / "checkpoint.npz")
    dump_assignment(model.eval_assignment(), out_dir / "assignment.csv", topology.joint_names)
    return model, history


def cmd_train(args) -> int:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.model.seed = args.seed
    try:
        _, history = run_training(cfg, Path(cfg.out_dir))
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    last = history.rows[-1]
    print(json.dumps({"out_dir": cfg.out_dir, "epochs": len(history.rows),
                      "final_train_mpjpe_mm": last["train_mpjpe_mm"], "sgt_coverage": last["sgt_coverage"]}))
    return EXIT_OK


PROTOCOLS = ("p1", "p1star", "p2")


def evaluate_checkpoint(checkpoint, data, protocol="p1", uvz=False, pa_rigid=False) -> dict:
    if protocol not in PROTOCOLS:
        raise UsageError(f"protocol must be one of {PROTOCOLS}")
    try:
        model = load_model(checkpoint)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot load checkpoint: {exc}") from None
    ds = load_dataset(data, model.topology)
    mode = model.config.normalization
    if uvz and mode != "uvz":
        raise CheckpointError("--uvz needs a checkpoint trained with uvz normalization")
    X, _ = normalized_arrays(ds, mode)
    pred_mm = to_mm_function(ds, mode)(model.predict(X))
    report = evaluate(pred_mm, ds.pose3d, pa_scale=not pa_rigid).as_dict()
    report["protocol"] = protocol
    report["score_mm"] = report["pa_mpjpe_mm"] if protocol == "p2" else report["mpjpe_mm"]
    report["normalization"] = mode
    return report


def cmd_eval(args) -> int:
    report = evaluate_checkpoint(args.checkpoint, args.data, args.protocol, args.uvz, args.pa_rigid)
    text = json.dumps(report, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.write_text(text + "\n")
        _sidecar_config(out, args)
    return EXIT_OK


def _emit(text: str, out, args):
    if out:
        Path(out).write_text(text)
        _sidecar_config(Path(out), args)
    else:
        sys.stdout.write(text)


def _read_any_layout(path, topology) -> AssignmentMatrix:
    """Layout file (row,col,joint_name) or a cell x joint matrix dump."""
    try:
        first = next((ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")),
                     "")
    except OSError as exc:
        raise UsageError(f"cannot read layout {path}: {exc}") from None
    if first.replace(" ", "") == "row,col,joint_name":
        return load_layout(path, topology)
    mat, names, grid = load_assignment_csv(path)
    if tuple(names) != topology.joint_names:
        raise LayoutError(f"matrix columns {names} do not match the skeleton joints")
    return AssignmentMatrix(mat, grid)


def cmd_layout(args) -> int:
    topology = _topology(args.topology)
    grid = GridSpec(*args.grid)
    if args.action == "make-handcrafted":
        _emit(layout_to_csv(build_handcrafted_layout(topology, grid), topology), args.out, args)
    elif args.action == "make-random":
        S = random_sgt(topology, grid, make_rng(args.seed))
        _emit(layout_to_csv(S, topology, comments=[f"random seed={args.seed}"]), args.out, args)
    elif args.action == "shuffle":
        base = load_layout(args.layout, topology) if args.layout else build_handcrafted_layout(topology, grid)
        S = shuffle_layout(base, args.mode, make_rng(args.seed))
        _emit(layout_to_csv(S, topology, comments=[f"shuffle mode={args.mode} seed={args.seed}"]), args.out, args)
    elif args.action == "validate":
        S = _read_any_layout(args.layout, topology) if args.layout else build_handcrafted_layout(topology, grid)
        report = validate_constraints(S, topology)
        print(json.dumps({"ok": report.ok, "eq2_ok": report.eq2_ok, "eq3_ok": report.eq3_ok,
                          "coverage": report.coverage, "num_joints": report.num_joints,
                          "violations": report.violations}, indent=2))
        return EXIT_OK if report.ok else EXIT_CONSTRAINT
    elif args.action == "dump":
        if not args.checkpoint:
            raise UsageError("layout dump needs --checkpoint")
        model = load_model(args.checkpoint)
        obj = model.autogrids if (args.scores and model.autogrids is not None) else model.eval_assignment()
        if not args.out:
            raise UsageError("layout dump needs --out")
        dump_assignment(obj, args.out, model.topology.joint_names, log=args.log)
        _sidecar_config(Path(args.out), args)
    return EXIT_OK


def cmd_verify(args) -> int:
    from gridlift.verify import SUITES, check_dataset, run_suites

    def show(r):
        print(r.line(), flush=True)

    if args.suite == "data" and not args.data:
        raise UsageError("--suite data needs --data")
    names = list(SUITES) if args.suite == "all" else [] if args.suite == "data" else [args.suite]
    results = run_suites(names, seed=args.seed, on_result=show)
    for path in args.data or []:
        results.append(check_dataset(path, _topology(args.topology)))
        show(results[-1])
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print(f"first failing check: {failed[0].suite}/{failed[0].name}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    topology = _topology(cfg.topology)
    counts = closed_form_parameter_count(cfg.model, topology.num_joints)
    if args.instantiate:
        model = GLNModel(cfg.model, topology)
        counts["instantiated_total"] = model.num_parameters()
        counts["instantiated_attention"] = model.num_parameters(attention_only=True)
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _grid_arg(text):
    try:
        h, p = (int(v) for v in text.lower().split("x"))
        return h, p
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 5x5, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridlift", description="2D-to-3D pose lifting on semantic grids")
    parser.add_argument("--version", action="version", version=f"gridlift {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--topology", help="skeleton CSV (default: 17-joint skeleton)")
    p.add_argument("--camera", help="camera JSON object or file")
    p.add_argument("--out", required=True, help="dataset CSV path; cameras go to <stem>.camera.csv")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a lifting network")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=PROTOCOLS, default="p1")
    p.add_argument("--uvz", action="store_true", help="require uvz back-projection before metrics")
    p.add_argument("--pa-rigid", action="store_true", help="align without scale for PA-MPJPE")
    p.add_argument("--out", help="also write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("layout", help="create, shuffle, validate or dump grid layouts")
    p.add_argument("action", choices=["make-handcrafted", "make-random", "shuffle", "validate", "dump"])
    p.add_argument("--layout", help="input layout (default: shipped handcrafted layout)")
    p.add_argument("--topology", help="skeleton CSV")
    p.add_argument("--grid", type=_grid_arg, default=(5, 5))
    p.add_argument("--mode", choices=SHUFFLE_MODES, default="global")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", help="checkpoint for dump")
    p.add_argument("--scores", action="store_true", help="dump learnable scores instead of the assignment")
    p.add_argument("--log", action="store_true", help="dump log scores")
    p.add_argument("--out")
    p.set_defaults(func=cmd_layout)

    p = sub.add_parser("verify", help="run gradient, oracle and round-trip self-checks")
    p.add_argument("--suite", choices=["gradcheck", "oracle", "roundtrip", "data", "all"], default="all")
    p.add_argument("--data", action="append", help="also check reprojection consistency of a dataset CSV")
    p.add_argument("--topology", help="skeleton CSV for --data")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("params", help="report parameter counts for a config")
    p.add_argument("--config")
    p.add_argument("--instantiate", action="store_true", help="also build the model and count its arrays")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TopologyMismatchError, CheckpointError) as exc:
        print(f"incompatible input: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (DatasetFormatError, LayoutError) as exc:
        print(f"malformed input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
