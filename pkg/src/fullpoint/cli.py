"""Command-line entry point: ``fullpoint <command> ...``.

Exit status: 0 success, 1 verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import ablate as ablation
from .cloud import AugmentSpec, farthest_point_sample, knn, read_cloud, voxel_downsample, write_cloud
from .data import SyntheticDatasetSpec, gen_dataset
from .errors import FullPointError
from .network import NetworkSpec, build_network, load_checkpoint, read_checkpoint, save_checkpoint
from .rng import Rng
from .train import TrainConfig, evaluate, robustness, train
from .verify import verify_gradients, verify_lemmas

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
SECTIONS = {"network": NetworkSpec, "train": TrainConfig, "data": SyntheticDatasetSpec}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config


def load_config(path: str | None) -> dict[str, dict]:
    """Split a JSON config into network/train/data sections.

    Keys may be grouped under those section names or given flat, in which
    case each is routed to the dataclass that declares a field of that name.
    """
    out = {name: {} for name in SECTIONS}
    if not path:
        return out
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    owners = {}
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            owners.setdefault(f.name, section)
    for key, value in raw.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise UsageError(f"config section {key!r} must be an object")
            out[key].update(value)
        elif key in owners:
            out[owners[key]][key] = value
        else:
            raise UsageError(f"config key {key!r} matches no network, train or data field")
    return out


def _network_spec(cfg: dict, args) -> NetworkSpec:
    task = getattr(args, "task", None) or cfg["network"].get("task", "classification")
    spec = NetworkSpec.desk(task, **{k: v for k, v in cfg["network"].items() if k != "task"})
    over = {}
    if getattr(args, "layer", None):
        over["layer_kind"] = args.layer
    if getattr(args, "sampling", None):
        over["sampling_block"] = args.sampling
    if getattr(args, "sigma", None) is not None:
        over["sigma"] = args.sigma
    return replace(spec, **over).validate()


def _data_spec(cfg: dict, args, task: str) -> SyntheticDatasetSpec:
    kind = {"classification": "shapes-cls", "segmentation": "scene-seg", "normal-estimation": "sphere-normals"}[task]
    values = dict(kind=kind, seed=args.seed)
    values.update(cfg["data"])
    for name in ("points", "train_count", "test_count"):
        v = getattr(args, name, None)
        if v is not None:
            values["points_per_cloud" if name == "points" else name] = v
    return SyntheticDatasetSpec(**values).validate()


def _train_config(cfg: dict, args, **defaults) -> TrainConfig:
    values = dict(defaults, seed=args.seed)
    values.update(cfg["train"])
    for name in ("epochs", "batch_size", "lr"):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    return TrainConfig.from_dict(values).validate()


# ---------------------------------------------------------------- output


def _emit(args, payload: dict, table: tuple[list, list] | None = None, name: str = "report") -> None:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.json").write_text(json.dumps(payload, indent=2, default=_jsonable) + "\n")
    if table is not None:
        (out_dir / f"{name}.csv").write_text(ablation.to_csv(*table))
    if args.json:
        print(json.dumps(payload, indent=2, default=_jsonable))
    elif table is not None:
        sys.stdout.write(ablation.to_csv(*table))


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialise {type(value).__name__}")


def _metrics_table(report) -> tuple[list, list]:
    header = ["metric", "value"]
    rows = [[k, v] for k, v in report.to_dict().items() if not isinstance(v, list) and v is not None]
    return header, rows


# ---------------------------------------------------------------- commands


def cmd_verify_lemmas(args) -> int:
    report = verify_lemmas(args.trials, args.seed, corrupt=args.corrupt)
    header = ["suite", "passed", "trials", "max_rel_error", "tolerance"]
    rows = []
    for suite in ("fpconv", "fptransformer"):
        ok, total = report.count(suite)
        rows.append([suite, ok, total, report.max_error(suite) if not args.corrupt else "corrupted", 1e-10])
    _emit(args, report.to_dict(), (header, rows), "verify-lemmas")
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_verify_grads(args) -> int:
    report = verify_gradients(args.seed)
    header = ["suite", "case", "max_rel_error", "tolerance", "passed"]
    rows = [[r.suite, r.case, r.error, r.tolerance, r.passed] for r in report.rows]
    _emit(args, report.to_dict(), (header, rows), "verify-grads")
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    spec = _network_spec(cfg, args)
    data = _data_spec(cfg, args, spec.task)
    config = _train_config(cfg, args)
    net = build_network(spec, Rng(args.seed))
    net, report = train(net, gen_dataset(data), config)
    ckpt = Path(args.checkpoint or Path(args.out) / "model.fpck")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, ckpt, extra={"data": data.to_dict(), "train": config.to_dict()})
    payload = dict(report.to_dict(), checkpoint=str(ckpt), schedule_note="desk-scale schedule")
    _emit(args, payload, _metrics_table(report), "train")
    return EXIT_OK


def _eval_inputs(args):
    net = load_checkpoint(args.checkpoint)
    header, _ = read_checkpoint(args.checkpoint)
    if args.data:
        files = sorted(p for p in Path(args.data).iterdir() if p.suffix in (".xyz", ".txt", ".ply"))
        if not files:
            raise UsageError(f"no cloud files in {args.data}")
        clouds = [read_cloud(p) for p in files]
    else:
        stored = header.get("extra", {}).get("data")
        if stored is None:
            raise UsageError("checkpoint carries no dataset spec; pass --data DIR")
        clouds = gen_dataset(SyntheticDatasetSpec.from_dict(stored)).test
    return net, clouds


def cmd_eval(args) -> int:
    net, clouds = _eval_inputs(args)
    perturb = None
    if args.permute or args.translate is not None or args.scale is not None or args.jitter is not None:
        t = args.translate or 0.0
        perturb = AugmentSpec(
            permute=args.permute,
            translate=(t, t, t),
            scale=1.0 if args.scale is None else args.scale,
            jitter_sigma=0.0 if args.jitter is None else args.jitter,
        )
    report = evaluate(net, clouds, perturb, density=args.density, seed=args.seed)
    _emit(args, report.to_dict(), _metrics_table(report), "eval")
    return EXIT_OK


def cmd_robustness(args) -> int:
    net, clouds = _eval_inputs(args)
    report = robustness(net, clouds, seed=args.seed)
    header = ["perturbation", report.metric]
    rows = [[name, value] for name, value in report.rows] + [[f"density{d}", v] for d, v in report.density]
    payload = report.to_dict()
    _emit(args, payload, (header, rows), "robustness")
    if report.monotonicity_violations:
        pairs = ", ".join(f"{a}->{b}" for a, b in report.monotonicity_violations)
        print(f"density monotonicity violations: {pairs}", file=sys.stderr)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    grid = None if not args.grid else [ablation.parse_cell(args.study, g) for g in args.grid]
    base_net, base_data = ablation.default_base(args.study, args.task)
    if cfg["network"]:
        base_net = replace(base_net, **cfg["network"])
    data_over = dict(cfg["data"])
    for name in ("points", "train_count", "test_count"):
        v = getattr(args, name, None)
        if v is not None:
            data_over["points_per_cloud" if name == "points" else name] = v
    base_data = replace(base_data, **data_over)
    config = _train_config(cfg, args, epochs=20, batch_size=4)
    header, rows = ablation.ablate(args.study, grid, base_net, base_data, config, seed=args.seed, task=args.task)
    payload = {"study": args.study, "rows": ablation.to_records(header, rows)}
    _emit(args, payload, (header, rows), f"ablate-{args.study}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    values = dict(seed=args.seed)
    values.update(cfg["data"])
    if args.kind:
        values["kind"] = args.kind
    for name in ("points", "train_count", "test_count", "noise"):
        v = getattr(args, name, None)
        if v is not None:
            values["points_per_cloud" if name == "points" else name] = v
    spec = SyntheticDatasetSpec(**values).validate()
    ds = gen_dataset(spec)
    root = Path(args.out)
    for split, clouds in (("train", ds.train), ("test", ds.test)):
        (root / split).mkdir(parents=True, exist_ok=True)
        for i, cloud in enumerate(clouds):
            write_cloud(cloud, root / split / f"{i:05d}.xyz")
    payload = {"spec": spec.to_dict(), "train": len(ds.train), "test": len(ds.test), "classes": list(spec.classes)}
    _emit(args, payload, None, "dataset")
    return EXIT_OK


def cmd_sample(args) -> int:
    cloud = read_cloud(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.method == "fps":
        m = args.m if args.m is not None else max(1, len(cloud) // 4)
        picks = farthest_point_sample(cloud, m, args.seed_index)
        write_cloud(cloud.subset(picks), out / "fps.xyz")
        payload = {"method": "fps", "indices": picks.tolist()}
    elif args.method == "knn":
        queries = cloud.positions if args.queries is None else read_cloud(args.queries).positions
        nbr = knn(cloud, queries, args.k, include_self=args.queries is None,
                  query_indices=np.arange(len(cloud)) if args.queries is None else None)
        np.savetxt(out / "knn.txt", nbr.indices, fmt="%d")
        payload = {"method": "knn", "k": args.k, "queries": int(nbr.indices.shape[0])}
    else:
        down = voxel_downsample(cloud, args.voxel_size)
        write_cloud(down, out / "voxel.xyz")
        payload = {"method": "voxel", "voxel_size": args.voxel_size, "input": len(cloud), "output": len(down)}
    _emit(args, payload, None, f"sample-{args.method}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_seed, default=argparse.SUPPRESS, help="u64 seed (default 0)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config (NetworkSpec/TrainConfig fields)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default .)")
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="print JSON instead of CSV")

    p = argparse.ArgumentParser(prog="fullpoint", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("verify-lemmas", parents=[common], help="naive vs efficient layer equivalence")
    s.add_argument("--trials", type=_positive_int, default=100)
    s.add_argument("--corrupt", action="store_true", help="negative control: corrupt the naive weights")
    s.set_defaults(func=cmd_verify_lemmas)

    s = sub.add_parser("verify-grads", parents=[common], help="finite-difference gradient checks")
    s.set_defaults(func=cmd_verify_grads)

    def training_flags(s, with_task=True):
        if with_task:
            s.add_argument("--task", choices=("classification", "segmentation", "normal-estimation"))
        s.add_argument("--epochs", type=int)
        s.add_argument("--batch-size", type=_positive_int)
        s.add_argument("--lr", type=float)
        s.add_argument("--points", type=_positive_int)
        s.add_argument("--train-count", type=_positive_int)
        s.add_argument("--test-count", type=_positive_int)

    s = sub.add_parser("train", parents=[common], help="train a desk-scale network on synthetic data")
    training_flags(s)
    s.add_argument("--layer", choices=("fptransformer", "fpconv", "mlp-baseline"))
    s.add_argument("--sampling", choices=("SADS", "TDS", "GDS"))
    s.add_argument("--sigma", type=float)
    s.add_argument("--checkpoint", help="checkpoint path (default OUT/model.fpck)")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "evaluate a checkpoint, optionally under a perturbation"),
        ("robustness", cmd_robustness, "permutation/translation/scaling/jitter/density protocol"),
    ):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", help="directory of cloud files (default: the checkpoint's test split)")
        if name == "eval":
            s.add_argument("--permute", action="store_true")
            s.add_argument("--translate", type=float)
            s.add_argument("--scale", type=float)
            s.add_argument("--jitter", type=float, help="jitter sigma")
            s.add_argument("--density", type=_positive_int, help="points kept per cloud")
        s.set_defaults(func=func)

    s = sub.add_parser("ablate", parents=[common], help="one trained toy model per grid cell")
    s.add_argument("study", choices=ablation.STUDIES)
    s.add_argument("--grid", nargs="+", help="cells; position-encoding cells are ENCODER:STRATEGY")
    training_flags(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset as cloud files")
    s.add_argument("--kind", choices=("shapes-cls", "scene-seg", "sphere-normals"))
    s.add_argument("--points", type=_positive_int)
    s.add_argument("--train-count", type=_positive_int)
    s.add_argument("--test-count", type=_positive_int)
    s.add_argument("--noise", type=float)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("sample", parents=[common], help="FPS, kNN or voxel sampling of a cloud file")
    s.add_argument("method", choices=("fps", "knn", "voxel"))
    s.add_argument("input")
    s.add_argument("--m", type=_positive_int, help="FPS sample count (default N/4)")
    s.add_argument("--seed-index", type=int, default=0)
    s.add_argument("--k", type=_positive_int, default=16)
    s.add_argument("--queries", help="query cloud file for knn (default: the cloud itself)")
    s.add_argument("--voxel-size", type=float, default=0.04)
    s.set_defaults(func=cmd_sample)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    for name, default in (("seed", 0), ("config", None), ("out", "."), ("json", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        return args.func(args)
    except (UsageError, FullPointError, OSError) as exc:
        print(f"fullpoint {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
