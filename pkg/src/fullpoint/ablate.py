"""Ablation sweeps: one freshly trained toy model per grid cell, emitted as a table."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import replace

from .data import SyntheticDatasetSpec, gen_dataset
from .encoding import SIGMA_OBJECT, SIGMA_SCENE
from .errors import SpecError
from .network import NetworkSpec, build_network
from .rng import Rng
from .train import TrainConfig, train

STUDIES = ("position-encoding", "c_mid", "sigma", "sampling-block")

SIGMA_GRID_CLS = (0.8, 1.0, 1.2, 1.4, 1.6)
SIGMA_GRID_SEG = (0.1, 0.2, 0.4, 0.6, 0.8)
C_MID_CASES = {
    1: [8, 16, 32, 64, 128],
    2: [4, 8, 16, 32, 64],
    3: [2, 4, 8, 16, 32],
    4: [8, 8, 16, 16, 32],
}
PE_GRID = tuple((enc, strat) for enc in ("sinusoidal", "learnable-mlp") for strat in ("LPE", "GPE", "FPE"))
SAMPLING_GRID = ("GDS", "TDS", "SADS")

HEADERS = {
    "position-encoding": ["Encoder", "Strategy", "mIoU(%)"],
    "c_mid": ["case", "C_m", "mIoU(%)", "mAcc(%)", "OA(%)", "Para."],
    "sigma": ["sigma", "OA(%)"],
    "sigma-seg": ["sigma", "mIoU(%)"],
    "sampling-block": ["Sampling Block", "mIoU", "dmIoU", "mAcc", "dmAcc", "OA", "dOA", "Para", "dPara"],
}


def default_grid(study: str, task: str | None = None):
    if study == "sigma":
        return SIGMA_GRID_SEG if task == "segmentation" else SIGMA_GRID_CLS
    if study == "c_mid":
        return (1, 2)
    if study == "position-encoding":
        return PE_GRID
    if study == "sampling-block":
        return SAMPLING_GRID
    raise SpecError([f"study: unknown {study!r}, expected one of {STUDIES}"])


def default_base(study: str, task: str | None = None) -> tuple[NetworkSpec, SyntheticDatasetSpec]:
    """Toy model and data for a study; segmentation studies use synthetic scenes."""
    if study == "sigma" and task != "segmentation":
        return NetworkSpec.desk("classification", layer_kind="fpconv", k_neighbors=[8, 8]), SyntheticDatasetSpec()
    if study == "sigma":
        net = NetworkSpec.desk("segmentation", layer_kind="fpconv", k_neighbors=[8, 8], sigma=SIGMA_SCENE)
        return net, SyntheticDatasetSpec(kind="scene-seg")
    net = NetworkSpec.desk("segmentation", k_neighbors=[8, 8], sigma=SIGMA_SCENE)
    if study == "position-encoding":
        # the encoding comparison runs without the shape-aware sampler
        net = replace(net, sampling_block="TDS")
    return net, SyntheticDatasetSpec(kind="scene-seg")


def _pct(x) -> float:
    return round(100.0 * x, 2)


def _cell_spec(study: str, cell, base: NetworkSpec) -> NetworkSpec:
    if study == "sigma":
        return replace(base, sigma=float(cell))
    if study == "c_mid":
        case = int(cell)
        if case not in C_MID_CASES:
            raise SpecError([f"c_mid: unknown case {cell!r}, expected one of {sorted(C_MID_CASES)}"])
        mids = C_MID_CASES[case][: base.stages]
        return replace(base, middle_channels=list(mids))
    if study == "position-encoding":
        encoder, strategy = cell
        return replace(base, encoder_kind=encoder, position_encoding=strategy)
    return replace(base, sampling_block=str(cell))


def ablate(
    study: str,
    grid=None,
    base: NetworkSpec | None = None,
    data: SyntheticDatasetSpec | None = None,
    config: TrainConfig | None = None,
    seed: int = 0,
    task: str | None = None,
) -> tuple[list[str], list[list]]:
    """Train one model per grid cell; returns ``(header, rows)``.

    Every cell starts from the same seed so cells differ only in the swept
    setting.
    """
    if study not in STUDIES:
        raise SpecError([f"study: unknown {study!r}, expected one of {STUDIES}"])
    default_net, default_data = default_base(study, task)
    base = base or default_net
    data = data or default_data
    config = config or TrainConfig(epochs=20, batch_size=4, seed=seed)
    grid = list(default_grid(study, base.task) if grid is None else grid)
    if not grid:
        raise SpecError(["grid: must contain at least one cell"])
    dataset = gen_dataset(replace(data, seed=seed))
    results = []
    for cell in grid:
        spec = _cell_spec(study, cell, base).validate()
        net = build_network(spec, Rng(seed))
        _, report = train(net, dataset, config)
        results.append((cell, spec, report))

    if study == "sigma":
        if base.task == "classification":
            return HEADERS["sigma"], [[float(c), _pct(r.oa)] for c, _, r in results]
        return HEADERS["sigma-seg"], [[float(c), _pct(r.miou)] for c, _, r in results]
    if study == "c_mid":
        rows = [
            [int(c), json.dumps(s.middle_channels), _pct(r.miou), _pct(r.macc), _pct(r.oa), r.parameter_count]
            for c, s, r in results
        ]
        return HEADERS["c_mid"], rows
    if study == "position-encoding":
        label = {"sinusoidal": "Sinusoidal", "learnable-mlp": "MLP"}
        return HEADERS["position-encoding"], [[label[c[0]], c[1], _pct(r.miou)] for c, _, r in results]
    ref = results[0][2]
    rows = []
    for i, (c, _, r) in enumerate(results):
        delta = (lambda a, b: "--") if i == 0 else (lambda a, b: round(a - b, 2))
        rows.append(
            [
                c,
                _pct(r.miou),
                delta(_pct(r.miou), _pct(ref.miou)),
                _pct(r.macc),
                delta(_pct(r.macc), _pct(ref.macc)),
                _pct(r.oa),
                delta(_pct(r.oa), _pct(ref.oa)),
                r.parameter_count,
                "--" if i == 0 else r.parameter_count - ref.parameter_count,
            ]
        )
    return HEADERS["sampling-block"], rows


def to_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def to_records(header: list[str], rows: list[list]) -> list[dict]:
    return [dict(zip(header, row)) for row in rows]


def parse_cell(study: str, text: str):
    """Grid cell from its command-line spelling (``learnable-mlp:FPE`` for encodings)."""
    if study == "sigma":
        return float(text)
    if study == "c_mid":
        return int(text)
    if study == "position-encoding":
        enc, _, strat = text.partition(":")
        if not strat:
            raise SpecError([f"grid: position-encoding cells are ENCODER:STRATEGY, got {text!r}"])
        return enc, strat
    return text


__all__ = ["HEADERS", "STUDIES", "SIGMA_OBJECT", "ablate", "default_grid", "parse_cell", "to_csv", "to_records"]
