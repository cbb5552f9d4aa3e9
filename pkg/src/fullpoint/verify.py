"""Self-checks: naive vs efficient layer equivalence, and finite-difference gradients."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .blocks import GDS, SADS, TDS, MLPBaseline, group, upsample_interpolate
from .cloud import knn
from .encoding import global_correlation, local_correlation
from .fpconv import FPConv, fpconv_forward_efficient, fpconv_forward_naive, fpconv_layer
from .fptransformer import FPTransformer, FPTransformerBlock, fptransformer_forward_efficient, fptransformer_forward_naive
from .network import NetworkSpec, build_network
from .rng import Rng

LEMMA_TOLERANCE = 1e-10
GRADIENT_TOLERANCE = 1e-4
FPT_MIDDLE = (1, 2, 4, 8)


def relative_error(actual, expected) -> float:
    """``max|actual - expected| / max|expected|`` (absolute when expected is all zero)."""
    a = np.asarray(actual, dtype=np.float64)
    b = np.asarray(expected, dtype=np.float64)
    scale = np.abs(b).max() if b.size else 0.0
    diff = np.abs(a - b).max() if a.size else 0.0
    return float(diff / scale) if scale > 0 else float(diff)


@dataclass
class CheckRow:
    suite: str
    case: str
    error: float
    tolerance: float
    expect_failure: bool = False

    @property
    def passed(self) -> bool:
        within = bool(self.error <= self.tolerance)
        return not within if self.expect_failure else within


@dataclass
class CheckReport:
    rows: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def max_error(self, suite: str) -> float:
        errs = [r.error for r in self.rows if r.suite == suite and not r.expect_failure]
        return max(errs) if errs else 0.0

    def count(self, suite: str) -> tuple[int, int]:
        rows = [r for r in self.rows if r.suite == suite]
        return sum(r.passed for r in rows), len(rows)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "rows": [dict(asdict(r), passed=r.passed) for r in self.rows]}


# ---------------------------------------------------------------- lemma equivalence


def _cloud(rng: Rng, n: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(n, 3))


def fpconv_trial(rng: Rng, corrupt: bool = False) -> tuple[str, float]:
    n = 2 + rng.integers(31)
    k = 1 + rng.integers(min(8, n))
    c = 1 + rng.integers(16)
    cm = 1 + rng.integers(min(4, c))
    co = 1 + rng.integers(16)
    pos = _cloud(rng, n)
    nbr = knn(pos, pos, k, include_self=True, query_indices=np.arange(n))
    lc = local_correlation(pos, nbr, global_correlation(pos, 1.2))
    feats = rng.normal(size=(n, c))
    params = FPConv(c, cm, co, rng.fork(), aggregator="sum")
    oracle = params
    if corrupt:
        oracle = FPConv(c, cm, co, Rng(0), aggregator="sum")
        oracle.load_state_dict(params.state_dict())
        oracle.t_c1.data = oracle.t_c1.data.copy()
        oracle.t_c1.data[0, 0] += 0.5
    with T.no_grad():
        fast = fpconv_forward_efficient(feats, lc, nbr, params).data
    slow = fpconv_forward_naive(feats, lc, nbr, oracle)
    return f"N={n} K={k} C={c} C_m={cm} C_out={co}", relative_error(fast, slow)


def fptransformer_trial(rng: Rng, full_width: bool = False, corrupt: bool = False) -> tuple[str, float]:
    n = 2 + rng.integers(31)
    k = 1 + rng.integers(min(8, n))
    cm = FPT_MIDDLE[rng.integers(len(FPT_MIDDLE))]
    groups = 1 if full_width else 1 + rng.integers(32 // cm)
    c = cm * groups
    pos = _cloud(rng, n)
    nbr = knn(pos, pos, k, include_self=True, query_indices=np.arange(n))
    feats = rng.normal(size=(n, c))
    params = FPTransformer(c, cm, rng.fork())
    oracle = params
    if corrupt:
        oracle = FPTransformer(c, cm, Rng(0))
        oracle.load_state_dict(params.state_dict())
        oracle.w_v.weight.data = oracle.w_v.weight.data.copy()
        oracle.w_v.weight.data[0, 0] += 0.5
    with T.no_grad():
        fast = fptransformer_forward_efficient(feats, pos, nbr, params).data
    slow = fptransformer_forward_naive(feats, pos, nbr, oracle)
    return f"N={n} K={k} C={c} C_m={cm}", relative_error(fast, slow)


def verify_lemmas(trials: int = 100, seed: int = 0, corrupt: bool = False) -> CheckReport:
    """Efficient vs naive layers on randomised shapes; each trial must agree to 1e-10.

    Every fourth transformer trial uses ``C_m = C``. With ``corrupt`` the
    naive path runs on deliberately altered weights, so every trial should
    be reported as a failure.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = Rng(seed)
    rows = []
    for t in range(trials):
        case, err = fpconv_trial(rng.fork(), corrupt)
        rows.append(CheckRow("fpconv", f"trial {t}: {case}", err, LEMMA_TOLERANCE))
    for t in range(trials):
        case, err = fptransformer_trial(rng.fork(), full_width=t % 4 == 3, corrupt=corrupt)
        rows.append(CheckRow("fptransformer", f"trial {t}: {case}", err, LEMMA_TOLERANCE))
    return CheckReport(rows)


# ---------------------------------------------------------------- gradients


def _probe(rng: Rng, shape) -> np.ndarray:
    """Fixed random projection so losses see every output coordinate."""
    return rng.normal(size=shape)


def _check(name, fn, leaves, rng_probe: Rng, eps=1e-6) -> CheckRow:
    out_shape = None

    def loss(_):
        nonlocal out_shape
        out = fn()
        if out_shape is None:
            out_shape = out.shape
            loss.probe = _probe(rng_probe, out.shape)
        return T.sum(out * loss.probe)

    err = T.grad_check(loss, leaves, eps=eps)
    return CheckRow("gradients", name, err, GRADIENT_TOLERANCE)


def _mini_inputs(rng: Rng, n: int, c: int, k: int):
    pos = _cloud(rng, n)
    nbr = knn(pos, pos, k, include_self=True, query_indices=np.arange(n)).indices
    feats = T.Tensor(rng.normal(size=(n, c)))
    return pos, nbr, feats


def _corrupted_square(x: T.Tensor) -> T.Tensor:
    # deliberately wrong backward: d(x^2)/dx reported as 2.2x
    return T._make(x.data * x.data, (x,), lambda g: (g * 2.2 * x.data,), "corrupted_square")


def verify_gradients(seed: int = 0) -> CheckReport:
    """Central-difference checks (max rel error <= 1e-4) for every layer type
    and a two-stage network, plus a sum-loss sanity check and a deliberately
    broken op that must be caught."""
    rng = Rng(seed)
    rows = []

    pos, nbr, feats = _mini_inputs(rng.fork(), 16, 8, 4)
    conv = FPConv(8, 2, 8, rng.fork())
    rows.append(_check("fpconv", lambda: fpconv_layer(pos, feats, nbr, conv), [feats] + conv.parameters(), rng.fork()))

    block = FPTransformerBlock(8, 2, rng.fork())
    rows.append(
        _check("fptransformer-block", lambda: block(pos, feats, nbr), [feats] + block.parameters(), rng.fork())
    )

    pos64, _, f64 = _mini_inputs(rng.fork(), 64, 8, 4)
    grouping = group(pos64, 4, 4, 0)
    sads = SADS(8, 8, 4, 4, rng.fork())
    rows.append(
        _check("sads", lambda: sads(pos64, f64, grouping)[1], [f64] + sads.parameters(), rng.fork())
    )
    gds = GDS(8, 8, 4, 4, rng.fork())
    rows.append(_check("gds", lambda: gds(pos64, f64, grouping)[1], [f64], rng.fork()))
    tds = TDS(8, 16, 4, 4, rng.fork())
    rows.append(_check("tds", lambda: tds(pos64, f64, grouping)[1], [f64] + tds.parameters(), rng.fork()))

    coarse = pos64[grouping.centers]
    cf = T.Tensor(rng.normal(size=(coarse.shape[0], 8)))
    rows.append(_check("upsample", lambda: upsample_interpolate(coarse, cf, pos64), [cf], rng.fork()))

    mlp = MLPBaseline(8, 8, rng.fork())
    rows.append(_check("mlp-baseline", lambda: mlp(pos, feats, nbr), [feats] + mlp.parameters(), rng.fork()))

    for task in ("classification", "segmentation"):
        spec = NetworkSpec.desk(
            task, encoder_channels=[8, 8], middle_channels=[2, 4], k_neighbors=[4, 4], num_classes=3
        )
        net = build_network(spec, rng.fork())
        cloud = _cloud(rng.fork(), 64)
        st = net.structure(cloud)
        rows.append(
            _check(f"network-2stage-{task}", lambda: net(cloud, structure=st), net.parameters(), rng.fork())
        )

    x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    T.backward(T.sum(x))
    rows.append(CheckRow("sanity", "sum-loss gives all-ones gradient", float(np.abs(x.grad - 1.0).max()), 0.0))

    y = T.Tensor(rng.normal(size=(5,)))
    err = T.grad_check(lambda v: T.sum(_corrupted_square(v)), y)
    rows.append(CheckRow("negative-control", "corrupted backward is detected", err, GRADIENT_TOLERANCE, True))
    return CheckReport(rows)
