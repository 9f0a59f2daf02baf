"""Property suites run by ``cuehunt selftest``."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List

import numpy as np
import pandas as pd

from . import autograd as ag
from . import oracles
from .gradcheck import grad_check
from .model import ArchitectureConfig, init_params, predict, tower_forward

logger = logging.getLogger(__name__)

ORACLE_TOLERANCE = 1e-12
GRADIENT_TOLERANCE = 1e-4
SLIDING_TOLERANCE = 1e-9


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass
class SelftestReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]

    def write(self, out_dir) -> str:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "selftest_results.jsonl")
        pd.DataFrame([asdict(r) for r in self.results], columns=["name", "passed", "detail", "seconds"]).to_json(
            path, orient="records", lines=True
        )
        logger.info(f"Selftest results written to: {path}")
        return path


def _run(report: SelftestReport, name: str, check: Callable[[], CheckResult]):
    start = time.perf_counter()
    result = check()
    result.seconds = time.perf_counter() - start
    report.results.append(result)
    log = logger.info if result.passed else logger.error
    log(f"{'PASS' if result.passed else 'FAIL'} {name}: {result.detail} ({result.seconds:.1f}s)")


# ------------------------------------------------------------ oracle cases

def _case(rng):
    """One small random problem for every primitive."""
    C, K = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    H, W = int(rng.integers(3, 7)), int(rng.integers(3, 7))
    kh, kw = int(rng.integers(1, H + 1)), int(rng.integers(1, W + 1))
    return {
        "x": rng.normal(size=(C, H, W)),
        "k": rng.normal(size=(K, C, kh, kw)),
        "k1": rng.normal(size=(K, C, 1, 1)),
        "b": rng.normal(size=K),
        "s": rng.normal(scale=3.0, size=(K, H, W)),
        "v": rng.normal(size=C),
        "p": rng.normal(size=(K, 2)),
        "y": rng.normal(size=(K, 2)),
        "temperature": float(rng.uniform(0.5, 2.0)),
    }


def _forward_pairs(c) -> Dict[str, tuple]:
    t = ag.Tensor
    attn = ag.spatial_softmax(t(c["s"][:1])).data
    return {
        "conv2d_valid": (ag.conv2d_valid(t(c["x"]), t(c["k"]), t(c["b"])).data, oracles.conv2d_valid(c["x"], c["k"], c["b"])),
        "conv1x1": (ag.conv1x1(t(c["x"]), t(c["k1"]), t(c["b"])).data, oracles.conv2d_valid(c["x"], c["k1"], c["b"])),
        "relu": (ag.relu(t(c["x"])).data, oracles.relu(c["x"])),
        "stack3x3": (ag.stack3x3(t(c["x"])).data, oracles.stack3x3(c["x"])),
        "spatial_softmax": (
            ag.spatial_softmax(t(c["s"]), c["temperature"]).data,
            oracles.spatial_softmax(c["s"], c["temperature"]),
        ),
        "softargmax": (ag.softargmax(t(c["s"]), c["temperature"]).data, oracles.softargmax(c["s"], c["temperature"])),
        "weighted_pool": (ag.weighted_pool(t(c["x"]), t(attn)).data, oracles.weighted_pool(c["x"], attn)),
        "broadcast_mul": (ag.broadcast_mul(t(c["v"]), t(c["x"])).data, oracles.broadcast_mul(c["v"], c["x"])),
        "mse_loss": (ag.mse_loss(t(c["p"]), t(c["y"])).data, oracles.mse_loss(c["p"], c["y"])),
    }


def _linear_pair(rng):
    n, m = int(rng.integers(1, 9)), int(rng.integers(1, 5))
    x, w, b = rng.normal(size=n), rng.normal(size=(m, n)), rng.normal(size=m)
    return ag.linear(ag.Tensor(x), ag.Tensor(w), ag.Tensor(b)).data, oracles.linear(x, w, b)


def check_oracles(seed: int = 0, cases: int = 100) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for _ in range(cases):
        pairs = _forward_pairs(_case(rng))
        pairs["linear"] = _linear_pair(rng)
        for name, (fast, slow) in pairs.items():
            worst[name] = max(worst.get(name, 0.0), float(np.max(np.abs(np.asarray(fast) - np.asarray(slow)))))
    bad = {k: v for k, v in worst.items() if v > ORACLE_TOLERANCE}
    detail = f"{cases} cases, max abs diff {max(worst.values()):.2e}"
    if bad:
        detail += f"; above {ORACLE_TOLERANCE:g}: {', '.join(f'{k}={v:.2e}' for k, v in sorted(bad.items()))}"
    return CheckResult("oracles", not bad, detail)


def check_stack3x3_binary(seed: int = 0, cases: int = 100) -> CheckResult:
    """stack3x3 is exactly a valid convolution with binary kernels."""
    rng = np.random.default_rng(seed)
    for _ in range(cases):
        C, H, W = int(rng.integers(1, 4)), int(rng.integers(3, 8)), int(rng.integers(3, 8))
        x = rng.normal(size=(C, H, W))
        stacked = ag.stack3x3(ag.Tensor(x)).data
        conv = ag.conv2d_valid(ag.Tensor(x), ag.Tensor(oracles.stack3x3_kernels(C)), ag.Tensor(np.zeros(9 * C))).data
        if not np.array_equal(stacked, conv):
            return CheckResult("stack3x3-binary", False, f"mismatch for input {x.shape}")
    return CheckResult("stack3x3-binary", True, f"{cases} cases bit-identical")


# ---------------------------------------------------------- gradient checks

def _weighted_sum(tape, out, rng_seed):
    """Scalar that weights every output element by a fixed random factor."""
    r = np.random.default_rng(rng_seed).normal(size=(1, out.data.size))
    flat = ag.reshape(out, (-1,))
    return ag.reshape(ag.linear(flat, tape.constant(r), tape.constant(np.zeros(1))), ())


def primitive_problems(rng) -> Dict[str, tuple]:
    """name -> (forward(tape, theta) -> scalar, params)."""
    x = rng.normal(size=(2, 6, 5))
    s = rng.normal(size=(3, 4, 5))
    probs = {}

    def wrap(fn, seed):
        return lambda tape, th: _weighted_sum(tape, fn(th), seed)

    probs["conv2d_valid"] = (wrap(lambda th: ag.conv2d_valid(th["x"], th["k"], th["b"]), 1),
                             {"x": x, "k": rng.normal(size=(3, 2, 3, 2)), "b": rng.normal(size=3)})
    probs["conv1x1"] = (wrap(lambda th: ag.conv1x1(th["x"], th["k"], th["b"]), 2),
                        {"x": x, "k": rng.normal(size=(3, 2, 1, 1)), "b": rng.normal(size=3)})
    probs["relu"] = (wrap(lambda th: ag.relu(th["x"]), 3), {"x": x})
    probs["stack3x3"] = (wrap(lambda th: ag.stack3x3(th["x"]), 4), {"x": x})
    probs["spatial_softmax"] = (wrap(lambda th: ag.spatial_softmax(th["s"], 0.7), 5), {"s": s})
    probs["softargmax"] = (wrap(lambda th: ag.softargmax(th["s"]), 6), {"s": s})
    probs["weighted_pool"] = (
        wrap(lambda th: ag.weighted_pool(th["x"], ag.spatial_softmax(th["a"])), 7),
        {"x": x, "a": rng.normal(size=(1, 6, 5))},
    )
    probs["broadcast_mul"] = (wrap(lambda th: ag.broadcast_mul(th["v"], th["x"]), 8),
                              {"v": rng.normal(size=2), "x": x})
    probs["linear"] = (wrap(lambda th: ag.linear(th["x"], th["w"], th["b"]), 9),
                       {"x": rng.normal(size=5), "w": rng.normal(size=(3, 5)), "b": rng.normal(size=3)})
    probs["mse_loss"] = (lambda tape, th: ag.mse_loss(th["p"], th["y"]),
                         {"p": rng.normal(size=(4, 2)), "y": rng.normal(size=(4, 2))})
    return probs


def check_primitive_gradients(seed: int = 0, samples: int = 200) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, failed = 0.0, []
    for name, (forward, params) in primitive_problems(rng).items():
        report = grad_check(forward, params, seed=seed, samples=samples, threshold=GRADIENT_TOLERANCE)
        worst = max(worst, report.max_rel_error)
        if not report.passed:
            failed.append(f"{name} ({report.max_rel_error:.2e})")
    detail = f"max relative error {worst:.2e}"
    if failed:
        detail += f"; failing: {', '.join(failed)}"
    return CheckResult("primitive-gradients", not failed, detail)


def model_problem(seed: int = 0, config: ArchitectureConfig = None):
    config = config or ArchitectureConfig.tiny()
    rng = np.random.default_rng(seed)
    shape = (config.in_channels, config.height, config.width)
    adapt, target = rng.uniform(size=shape), rng.uniform(size=shape)
    label = rng.uniform(size=(1, 2))
    params = init_params(config, seed)
    # break the symmetric head so every head weight gets a distinct gradient
    params.tensors["head.weight"] = params.tensors["head.weight"] + rng.normal(scale=0.1, size=params["head.weight"].shape)

    def forward(tape, theta):
        pred = predict(adapt, target, theta, config, tape=tape).prediction
        return ag.mse_loss(ag.stack([pred]), tape.constant(label))

    return forward, params.tensors


def check_model_gradients(seed: int = 0, samples: int = 200) -> CheckResult:
    forward, params = model_problem(seed)
    report = grad_check(forward, params, seed=seed, samples=samples, threshold=GRADIENT_TOLERANCE)
    detail = f"{len(report.entries)} coordinates, max relative error {report.max_rel_error:.2e}"
    if not report.passed:
        worst = max(report.failures, key=lambda e: e.rel_error)
        detail += f"; worst {worst.name}{list(worst.index)}"
    return CheckResult("model-gradients", report.passed, detail)


def check_sliding_window(seed: int = 0, size: int = 32) -> CheckResult:
    """Every tower output pixel equals the tower applied to its receptive-field crop."""
    config = ArchitectureConfig.tiny().with_size(size, size)
    params = init_params(config, seed)
    rng = np.random.default_rng(seed)
    image = rng.uniform(size=(config.in_channels, size, size))

    def tower(img):
        tape = ag.Tape()
        return tower_forward(tape.constant(img), tape.watch_all(params.tensors), config).data

    full = tower(image)
    rf = config.receptive_field
    worst = 0.0
    for i in range(full.shape[1]):
        for j in range(full.shape[2]):
            crop = tower(image[:, i:i + rf, j:j + rf])
            worst = max(worst, float(np.max(np.abs(crop[:, 0, 0] - full[:, i, j]))))
    return CheckResult(
        "sliding-window", worst < SLIDING_TOLERANCE,
        f"{full.shape[1] * full.shape[2]} crops of {rf}×{rf}, max abs diff {worst:.2e}",
    )


def run_selftest(seed: int = 0, cases: int = 100, samples: int = 200) -> SelftestReport:
    report = SelftestReport()
    _run(report, "oracles", lambda: check_oracles(seed, cases))
    _run(report, "stack3x3-binary", lambda: check_stack3x3_binary(seed, cases))
    _run(report, "primitive-gradients", lambda: check_primitive_gradients(seed, samples))
    _run(report, "model-gradients", lambda: check_model_gradients(seed, samples))
    _run(report, "sliding-window", lambda: check_sliding_window(seed))
    return report
