"""Finite-difference gradient suites.

Every suite builds a random scalar objective ``sum(f(theta) * R)`` through the
autograd layer, takes analytic gradients with ``backward`` and compares them
with central differences on a random subset of coordinates per target.

Relative error per target is ``max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)``
where ``floor = 1e-3 * max_i max(|a_i|, |n_i|)`` keeps near-zero entries from
dominating. Deformable offsets are drawn with fractional parts away from the
integer lattice, where trilinear sampling has kinks.

The difference quotients are always evaluated in double precision, so the
single-precision suites measure the float32 analytic path against a float64
reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import autograd as ag
from . import deform, network, tensor

BARS = {"double": 1e-4, "single": 1e-2}
FD_STEP = 1e-5
DTYPES = {"double": np.float64, "single": np.float32}
ALL_PLANE_MASKS = [deform.PlaneMask(h, w, d) for h in (True, False) for w in (True, False) for d in (True, False)
                   if h or w or d]


@dataclass
class Problem:
    """Named inputs plus an objective built from autograd Vars."""

    arrays: Dict[str, np.ndarray]
    objective: Callable[[Dict[str, ag.Var]], ag.Var]
    probes: int = 6


@dataclass
class SuiteResult:
    module: str
    precision: str
    trials: int
    errors: Dict[str, float] = field(default_factory=dict)

    @property
    def bar(self) -> float:
        return BARS[self.precision]

    @property
    def passed(self) -> bool:
        return all(e < self.bar for e in self.errors.values())

    def table(self) -> str:
        w = max([len(k) for k in self.errors] + [6])
        lines = [f"{'target':<{w}}  max rel err  (bar {self.bar:g}, {self.trials} trials, {self.precision})"]
        for k, e in self.errors.items():
            lines.append(f"{k:<{w}}  {e:11.3e}  {'ok' if e < self.bar else 'FAIL'}")
        return "\n".join(lines)


def check_problem(prob: Problem, rng, h: float = FD_STEP, only: Optional[List[str]] = None) -> Dict[str, float]:
    names = list(prob.arrays) if only is None else only
    params = {k: ag.parameter(v, k) for k, v in prob.arrays.items()}
    loss = prob.objective(params)
    grads = ag.backward(loss, [params[k] for k in names])
    out = {}
    for k in names:
        a = grads[params[k]]
        base = prob.arrays[k].astype(np.float64)
        n = min(prob.probes, base.size)
        idx = rng.choice(base.size, size=n, replace=False)

        def f(theta, k=k):
            vals = {j: (theta if j == k else v) for j, v in prob.arrays.items()}
            cast = {j: ag.constant(np.asarray(v, dtype=np.float64)) for j, v in vals.items()}
            return float(prob.objective(cast).value)

        num = ag.finite_difference_grad(f, base, h=h, indices=idx).reshape(-1)[idx]
        ana = a.reshape(-1)[idx].astype(np.float64)
        scale = max(np.abs(ana).max(), np.abs(num).max())
        floor = max(1e-3 * scale, 1e-300)
        out[k] = float((np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)).max())
    return out


def _weighted_sum(y: ag.Var, r: np.ndarray) -> ag.Var:
    return ag.sum_all(ag.mul(y, ag.constant(r)))


def _offsets(rng, n, K, spatial, dtype, margin=0.15):
    """Offsets with integer parts in [-2, 2] and fractional parts in [margin, 1 - margin]."""
    shape = (n, 3 * K) + tuple(spatial)
    return (rng.integers(-2, 3, shape) + rng.uniform(margin, 1 - margin, shape)).astype(dtype)


# ---------------------------------------------------------------------------
# problem generators


def ddc_problem(rng, dtype) -> Problem:
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 5))
    spatial = tuple(int(s) for s in rng.integers(3, 6, 3))
    grid = deform.SamplingGrid(tuple(int(k) for k in rng.choice([1, 3, 3], 3)))
    mask = ALL_PLANE_MASKS[int(rng.integers(0, len(ALL_PLANE_MASKS)))]
    arrays = {"input": rng.standard_normal((n, c) + spatial).astype(dtype),
              "weight": rng.standard_normal((c, grid.K)).astype(dtype),
              "offsets": _offsets(rng, n, grid.K, spatial, dtype),
              "bias": rng.standard_normal(c).astype(dtype)}
    r = rng.standard_normal((n, c) + spatial)

    def obj(p):
        y = ag.deformable_conv(p["input"], p["weight"], p["offsets"], p["bias"], grid=grid, mask=mask)
        return _weighted_sum(y, r)

    return Problem(arrays, obj)


def standard_problem(rng, dtype) -> Problem:
    n, groups = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    cin, cout = groups * int(rng.integers(1, 3)), groups * int(rng.integers(1, 3))
    spatial = tuple(int(s) for s in rng.integers(3, 5, 3))
    grid = deform.DEFAULT_GRID
    mask = ALL_PLANE_MASKS[int(rng.integers(0, len(ALL_PLANE_MASKS)))]
    arrays = {"input": rng.standard_normal((n, cin) + spatial).astype(dtype),
              "weight": rng.standard_normal((cout, cin // groups, grid.K)).astype(dtype),
              "offsets": _offsets(rng, n, grid.K, spatial, dtype),
              "bias": rng.standard_normal(cout).astype(dtype)}
    r = rng.standard_normal((n, cout) + spatial)

    def obj(p):
        y = ag.deformable_conv(p["input"], p["weight"], p["offsets"], p["bias"], groups=groups, grid=grid,
                               mask=mask)
        return _weighted_sum(y, r)

    return Problem(arrays, obj)


def randomize_offset_branch(model: network.Model, rng) -> None:
    """Small weights and a mid-cell bias so offsets stay away from the lattice."""
    for k, v in model.params.items():
        if ".offset.weight" in k:
            v.value = (0.005 * rng.standard_normal(v.value.shape)).astype(v.value.dtype)
        elif ".offset.bias" in k:
            v.value = (rng.integers(-1, 2, v.value.shape) + rng.uniform(0.4, 0.6, v.value.shape)).astype(v.value.dtype)


def randomize_norms(model: network.Model, rng) -> None:
    for k, v in model.params.items():
        if k.endswith(".gamma"):
            v.value = rng.uniform(0.5, 1.5, v.value.shape).astype(v.value.dtype)
        elif k.endswith(".beta") or k.endswith(".bias") and ".offset." not in k:
            v.value = (0.1 * rng.standard_normal(v.value.shape)).astype(v.value.dtype)


def block_problem(rng, dtype, bc: Optional[network.BlockConfig] = None) -> Problem:
    bc = bc or network.BlockConfig(channels=4)
    cfg = network.NetworkConfig(channels=(bc.channels,), blocks_per_stage=1, operator=bc.operator,
                                offset_branch=bc.offset_branch, plane=bc.mask.name, scaling=bc.scaling,
                                mlp_ratio=bc.mlp_ratio)
    model = network.build_network(cfg, seed=int(rng.integers(0, 2**31)), dtype=dtype)
    randomize_offset_branch(model, rng)
    randomize_norms(model, rng)
    prefix = "stage0.block0."
    arrays = {"input": rng.standard_normal((1, bc.channels, 4, 4, 4)).astype(dtype)}
    arrays.update({k[len(prefix):]: v.value for k, v in model.params.items() if k.startswith(prefix)})
    r = rng.standard_normal((1, bc.channels, 4, 4, 4))

    def obj(p):
        lookup = lambda name: p[name[len(prefix):]]
        lookup_p = _Lookup(lookup)
        return _weighted_sum(network.deformux_block(lookup_p, "stage0.block0", p["input"], bc), r)

    return Problem(arrays, obj, probes=4)


class _Lookup:
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, name):
        return self.fn(name)

    def __contains__(self, name):
        try:
            self.fn(name)
            return True
        except KeyError:
            return False


# At least three channels everywhere: layer norm over two channels maps to +-1
# and has a vanishing input gradient.
MINI = network.NetworkConfig(channels=(3, 6), blocks_per_stage=1, stem_kernel=3)


def network_problem(rng, dtype, cfg: network.NetworkConfig = MINI) -> Problem:
    model = network.build_network(cfg, seed=int(rng.integers(0, 2**31)), dtype=dtype)
    randomize_offset_branch(model, rng)
    randomize_norms(model, rng)
    spatial = (cfg.divisor * 2,) * 3
    x = rng.standard_normal((1, cfg.in_channels) + spatial).astype(dtype)
    r = rng.standard_normal((1, cfg.num_classes) + spatial)
    arrays = {k: v.value for k, v in model.params.items()}

    def obj(p):
        model.params = p
        model.dtype = p["head.weight"].value.dtype
        return _weighted_sum(network.forward(model, x), r)

    return Problem(arrays, obj, probes=2)


def loss_problem(rng, dtype) -> Problem:
    n, c = int(rng.integers(1, 3)), int(rng.integers(2, 4))
    spatial = tuple(int(s) for s in rng.integers(2, 5, 3))
    labels = rng.integers(0, c, (n,) + spatial)
    gt = (labels[:, None] == np.arange(c).reshape(1, -1, 1, 1, 1)).astype(dtype)
    arrays = {"probs": rng.uniform(0.05, 1.0, (n, c) + spatial).astype(dtype),
              "logits": rng.standard_normal((n, c) + spatial).astype(dtype)}

    def obj(p):
        a = ag.soft_dice_loss(p["probs"], gt)
        b = ag.soft_dice_loss(ag.softmax(p["logits"]), gt)
        return ag.add(ag.add(a, b), ag.cross_entropy(p["logits"], gt))

    return Problem(arrays, obj)


def layer_norm_problem(rng, dtype) -> Problem:
    c = int(rng.integers(3, 6))
    arrays = {"input": rng.standard_normal((2, c, 3, 3, 2)).astype(dtype),
              "gamma": rng.uniform(0.5, 1.5, c).astype(dtype), "beta": rng.standard_normal(c).astype(dtype)}
    r = rng.standard_normal((2, c, 3, 3, 2))
    return Problem(arrays, lambda p: _weighted_sum(ag.layer_norm(p["input"], p["gamma"], p["beta"]), r))


def linear_problem(rng, dtype) -> Problem:
    cin, cout = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    arrays = {"input": rng.standard_normal((2, cin, 3, 2, 2)).astype(dtype),
              "weight": rng.standard_normal((cout, cin)).astype(dtype),
              "bias": rng.standard_normal(cout).astype(dtype)}
    r = rng.standard_normal((2, cout, 3, 2, 2))
    return Problem(arrays, lambda p: _weighted_sum(ag.pointwise_linear(p["input"], p["weight"], p["bias"]), r))


def conv3d_problem(rng, dtype) -> Problem:
    groups = int(rng.integers(1, 3))
    cin, cout = groups * int(rng.integers(1, 3)), groups * int(rng.integers(1, 3))
    k = int(rng.choice([1, 2, 3]))
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    arrays = {"input": rng.standard_normal((1, cin, 5, 4, 5)).astype(dtype),
              "weight": rng.standard_normal((cout, cin // groups, k, k, k)).astype(dtype),
              "bias": rng.standard_normal(cout).astype(dtype)}
    out_shape = tensor.conv3d(arrays["input"], arrays["weight"], None, stride, padding, groups).shape
    r = rng.standard_normal(out_shape)
    return Problem(arrays, lambda p: _weighted_sum(
        ag.conv3d(p["input"], p["weight"], p["bias"], stride, padding, groups), r))


def transposed_conv3d_problem(rng, dtype) -> Problem:
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    arrays = {"input": rng.standard_normal((1, cin, 2, 3, 2)).astype(dtype),
              "weight": rng.standard_normal((cin, cout, 2, 2, 2)).astype(dtype),
              "bias": rng.standard_normal(cout).astype(dtype)}
    r = rng.standard_normal((1, cout, 4, 6, 4))
    return Problem(arrays, lambda p: _weighted_sum(
        ag.transposed_conv3d(p["input"], p["weight"], p["bias"]), r))


SUITES = {
    "ddc": ddc_problem,
    "standard-deform": standard_problem,
    "block": block_problem,
    "network": network_problem,
    "loss": loss_problem,
    "layer-norm": layer_norm_problem,
    "linear": linear_problem,
    "conv3d": conv3d_problem,
    "transposed-conv3d": transposed_conv3d_problem,
}
CLI_MODULES = ("ddc", "standard-deform", "block", "network", "loss")


def run_suite(module: str, trials: int = 20, seed: int = 1, precision: str = "double", **kw) -> SuiteResult:
    if module not in SUITES:
        raise KeyError(f"unknown gradcheck module {module!r}")
    if precision not in BARS:
        raise KeyError(f"unknown precision {precision!r}")
    rng = tensor.generator(seed)
    dtype = DTYPES[precision]
    res = SuiteResult(module, precision, trials)
    for _ in range(trials):
        prob = SUITES[module](rng, dtype, **kw)
        for k, e in check_problem(prob, rng).items():
            res.errors[k] = max(res.errors.get(k, 0.0), e)
    return res
