"""Finite-difference verification of the autodiff backward pass.

``finite_difference_check`` compares analytic gradients against central
differences for a scalar-valued function of named parameter tensors. The
block registry at the bottom wires every network block and loss term into
named check cases for the ``gradcheck`` CLI command and the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses
from . import nn
from . import tensor as T
from .decoder import ModeQueryRefiner, QueryCoupler, StateQueryRefiner, TimeQueryInit
from .encoder import AGENT_FEATURES, MAP_FEATURES, SceneContext, SceneEncoder
from .model import Forecaster, ModelConfig
from .tensor import Tensor

REL_ERR_FLOOR = 1e-6


@dataclass
class ParamCheckResult:
    name: str
    checked_elements: int
    rel_err: float
    worst_index: tuple
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self):
        for r in self.results:
            status = "ok" if r.passed else "FAIL"
            yield (f"{status:4s} {r.name}: rel_err={r.rel_err:.3e} "
                   f"({r.checked_elements} elements, worst at {r.worst_index})")


def finite_difference_check(f, params, step: float = 1e-5,
                            tolerance: float = 1e-4,
                            max_elements_per_param: int = None,
                            rng: np.random.Generator = None) -> GradCheckReport:
    """Check analytic grads of ``f()`` w.r.t. `params` by central differences.

    Args:
        f: nullary callable returning a scalar Tensor; must be deterministic
            and depend on `params` only through their current ``data``.
        params: iterable of (name, Tensor) pairs with requires_grad set.
        step: central-difference step size.
        tolerance: per-parameter relative error threshold.
        max_elements_per_param: optionally probe only this many elements per
            parameter (always including the largest analytic gradient entry);
            None probes every element.
        rng: generator for element subsampling; required if subsampling.

    The relative error for a parameter is ``max|a - n|`` over the probed
    elements divided by ``max(|a|_inf, |n|_inf, 1e-6)``. Failures are
    reported, not raised.
    """
    params = list(params.items()) if isinstance(params, dict) else list(params)
    for _, p in params:
        p.grad = None
    loss = f()
    if loss.data.size != 1:
        raise T.ShapeError(f"gradcheck target must be scalar, got {loss.shape}")
    T.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for _, p in params]

    report = GradCheckReport(tolerance=tolerance, step=step)
    for (name, p), a_grad in zip(params, analytic):
        flat = p.data.flat
        n = p.data.size
        if max_elements_per_param is not None and max_elements_per_param < n:
            if rng is None:
                raise ValueError("subsampling requires an rng")
            chosen = rng.choice(n, size=max_elements_per_param, replace=False)
            top = int(np.argmax(np.abs(a_grad.reshape(-1))))
            if top not in chosen:
                chosen = np.append(chosen[:-1], top)
        else:
            chosen = np.arange(n)
        a_flat = a_grad.reshape(-1)
        worst_diff, worst_idx, numeric_scale = 0.0, 0, 0.0
        with T.no_grad():
            for idx in chosen:
                idx = int(idx)
                orig = flat[idx]
                flat[idx] = orig + step
                hi = float(f().data)
                flat[idx] = orig - step
                lo = float(f().data)
                flat[idx] = orig
                numeric = (hi - lo) / (2.0 * step)
                numeric_scale = max(numeric_scale, abs(numeric))
                diff = abs(numeric - a_flat[idx])
                if diff > worst_diff:
                    worst_diff, worst_idx = diff, idx
        scale = max(np.abs(a_flat[chosen]).max(initial=0.0), numeric_scale,
                    REL_ERR_FLOOR)
        rel = worst_diff / scale
        report.results.append(ParamCheckResult(
            name=name,
            checked_elements=len(chosen),
            rel_err=float(rel),
            worst_index=np.unravel_index(worst_idx, p.data.shape),
            passed=bool(rel <= tolerance),
        ))
    return report


# ----------------------------------------------------------------------
# named check cases
# ----------------------------------------------------------------------
#
# Every network block and every loss branch gets one case here, built at
# toy sizes in float64. Inputs are registered as parameters too so the
# chain back to the data is exercised, not just the leaf weights.

_DIM = 8
_HEADS = 2
_MODES = 2
_STEPS = 4
_HIST = 6
_STATE = 4

_REGISTRY = {}


@dataclass
class CheckCase:
    """A nullary scalar function plus the named tensors it differentiates.

    ``max_elements`` bounds the probed entries per tensor for the large
    cases (the probe set always includes the largest analytic gradient);
    None probes everything.
    """

    f: object
    params: list
    max_elements: int = None


def register_case(name: str):
    def deco(builder):
        if name in _REGISTRY:
            raise ValueError(f"duplicate gradcheck case {name!r}")
        _REGISTRY[name] = builder
        return builder
    return deco


def registered_cases() -> tuple:
    return tuple(sorted(_REGISTRY))


def build_case(name: str, seed: int = 0) -> CheckCase:
    if name not in _REGISTRY:
        raise KeyError(
            f"unknown gradcheck case {name!r}; known: {', '.join(registered_cases())}")
    return _REGISTRY[name](seed)


def run_cases(names=None, tolerance: float = 1e-4, step: float = 1e-5,
              seed: int = 0):
    """Build and check the named cases (all of them by default).

    Returns a list of (name, GradCheckReport) in the order run.
    """
    if names is None:
        names = registered_cases()
    out = []
    for name in names:
        case = build_case(name, seed=seed)
        report = finite_difference_check(
            case.f, case.params, step=step, tolerance=tolerance,
            max_elements_per_param=case.max_elements,
            rng=np.random.default_rng(seed + 104729))
        out.append((name, report))
    return out


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _toy_context(rng: np.random.Generator, tokens: int = 7):
    """A small SceneContext with a couple of padded token slots."""
    data = nn.Parameter(rng.normal(0.0, 1.0, (tokens, _DIM)))
    valid = np.ones(tokens, dtype=bool)
    valid[-2] = False
    provenance = np.zeros(tokens, dtype=np.int8)
    provenance[tokens // 2:] = 1
    ctx = SceneContext(tokens=data, token_mask=valid, provenance=provenance)
    return ctx, data


@register_case("mlp")
def _case_mlp(seed):
    rng = _rng(seed)
    mlp = nn.MLP([5, _DIM, 3], rng, np.float64)
    x = nn.Parameter(rng.normal(0.0, 1.0, (4, 5)))

    def f():
        return (mlp(x) ** 2).mean()

    return CheckCase(f, [("x", x)] + list(mlp.named_parameters()))


@register_case("attention")
def _case_attention(seed):
    rng = _rng(seed)
    layer = nn.AttentionLayer(_DIM, _HEADS, rng, np.float64, ffn_mult=2)
    q = nn.Parameter(rng.normal(0.0, 1.0, (2, 3, _DIM)))
    kv = nn.Parameter(rng.normal(0.0, 1.0, (2, 5, _DIM)))
    valid = np.ones((2, 5), dtype=bool)
    valid[0, 3:] = False
    valid[1, 1] = False

    def f():
        return (layer(q, kv=kv, key_valid=valid) ** 2).mean()

    params = [("q", q), ("kv", kv)] + list(layer.named_parameters())
    return CheckCase(f, params)


@register_case("scan_causal")
def _case_scan_causal(seed):
    rng = _rng(seed)
    block = nn.MambaBlock(_DIM, rng, np.float64, expand=2, state_dim=_STATE)
    x = nn.Parameter(rng.normal(0.0, 1.0, (2, _HIST, _DIM)))
    valid = np.ones((2, _HIST), dtype=bool)
    valid[0, :2] = False                      # leading pad on one sequence
    weights = rng.normal(0.0, 1.0, (2, _HIST, _DIM))

    def f():
        return (block(x, step_valid=valid) * weights).mean()

    return CheckCase(f, [("x", x)] + list(block.named_parameters()))


@register_case("scan_bidirectional")
def _case_scan_bidirectional(seed):
    rng = _rng(seed)
    block = nn.BiMambaBlock(_DIM, rng, np.float64, expand=2, state_dim=_STATE)
    x = nn.Parameter(rng.normal(0.0, 1.0, (2, 5, _DIM)))
    weights = rng.normal(0.0, 1.0, (2, 5, _DIM))

    def f():
        return (block(x) * weights).mean()

    return CheckCase(f, [("x", x)] + list(block.named_parameters()))


@register_case("scene_encoder")
def _case_scene_encoder(seed):
    rng = _rng(seed)
    enc = SceneEncoder(_DIM, rng, np.float64, fusion_depth=1, agent_depth=1,
                       num_heads=_HEADS, dropout_rate=0.0, state_dim=_STATE,
                       expand=2)
    map_feat = nn.Parameter(rng.normal(0.0, 1.0, (3, 4, MAP_FEATURES)))
    map_mask = np.ones((3, 4), dtype=bool)
    map_mask[1, 2:] = False                   # partial polyline
    map_mask[2, :] = False                    # fully padded slot
    agents = nn.Parameter(rng.normal(0.0, 1.0, (2, _HIST, AGENT_FEATURES)))
    agent_mask = np.ones((2, _HIST), dtype=bool)
    agent_mask[1, :3] = False                 # agent appearing late

    def f():
        ctx = enc(map_feat, map_mask, agents, agent_mask)
        keep = ctx.token_mask[..., None].astype(np.float64)
        return ((ctx.tokens * keep) ** 2).mean()

    params = [("map_feat", map_feat), ("agents", agents)]
    params += list(enc.named_parameters())
    return CheckCase(f, params, max_elements=8)


@register_case("time_query_refiner")
def _case_time_query_refiner(seed):
    rng = _rng(seed)
    init = TimeQueryInit(_DIM, rng, np.float64)
    refiner = StateQueryRefiner(_DIM, rng, np.float64, attn_depth=1,
                                scan_depth=1, num_heads=_HEADS,
                                state_dim=_STATE, expand=2)
    ctx, ctx_tokens = _toy_context(rng)
    weights = rng.normal(0.0, 1.0, (_STEPS, _DIM))

    def f():
        return (refiner(init(_STEPS), ctx) * weights).mean()

    params = [("ctx", ctx_tokens)] + list(init.named_parameters())
    params += list(refiner.named_parameters())
    return CheckCase(f, params)


@register_case("mode_query_refiner")
def _case_mode_query_refiner(seed):
    rng = _rng(seed)
    refiner = ModeQueryRefiner(_DIM, rng, np.float64, depth=1, num_heads=_HEADS)
    q_m = nn.Parameter(rng.normal(0.0, 1.0, (_MODES, _DIM)))
    ctx, ctx_tokens = _toy_context(rng)
    weights = rng.normal(0.0, 1.0, (_MODES, _DIM))

    def f():
        return (refiner(q_m, ctx) * weights).mean()

    params = [("q_m", q_m), ("ctx", ctx_tokens)]
    params += list(refiner.named_parameters())
    return CheckCase(f, params)


@register_case("query_coupler")
def _case_query_coupler(seed):
    rng = _rng(seed)
    coupler = QueryCoupler(_DIM, rng, np.float64, attn_depth=1, scan_depth=1,
                           num_heads=_HEADS, state_dim=_STATE, expand=2)
    q_m = nn.Parameter(rng.normal(0.0, 1.0, (_MODES, _DIM)))
    q_s = nn.Parameter(rng.normal(0.0, 1.0, (_STEPS, _DIM)))
    ctx, ctx_tokens = _toy_context(rng)
    weights = rng.normal(0.0, 1.0, (_MODES, _STEPS, _DIM))

    def f():
        return (coupler(q_m, q_s, ctx) * weights).mean()

    params = [("q_m", q_m), ("q_s", q_s), ("ctx", ctx_tokens)]
    params += list(coupler.named_parameters())
    return CheckCase(f, params, max_elements=8)


@register_case("loss_regression")
def _case_loss_regression(seed):
    rng = _rng(seed)
    trajs = nn.Parameter(rng.normal(0.0, 2.0, (2, _MODES, _STEPS, 2)))
    gt = rng.normal(0.0, 2.0, (2, _STEPS, 2))

    def f():
        _, best_traj = losses.select_best(trajs, gt)
        return losses.smooth_l1(best_traj, gt)

    return CheckCase(f, [("trajs", trajs)])


@register_case("loss_classification")
def _case_loss_classification(seed):
    rng = _rng(seed)
    logits = nn.Parameter(rng.normal(0.0, 1.0, (3, _MODES)))
    target = np.array([0, 1, 0], dtype=np.int64)

    def f():
        return losses.cross_entropy(logits, target)

    return CheckCase(f, [("logits", logits)])


@register_case("loss_time_aux")
def _case_loss_time_aux(seed):
    rng = _rng(seed)
    traj = nn.Parameter(rng.normal(0.0, 2.0, (2, _STEPS, 2)))
    gt = rng.normal(0.0, 2.0, (2, _STEPS, 2))

    def f():
        return losses.aux_ts_loss(traj, gt)

    return CheckCase(f, [("traj", traj)])


@register_case("loss_mode_aux")
def _case_loss_mode_aux(seed):
    rng = _rng(seed)
    trajs = nn.Parameter(rng.normal(0.0, 2.0, (2, _MODES, _STEPS, 2)))
    logits = nn.Parameter(rng.normal(0.0, 1.0, (2, _MODES)))
    gt = rng.normal(0.0, 2.0, (2, _STEPS, 2))

    def f():
        return losses.aux_m_loss(trajs, logits, gt)

    return CheckCase(f, [("trajs", trajs), ("logits", logits)])


@register_case("end_to_end")
def _case_end_to_end(seed):
    rng = _rng(seed)
    cfg = ModelConfig(dim=_DIM, modes=_MODES, future_steps=_STEPS,
                      query_steps=_STEPS // 2, num_heads=_HEADS,
                      state_dim=_STATE, expand=2, dropout=0.0, agent_depth=1,
                      fusion_depth=1, state_attn_depth=1, state_scan_depth=1,
                      mode_depth=1, grid_attn_depth=1, grid_scan_depth=1,
                      dtype="float64")
    model = Forecaster(cfg, rng)
    map_feat = rng.normal(0.0, 1.0, (1, 2, 4, MAP_FEATURES))
    map_mask = np.ones((1, 2, 4), dtype=bool)
    map_mask[0, 1, 3] = False
    agents = rng.normal(0.0, 1.0, (1, 2, _HIST, AGENT_FEATURES))
    agent_mask = np.ones((1, 2, _HIST), dtype=bool)
    agent_mask[0, 1, :2] = False
    gt = rng.normal(0.0, 2.0, (1, _STEPS, 2))

    def f():
        forecast = model(map_feat, map_mask, agents, agent_mask)
        return losses.total_loss(forecast, gt).total

    return CheckCase(f, list(model.named_parameters()), max_elements=4)
