"""Finite-difference checks for every differentiable op and every attention
variant end to end."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from apn import ops
from apn.attention import AttentionConfig, Variant, build_attention
from apn.gradcheck import grad_check
from apn.model import TOY_BACKBONE, ModelSpec, build_model
from apn.pyramid import fpn_fuse
from apn.tensor import Tensor, no_grad

OP_TOL = 1e-6
E2E_TOL = 1e-4

Case = tuple[Callable[[], Tensor], list[Tensor]]


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _projected(out_fn: Callable[[], Tensor], dims, rng) -> Callable[[], Tensor]:
    r = Tensor(rng.normal(size=dims))
    return lambda: ops.sum(ops.mul(out_fn(), r))


def _away_from_zero(rng, dims, gap=0.1):
    return np.sign(rng.normal(size=dims)) * (gap + rng.uniform(size=dims))


def _case_add(rng):
    x, y = _t(rng.normal(size=(2, 3, 4, 4))), _t(rng.normal(size=(1, 3, 1, 1)))
    return _projected(lambda: ops.add(x, y), (2, 3, 4, 4), rng), [x, y]


def _case_sub(rng):
    x, y = _t(rng.normal(size=(2, 3, 1, 4))), _t(rng.normal(size=(2, 3, 4, 4)))
    return _projected(lambda: ops.sub(x, y), (2, 3, 4, 4), rng), [x, y]


def _case_mul(rng):
    x, y = _t(rng.normal(size=(2, 3, 4, 4))), _t(rng.normal(size=(2, 1, 4, 4)))
    return _projected(lambda: ops.mul(x, y), (2, 3, 4, 4), rng), [x, y]


def _case_relu(rng):
    x = _t(_away_from_zero(rng, (2, 3, 4, 4)))
    return _projected(lambda: ops.relu(x), (2, 3, 4, 4), rng), [x]


def _case_sigmoid(rng):
    x = _t(2 * rng.normal(size=(2, 3, 4, 4)))
    return _projected(lambda: ops.sigmoid(x), (2, 3, 4, 4), rng), [x]


def _case_sum(rng):
    x = _t(rng.normal(size=(2, 3, 4)))
    return (lambda: ops.sum(x)), [x]


def _case_mean(rng):
    x = _t(rng.normal(size=(2, 3, 4)))
    return (lambda: ops.mean(x)), [x]


def _case_reshape(rng):
    x = _t(rng.normal(size=(2, 3, 4)))
    return _projected(lambda: ops.reshape(x, (4, 6)), (4, 6), rng), [x]


def _case_slice(rng):
    x = _t(rng.normal(size=(2, 6, 3, 3)))
    return _projected(lambda: ops.slice_axis(x, 1, 2, 5), (2, 3, 3, 3), rng), [x]


def _case_concat(rng):
    x, y = _t(rng.normal(size=(2, 2, 3, 3))), _t(rng.normal(size=(2, 3, 3, 3)))
    return _projected(lambda: ops.concat([x, y], 1), (2, 5, 3, 3), rng), [x, y]


def _case_global_avg_pool(rng):
    x = _t(rng.normal(size=(2, 3, 4, 5)))
    return _projected(lambda: ops.global_avg_pool(x), (2, 3, 1, 1), rng), [x]


def _case_channel_avg_pool(rng):
    x = _t(rng.normal(size=(2, 3, 4, 5)))
    return _projected(lambda: ops.channel_avg_pool(x), (2, 1, 4, 5), rng), [x]


def _case_conv2d(rng):
    x, w, b = _t(rng.normal(size=(2, 3, 4, 3))), _t(rng.normal(size=(4, 3, 3, 3))), _t(rng.normal(size=(4,)))
    return _projected(lambda: ops.conv2d(x, w, b, stride=2, pad=1), (2, 4, 2, 2), rng), [x, w, b]


def _case_conv2d_same(rng):
    x, w = _t(rng.normal(size=(2, 2, 4, 4))), _t(rng.normal(size=(3, 2, 3, 3)))
    return _projected(lambda: ops.conv2d(x, w, None, stride=1, pad=1), (2, 3, 4, 4), rng), [x, w]


def _case_conv_transpose2d(rng):
    x, w, b = _t(rng.normal(size=(2, 3, 2, 2))), _t(rng.normal(size=(3, 2, 3, 3))), _t(rng.normal(size=(2,)))
    out = lambda: ops.conv_transpose2d(x, w, b, stride=2, pad=1, output_pad=1)  # noqa: E731
    return _projected(out, (2, 2, 4, 4), rng), [x, w, b]


def _case_maxpool2d(rng):
    # distinct values keep the argmax away from ties
    x = _t(rng.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) * 0.1)
    return _projected(lambda: ops.maxpool2d(x, 3, 2, 1), (2, 2, 2, 2), rng), [x]


def _case_batchnorm2d(rng):
    x = _t(rng.normal(size=(3, 2, 3, 3)) * 2 + 1)
    g, b = _t(rng.uniform(0.5, 1.5, size=2)), _t(rng.normal(size=2))
    rm, rv = np.zeros(2), np.ones(2)
    out = lambda: ops.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training=True)  # noqa: E731
    return _projected(out, (3, 2, 3, 3), rng), [x, g, b]


def _case_batchnorm2d_eval(rng):
    x = _t(rng.normal(size=(2, 2, 3, 3)))
    g, b = _t(rng.uniform(0.5, 1.5, size=2)), _t(rng.normal(size=2))
    rm, rv = rng.normal(size=2), rng.uniform(0.5, 2.0, size=2)
    out = lambda: ops.batchnorm2d(x, g, b, rm, rv, training=False)  # noqa: E731
    return _projected(out, (2, 2, 3, 3), rng), [x, g, b]


def _case_bilinear_resize(rng):
    x = _t(rng.normal(size=(2, 2, 2, 3)))
    return _projected(lambda: ops.bilinear_resize(x, 4, 4), (2, 2, 4, 4), rng), [x]


def _case_bilinear_downsample(rng):
    x = _t(rng.normal(size=(2, 2, 4, 4)))
    return _projected(lambda: ops.bilinear_resize(x, 3, 2), (2, 2, 3, 2), rng), [x]


def _case_linear(rng):
    x, w, b = _t(rng.normal(size=(3, 5))), _t(rng.normal(size=(4, 5))), _t(rng.normal(size=(4,)))
    return _projected(lambda: ops.linear(x, w, b), (3, 4), rng), [x, w, b]


def _case_softmax_cross_entropy(rng):
    x = _t(rng.normal(size=(4, 5)))
    labels = rng.integers(0, 5, size=4).tolist()
    return (lambda: ops.softmax_cross_entropy(x, labels)), [x]


OP_CASES: dict[str, Callable[[np.random.Generator], Case]] = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "sum": _case_sum,
    "mean": _case_mean,
    "reshape": _case_reshape,
    "slice": _case_slice,
    "concat": _case_concat,
    "global_avg_pool": _case_global_avg_pool,
    "channel_avg_pool": _case_channel_avg_pool,
    "conv2d": _case_conv2d,
    "conv2d_same": _case_conv2d_same,
    "conv_transpose2d": _case_conv_transpose2d,
    "maxpool2d": _case_maxpool2d,
    "batchnorm2d": _case_batchnorm2d,
    "batchnorm2d_eval": _case_batchnorm2d_eval,
    "bilinear_resize": _case_bilinear_resize,
    "bilinear_downsample": _case_bilinear_downsample,
    "linear": _case_linear,
    "softmax_cross_entropy": _case_softmax_cross_entropy,
}


def check_op(name: str, seed: int = 0) -> float:
    f, tensors = OP_CASES[name](np.random.default_rng(seed))
    return max(grad_check(f, t) for t in tensors)


def _warm_up(module, make_input, passes: int = 3) -> None:
    """A few train-mode passes give BatchNorm non-trivial running statistics."""
    module.train()
    with no_grad():
        for _ in range(passes):
            make_input()
    module.eval()


def _sample(rng, size: int, k: int = 4) -> list[int]:
    return rng.choice(size, min(k, size), replace=False).tolist()


def check_attention(variant: Variant, seed: int = 0, channels: int = 4, hw: int = 8) -> float:
    """One fusion module alone on ``channels x hw x hw`` flows (eval-mode BN).

    The loss is a fixed random projection of the output so no gradient is
    saturated; every parameter and both inputs are checked.
    """
    rng = np.random.default_rng(seed)
    att = build_attention(AttentionConfig(variant, channels, 2, 2), seed=seed)
    dims = (2, channels, hw, hw)
    if att is None:
        x, u = _t(rng.normal(size=dims)), _t(rng.normal(size=dims))
        f = _projected(lambda: fpn_fuse(x, u), dims, rng)
        return max(grad_check(f, x), grad_check(f, u))
    att.to(np.float64)
    _warm_up(att, lambda: att(Tensor(rng.normal(size=dims)), Tensor(rng.normal(size=dims))))
    x, u = _t(rng.normal(size=dims)), _t(rng.normal(size=dims))
    f = _projected(lambda: att(x, u), dims, rng)
    errs = [grad_check(f, x), grad_check(f, u)]
    errs += [grad_check(f, p) for _, p in att.named_parameters()]
    return max(errs)


def check_model(variant: Variant, seed: int = 0, size: int = 16) -> float:
    """Whole toy model (two levels, C = 8) on a sampled subset of coordinates."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec(TOY_BACKBONE, AttentionConfig(variant, 8, 2, 2), num_classes=3)
    model = build_model(spec, seed=seed, dtype=np.float64)
    _warm_up(model, lambda: model(Tensor(rng.normal(size=(4, 3, size, size)))))
    x = _t(rng.normal(size=(2, 3, size, size)))
    f = _projected(lambda: model(x), (2, 3), rng)
    errs = [grad_check(f, x, indices=_sample(rng, x.data.size, 24))]
    errs += [grad_check(f, p, indices=_sample(rng, p.data.size)) for _, p in model.named_parameters()]
    return max(errs)


@dataclass
class SuiteReport:
    op_errors: dict[str, float] = field(default_factory=dict)
    e2e_errors: dict[str, float] = field(default_factory=dict)

    def failures(self) -> list[str]:
        bad = [k for k, v in self.op_errors.items() if not v <= OP_TOL]
        return bad + [k for k, v in self.e2e_errors.items() if not v <= E2E_TOL]

    @property
    def passed(self) -> bool:
        return not self.failures()

    def worst(self) -> tuple[str, float]:
        """Check with the largest error relative to its tolerance."""
        scored = [(v / OP_TOL, k, v) for k, v in self.op_errors.items()]
        scored += [(v / E2E_TOL, k, v) for k, v in self.e2e_errors.items()]
        _, name, err = max(scored, key=lambda s: (np.nan_to_num(s[0], nan=np.inf), s[1]))
        return name, err

    def lines(self) -> list[str]:
        out = []
        for k, v in self.op_errors.items():
            out.append(f"{'ok ' if v <= OP_TOL else 'FAIL'} op  {k:<30}{v:.3e}")
        for k, v in self.e2e_errors.items():
            out.append(f"{'ok ' if v <= E2E_TOL else 'FAIL'} e2e {k:<30}{v:.3e}")
        return out


def run_suite(
    seeds: Iterable[int] = (0,),
    ops_only: bool = False,
    variants: Optional[Iterable[Variant]] = None,
) -> SuiteReport:
    """Max relative error per check over ``seeds``.

    End-to-end keys are ``attention:<variant>`` and ``model:<variant>``.
    """
    seeds = list(seeds)
    report = SuiteReport()
    for name in OP_CASES:
        report.op_errors[name] = max(check_op(name, s) for s in seeds)
    if not ops_only:
        for v in variants or list(Variant):
            report.e2e_errors[f"attention:{v.value}"] = max(check_attention(v, s) for s in seeds)
            report.e2e_errors[f"model:{v.value}"] = max(check_model(v, s) for s in seeds)
    return report
