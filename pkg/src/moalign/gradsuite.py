"""Registry of finite-difference checks for every differentiable operation.

Each check builds a tiny 64-bit instance from a fixed seed and returns a
:class:`GradReport`. ``run_all`` drives the ``gradcheck`` CLI command.
"""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import align
from . import tensor as tc
from .conv import conv3d, transposed_conv3d, trilinear_interpolate
from .diffusion import (DenoiserConfig, ProjectionConfig, denoise, diffusion_loss, init_denoiser,
                        init_projection, project)
from .gradcheck import GradReport, finite_diff_check
from .motion import compress, decode_flow, flow_loss, init_compressor, init_flow_decoder
from .tensor import Tensor

CHECKS: dict[str, Callable[[], GradReport]] = {}


def register(name):
    def deco(fn):
        CHECKS[name] = fn
        return fn
    return deco


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _away_from_zero(rng, *shape):
    # keeps kinked activations off their kink by more than the FD step
    x = rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True)


def _weighted_sum(y: Tensor, seed: int) -> Tensor:
    w = np.random.default_rng(seed).standard_normal(y.shape)
    return tc.tsum(y * Tensor(w))


@register("conv3d")
def check_conv3d():
    rng = np.random.default_rng(1)
    x, w, b = _rand(rng, 1, 2, 4, 5, 4), _rand(rng, 3, 2, 2, 3, 2), _rand(rng, 3)
    return finite_diff_check(lambda x, w, b: _weighted_sum(conv3d(x, w, b, stride=(1, 2, 1), padding=(1, 1, 0)), 0),
                             [x, w, b])


@register("transposed_conv3d")
def check_transposed_conv3d():
    rng = np.random.default_rng(2)
    x, w, b = _rand(rng, 1, 2, 2, 3, 3), _rand(rng, 2, 3, 1, 4, 4), _rand(rng, 3)
    return finite_diff_check(
        lambda x, w, b: _weighted_sum(transposed_conv3d(x, w, b, stride=(1, 2, 2), padding=(0, 1, 1)), 1), [x, w, b])


@register("trilinear")
def check_trilinear():
    rng = np.random.default_rng(3)
    x = _rand(rng, 1, 2, 2, 3, 4)
    return finite_diff_check(lambda x: _weighted_sum(trilinear_interpolate(x, (3, 5, 7)), 2), x)


_ACTS = {
    "relu": tc.relu, "silu": tc.silu, "sigmoid": tc.sigmoid, "tanh": tc.tanh, "gelu": tc.gelu, "exp": tc.exp,
    "abs": tc.tabs, "log": lambda x: tc.log(tc.tabs(x)), "sqrt": lambda x: tc.sqrt(tc.tabs(x)),
    "softmax": lambda x: tc.softmax(x, axis=-1), "layer_norm": lambda x: tc.layer_norm(x),
    "l2_normalize": lambda x: tc.l2_normalize(x, axis=-1),
}


def _act_check(fn, seed):
    def run():
        x = _away_from_zero(np.random.default_rng(seed), 3, 5)
        return finite_diff_check(lambda x: _weighted_sum(fn(x), seed), x)
    return run


for _i, (_name, _fn) in enumerate(_ACTS.items()):
    CHECKS[f"act.{_name}"] = _act_check(_fn, 10 + _i)


@register("cosine_sim")
def check_cosine_sim():
    rng = np.random.default_rng(4)
    a, b = _rand(rng, 6, 5), _rand(rng, 6, 5)
    return finite_diff_check(lambda a, b: _weighted_sum(tc.cosine_sim(a, b), 3), [a, b])


@register("matmul")
def check_matmul():
    rng = np.random.default_rng(5)
    a, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 5)
    return finite_diff_check(lambda a, b: _weighted_sum(tc.matmul(a, b), 4), [a, b])


@register("flow_loss")
def check_flow_loss():
    rng = np.random.default_rng(6)
    p, t = _rand(rng, 2, 2, 4, 5), rng.uniform(-1, 1, (2, 2, 4, 5))
    return finite_diff_check(lambda p: flow_loss(p, t), p)


@register("diffusion_loss")
def check_diffusion_loss():
    rng = np.random.default_rng(7)
    p, e = _rand(rng, 2, 3, 4, 2), rng.standard_normal((2, 3, 4, 2))
    return finite_diff_check(lambda p: diffusion_loss(p, e), p)


@register("repa_loss")
def check_repa_loss():
    rng = np.random.default_rng(8)
    y, h, P = rng.standard_normal((12, 4)), _rand(rng, 12, 6), _rand(rng, 6, 4)
    return finite_diff_check(lambda h, P: align.repa_loss(y, h, P), [h, P])


def _grids(seed):
    rng = np.random.default_rng(seed)
    return _rand(rng, 3, 2, 2, 4), rng.standard_normal((3, 2, 2, 4))


@register("trd_loss")
def check_trd_loss():
    Z, M = _grids(9)
    return finite_diff_check(lambda Z: align.trd_loss(Z, M), Z)


@register("soft_trd_loss")
def check_soft_trd_loss():
    Z, M = _grids(10)
    return finite_diff_check(lambda Z: align.soft_trd_loss(Z, M, tau=2.0, block_size=5), Z)


def _randomize(tensors, rng, scale=0.5):
    for t in tensors:
        t.data = rng.uniform(-scale, scale, size=t.shape)
    return list(tensors)


@register("stage1_composite")
def check_stage1():
    rng = np.random.default_rng(11)
    S = rng.standard_normal((1, 2, 2, 3, 6))
    psi = init_compressor(0, 6, 3, 2, dtype=np.float64)
    omega = init_flow_decoder(1, 3, (1, 6, 10), (3, 2, 2), dtype=np.float64)
    params = _randomize(list(psi.tensors().values()) + list(omega.tensors().values()), rng)
    target = rng.uniform(-1, 1, (1, 1, 2, 6, 10))
    return finite_diff_check(lambda *_: flow_loss(decode_flow(omega, compress(psi, S)), target), params)


@register("stage2_composite")
def check_stage2():
    rng = np.random.default_rng(12)
    dcfg = DenoiserConfig(latent=(2, 4, 4, 2), patch=2, width=8, depth=2, heads=2, mlp_ratio=2, n_classes=3,
                          tap_layer=1, T=10)
    pcfg = ProjectionConfig(dcfg.grid, 8, (3, 2, 2), 3, hidden=2, spatial_stride=1, spatial_padding=1)
    theta = init_denoiser(dcfg, 0, np.float64)
    zeta = init_projection(pcfg, 1, np.float64)
    _randomize(zeta.values(), rng)
    z = rng.standard_normal((1,) + dcfg.latent)
    eps = rng.standard_normal(z.shape)
    M = rng.standard_normal((1, 3, 2, 2, 3))
    params = list(theta.values()) + list(zeta.values())

    def f(*_):
        eps_hat, Y = denoise(theta, dcfg, z, [4], [1])
        return align.total_loss(diffusion_loss(eps_hat, eps), align.soft_trd_loss(project(zeta, pcfg, Y), M), 0.5)

    return finite_diff_check(f, params)


def run_all(names=None, tol: float = 1e-4, log=print) -> bool:
    ok = True
    for name in names or CHECKS:
        if name not in CHECKS:
            raise KeyError(f"unknown gradient check {name!r}")
        t0 = time.perf_counter()
        rep = CHECKS[name]()
        passed = rep.max_rel_err <= tol
        ok &= passed
        if log:
            log(f"{'PASS' if passed else 'FAIL'} {name:24s} max_rel_err={rep.max_rel_err:.2e} "
                f"({time.perf_counter() - t0:.1f}s)")
    return ok
