"""Plain gradient descent and Adam over parameter trees.

Both updates are pure functions: they return fresh parameter (and state)
trees and never mutate their inputs, so identical inputs give bit-identical
outputs. Each training or adaption stage constructs its own Adam state;
moments are never carried across stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .net import NetParams, _check_same_shape, params_map, zeros_like_params

RHO1_DEFAULT = 0.9
RHO2_DEFAULT = 0.999
EPS_DEFAULT = 1e-8


@dataclass
class AdamState:
    """First/second gradient moments, step counter, and hyperparameters."""

    m: NetParams
    v: NetParams
    t: int = 0
    rho1: float = RHO1_DEFAULT
    rho2: float = RHO2_DEFAULT
    eps: float = EPS_DEFAULT

    @classmethod
    def init(cls, params: NetParams, rho1: float = RHO1_DEFAULT,
             rho2: float = RHO2_DEFAULT, eps: float = EPS_DEFAULT) -> "AdamState":
        return cls(m=zeros_like_params(params), v=zeros_like_params(params),
                   t=0, rho1=rho1, rho2=rho2, eps=eps)


def gd_step(params: NetParams, grads: NetParams, beta: float) -> NetParams:
    """One plain gradient-descent step: params - beta * grads."""
    if beta <= 0:
        raise ValueError(f"learning rate must be positive, got {beta}")
    _check_same_shape(params, grads)
    return params_map(lambda p, g: p - beta * g, params, grads)


def adam_step(state: AdamState, params: NetParams, grads: NetParams,
              gamma: float) -> tuple[NetParams, AdamState]:
    """One Adam step with bias-corrected moments.

    m <- rho1 m + (1-rho1) g;  v <- rho2 v + (1-rho2) g^2;
    params <- params - gamma * m_hat / (sqrt(v_hat) + eps).
    """
    if gamma <= 0:
        raise ValueError(f"learning rate must be positive, got {gamma}")
    _check_same_shape(params, grads)
    t = state.t + 1
    m = params_map(lambda ms, g: state.rho1 * ms + (1.0 - state.rho1) * g, state.m, grads)
    v = params_map(lambda vs, g: state.rho2 * vs + (1.0 - state.rho2) * g * g, state.v, grads)
    bc1 = 1.0 - state.rho1 ** t
    bc2 = 1.0 - state.rho2 ** t
    new_params = params_map(
        lambda p, ms, vs: p - gamma * (ms / bc1) / (np.sqrt(vs / bc2) + state.eps),
        params, m, v)
    return new_params, AdamState(m=m, v=v, t=t, rho1=state.rho1, rho2=state.rho2,
                                 eps=state.eps)
