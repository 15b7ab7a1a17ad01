"""Step-size schedules, RMSProp preconditioning and global parameter updates.

All positive global parameters are stepped in inverse-softplus coordinates
and sticks in logit coordinates, so any finite step keeps them in domain.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .model import GlobalGradient, GlobalState, ModelConfig, stick_block

logger = logging.getLogger(__name__)

SQRT_FLOOR = 1e-16


@dataclass(frozen=True)
class RobbinsMonroSchedule:
    offset: float = 100.0
    exponent: float = 0.9

    def __post_init__(self):
        if not self.offset > 0:
            raise ValueError("schedule offset must be positive")
        if not 0.5 < self.exponent <= 1.0:
            raise ValueError("schedule exponent must lie in (0.5, 1]")


def schedule_rate(schedule: RobbinsMonroSchedule, t) -> float:
    """(offset + t)^(-exponent)."""
    if t < 0:
        raise ValueError("iteration must be nonnegative")
    return float((schedule.offset + t) ** (-schedule.exponent))


@dataclass
class RmsPropState:
    """Running second moment per coordinate, keyed by parameter name."""

    tau: float = 0.1
    eta: float = 1.0
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")


def rmsprop_step(state: RmsPropState, gradient, key="g"):
    """Return ``eta * g / sqrt(g2)`` and the updated state (mutated in place).

    The first call for a key seeds the running moment with the squared
    gradient itself.
    """
    g = np.asarray(gradient, dtype=float)
    prev = state.second_moment.get(key)
    if prev is None:
        g2 = g * g
    else:
        if np.shape(prev) != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match state {np.shape(prev)} for {key!r}")
        g2 = (1.0 - state.tau) * prev + state.tau * g * g
    state.second_moment[key] = g2
    step = state.eta * g / np.maximum(np.sqrt(g2), SQRT_FLOOR)
    return step, state


def newton_direction(grad, hessian):
    """Solve (-H) x = grad by Cholesky; ``None`` if -H is not positive definite."""
    try:
        chol = np.linalg.cholesky(-hessian)
    except np.linalg.LinAlgError:
        return None
    y = np.linalg.solve(chol, grad)
    return np.linalg.solve(chol.T, y)


def apply_preconditioned_update(gs: GlobalState, grad: GlobalGradient, rms: RmsPropState,
                                rate=1.0, atom_rate=None, location_rate=None,
                                location_preconditioner="hessian", frozen=()) -> GlobalState:
    """Take one step on every global parameter and return the new state.

    Atoms move ``atom_rate`` of the way toward their coordinate targets.
    Locations use a Newton step scaled by ``location_rate`` (per-component
    Hessian, RMSProp where a Hessian is not negative definite), plain
    RMSProp, or no preconditioning at all (``"identity"``). Scale, sticks,
    alpha and c use RMSProp with ``rms.eta = rate``.
    Parameters named in ``frozen`` are left untouched.
    """
    atom_rate = rate if atom_rate is None else atom_rate
    location_rate = rate if location_rate is None else location_rate
    if not 0.0 <= atom_rate <= 1.0:
        # a convex combination of current and target keeps the gamma parameters positive
        raise ValueError(f"atom step must lie in [0, 1], got {atom_rate}")
    rms.eta = rate
    theta = gs.unconstrained()
    grads = grad.as_dict()
    new = {}
    for name in ("scale", "sticks", "alpha", "c"):
        if name in frozen:
            continue
        step, _ = rmsprop_step(rms, grads[name], key=name)
        new[name] = theta[name] + step

    if "locations" not in frozen:
        locs = theta["locations"].copy()
        g_loc = grads["locations"]
        if location_preconditioner == "hessian":
            fallback = []
            for k in range(gs.T):
                direction = newton_direction(g_loc[k], grad.location_hessian[k])
                if direction is None:
                    fallback.append(k)
                else:
                    locs[k] += location_rate * direction
            if fallback:
                logger.info("location Hessian not negative definite for %d component(s); using RMSProp",
                            len(fallback))
                # one shared moment for the whole block keeps the state shape fixed
                step, _ = rmsprop_step(rms, g_loc, key="locations")
                locs[fallback] += step[fallback]
        elif location_preconditioner == "rmsprop":
            rms.eta = location_rate
            step, _ = rmsprop_step(rms, g_loc, key="locations")
            rms.eta = rate
            locs += step
        elif location_preconditioner == "identity":
            locs += location_rate * g_loc
        else:
            raise ValueError(f"unknown preconditioner {location_preconditioner!r}")
        new["locations"] = locs

    out = gs.with_unconstrained(new)
    if "atoms" not in frozen:
        out.atom_shape = (1.0 - atom_rate) * gs.atom_shape + atom_rate * grad.atom_shape_target
        out.atom_rate = (1.0 - atom_rate) * gs.atom_rate + atom_rate * grad.atom_rate_target
    return out


STICK_KEYS = ("scale", "sticks", "alpha", "c")


def maximize_stick_block(gs: GlobalState, stats, n_rows, config: ModelConfig, scale=1.0,
                         max_iter=1000, collapsed=None) -> GlobalState:
    """Maximize the bound over (s, V, alpha, c) with the local state summarized by ``stats``.

    ``collapsed`` switches to the objective with q(x) profiled out (see
    :func:`corrrm.model.stick_block`). Runs L-BFGS in unconstrained
    coordinates; the result is never worse than the starting point.
    """
    theta = gs.unconstrained()
    T = gs.T

    def unpack(v):
        return {"scale": v[0], "sticks": v[1:T + 1], "alpha": v[T + 1], "c": v[T + 2]}

    def neg(v):
        trial = gs.with_unconstrained(unpack(v))
        try:
            with np.errstate(all="ignore"):
                val, g = stick_block(trial, stats, n_rows, config, scale, collapsed)
        except ZeroDivisionError:
            # a line search probe far enough out that softplus underflows to zero
            return np.inf, np.zeros_like(v)
        if not np.isfinite(val):
            return np.inf, np.zeros_like(v)
        return -val, -np.concatenate([[g["scale"]], g["sticks"], [g["alpha"]], [g["c"]]])

    v0 = np.concatenate([[theta["scale"]], theta["sticks"], [theta["alpha"]], [theta["c"]]])
    f0, _ = neg(v0)
    res = optimize.minimize(neg, v0, jac=True, method="L-BFGS-B", options={"maxiter": max_iter})
    if not np.isfinite(res.fun) or res.fun > f0:
        return gs.copy()
    out = gs.with_unconstrained(unpack(res.x))
    return out
