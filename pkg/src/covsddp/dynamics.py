r"""Stochastic model contract, discretization and linearization.

A model is the Itô SDE

.. math::

    dx = f(x, u)\,dt + F(x, u)\,d\omega

with ``x`` in R^n, ``u`` in R^m and ``omega`` a p-dimensional Brownian motion.
All model callables broadcast over leading axes: ``drift(x, u)`` takes
``x`` of shape ``(..., n)`` and ``u`` of shape ``(..., m)``.  Rollouts and
trajectory linearization call them once per time step on a whole batch, so
vectorized models are much faster than per-point ones.  A model whose
callables only accept single points can be declared with
``vectorized=False``; it is then looped over transparently.

Array layouts
-------------
============================  =========================
``drift``                     ``(..., n)``
``diffusion``                 ``(..., n, p)``
``drift_jac_x``               ``(..., n, n)``
``drift_jac_u``               ``(..., n, m)``
``diffusion_jac_x``           ``(..., p, n, n)`` -- d F[:, i] / dx
``diffusion_jac_u``           ``(..., p, n, m)`` -- d F[:, i] / du
``drift_hess_xx``             ``(..., n, n, n)`` -- [a, b, c] = d2 f_a / dx_b dx_c
``drift_hess_uu``             ``(..., n, m, m)``
``drift_hess_ux``             ``(..., n, m, n)`` -- [a, b, c] = d2 f_a / du_b dx_c
============================  =========================
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import IntegrationBlowupError, ModelEvaluationError, StructuralError

ArrayFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

#: default relative step for central differences
FD_STEP = 1e-5
#: default relative step for the outer difference of nested second derivatives
FD_STEP_OUTER = 1e-4

_JACOBIAN_FIELDS = (
    ("drift_jac_x", "fx"),
    ("drift_jac_u", "fu"),
    ("diffusion_jac_x", "Fx"),
    ("diffusion_jac_u", "Fu"),
)


def _first_bad_point(values, x, u):
    bad = ~np.isfinite(values)
    bad = bad.reshape(bad.shape[: x.ndim - 1] + (-1,)).any(axis=-1)
    idx = np.argwhere(bad)
    if idx.size == 0 or x.ndim == 1:
        return x, u
    i = tuple(idx[0])
    return x[i], u[i]


def _pointwise(fn: ArrayFn, out_shape: tuple[int, ...]) -> ArrayFn:
    def wrapped(x, u):
        batch = x.shape[:-1]
        xs = x.reshape(-1, x.shape[-1])
        us = np.broadcast_to(u, batch + u.shape[-1:]).reshape(-1, u.shape[-1])
        out = np.empty((xs.shape[0],) + out_shape)
        for k in range(xs.shape[0]):
            out[k] = fn(xs[k], us[k])
        return out.reshape(batch + out_shape)

    return wrapped


@dataclass(frozen=True)
class ControlledSDE:
    """Drift/diffusion pair with optional analytic derivatives.

    Missing derivatives are obtained with :func:`finite_diff_derivatives`.
    """

    state_dim: int
    control_dim: int
    noise_dim: int
    drift: ArrayFn
    diffusion: ArrayFn
    drift_jac_x: Optional[ArrayFn] = None
    drift_jac_u: Optional[ArrayFn] = None
    diffusion_jac_x: Optional[ArrayFn] = None
    diffusion_jac_u: Optional[ArrayFn] = None
    drift_hess_xx: Optional[ArrayFn] = None
    drift_hess_uu: Optional[ArrayFn] = None
    drift_hess_ux: Optional[ArrayFn] = None
    vectorized: bool = True
    name: str = "model"
    _calls: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        for attr in ("state_dim", "control_dim", "noise_dim"):
            if int(getattr(self, attr)) < 1:
                raise StructuralError(f"{attr} must be a positive integer")
        n, m, p = self.state_dim, self.control_dim, self.noise_dim
        shapes = {
            "drift": (n,),
            "diffusion": (n, p),
            "drift_jac_x": (n, n),
            "drift_jac_u": (n, m),
            "diffusion_jac_x": (p, n, n),
            "diffusion_jac_u": (p, n, m),
            "drift_hess_xx": (n, n, n),
            "drift_hess_uu": (n, m, m),
            "drift_hess_ux": (n, m, n),
        }
        for attr, shape in shapes.items():
            fn = getattr(self, attr)
            if fn is None:
                continue
            self._calls[attr] = (fn if self.vectorized else _pointwise(fn, shape), shape)

    # -- evaluation ---------------------------------------------------------

    def _eval(self, attr: str, x, u, check: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape[-1:] != (self.state_dim,):
            raise StructuralError(f"state has shape {x.shape}, expected (..., {self.state_dim})")
        if u.shape[-1:] != (self.control_dim,):
            raise StructuralError(f"control has shape {u.shape}, expected (..., {self.control_dim})")
        fn, shape = self._calls[attr]
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        out = np.asarray(fn(x, u), dtype=float)
        if out.shape != batch + shape:
            try:
                out = np.broadcast_to(out, batch + shape).copy()
            except ValueError:
                raise StructuralError(
                    f"{attr} returned shape {out.shape}, expected {batch + shape}"
                ) from None
        if check and not np.all(np.isfinite(out)):
            xb = np.broadcast_to(x, batch + x.shape[-1:])
            ub = np.broadcast_to(u, batch + u.shape[-1:])
            bx, bu = _first_bad_point(out, xb, ub)
            raise ModelEvaluationError(f"non-finite {attr}", bx, bu)
        return out

    def f(self, x, u, check: bool = True) -> np.ndarray:
        return self._eval("drift", x, u, check)

    def F(self, x, u, check: bool = True) -> np.ndarray:
        return self._eval("diffusion", x, u, check)

    def has(self, attr: str) -> bool:
        return attr in self._calls

    @property
    def has_analytic_jacobians(self) -> bool:
        return all(self.has(a) for a, _ in _JACOBIAN_FIELDS)

    def jacobians(self, x, u) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """``(fx, fu, Fx, Fu)``, analytic where available."""
        fd = None
        out = []
        for attr, fd_name in _JACOBIAN_FIELDS:
            if self.has(attr):
                out.append(self._eval(attr, x, u))
            else:
                if fd is None:
                    fd = finite_diff_derivatives(self, x, u)
                out.append(getattr(fd, fd_name))
        return tuple(out)

    def drift_hessians(self, x, u) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(fxx, fuu, fux)``, analytic where available, otherwise nested differences."""
        if all(self.has(a) for a in ("drift_hess_xx", "drift_hess_uu", "drift_hess_ux")):
            return (
                self._eval("drift_hess_xx", x, u),
                self._eval("drift_hess_uu", x, u),
                self._eval("drift_hess_ux", x, u),
            )
        d = finite_diff_derivatives(self, x, u, second_order=True)
        fxx = self._eval("drift_hess_xx", x, u) if self.has("drift_hess_xx") else d.fxx
        fuu = self._eval("drift_hess_uu", x, u) if self.has("drift_hess_uu") else d.fuu
        fux = self._eval("drift_hess_ux", x, u) if self.has("drift_hess_ux") else d.fux
        return fxx, fuu, fux


@dataclass
class ModelDerivatives:
    fx: np.ndarray
    fu: np.ndarray
    Fx: np.ndarray
    Fu: np.ndarray
    fxx: Optional[np.ndarray] = None
    fuu: Optional[np.ndarray] = None
    fux: Optional[np.ndarray] = None


def _steps(v: np.ndarray, h: float) -> np.ndarray:
    return h * np.maximum(1.0, np.abs(v))


def _central(fun: Callable[[np.ndarray, np.ndarray], np.ndarray], x, u, wrt: str, h: float):
    """Central differences of ``fun`` along the last axis of ``x`` or ``u``.

    Returns an array with the derivative index appended as the last axis.
    """
    v = x if wrt == "x" else u
    cols = []
    for j in range(v.shape[-1]):
        step = _steps(v[..., j], h)
        vp = v.copy()
        vm = v.copy()
        vp[..., j] += step
        vm[..., j] -= step
        if wrt == "x":
            diff = fun(vp, u) - fun(vm, u)
        else:
            diff = fun(x, vp) - fun(x, vm)
        denom = (vp[..., j] - vm[..., j]).reshape(step.shape + (1,) * (diff.ndim - step.ndim))
        cols.append(diff / denom)
    return np.stack(cols, axis=-1)


def finite_diff_derivatives(
    model: ControlledSDE,
    x,
    u,
    h: float = FD_STEP,
    second_order: bool = False,
    h_outer: float = FD_STEP_OUTER,
) -> ModelDerivatives:
    """Central-difference derivatives of drift and diffusion.

    Steps are ``h * max(1, |component|)``.  Second-order drift tensors are
    central differences (step ``h_outer``) of the drift Jacobians, which are
    themselves analytic if the model supplies them and differenced otherwise.
    Works on batches: ``x`` of shape ``(..., n)``.
    """
    if h <= 0 or h_outer <= 0:
        raise ValueError("finite-difference step must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    x = np.broadcast_to(x, batch + x.shape[-1:]).copy()
    u = np.broadcast_to(u, batch + u.shape[-1:]).copy()

    fx = _central(model.f, x, u, "x", h)
    fu = _central(model.f, x, u, "u", h)
    # (..., n, p, k) -> (..., p, n, k)
    Fx = np.swapaxes(_central(model.F, x, u, "x", h), -3, -2)
    Fu = np.swapaxes(_central(model.F, x, u, "u", h), -3, -2)
    out = ModelDerivatives(fx, fu, Fx, Fu)
    if second_order:

        def jx(xx, uu):
            if model.has("drift_jac_x"):
                return model._eval("drift_jac_x", xx, uu)
            return _central(model.f, xx, uu, "x", h)

        def ju(xx, uu):
            if model.has("drift_jac_u"):
                return model._eval("drift_jac_u", xx, uu)
            return _central(model.f, xx, uu, "u", h)

        fxx = _central(jx, x, u, "x", h_outer)
        fuu = _central(ju, x, u, "u", h_outer)
        out.fxx = 0.5 * (fxx + np.swapaxes(fxx, -1, -2))
        out.fuu = 0.5 * (fuu + np.swapaxes(fuu, -1, -2))
        out.fux = _central(ju, x, u, "x", h_outer)
    return out


@dataclass
class LocalModel:
    """Discrete-time linearization at one nominal point (or a stack of them).

    ``Gamma_dx[..., i, :, :]`` is the Jacobian of diffusion column ``i``
    with respect to the state; ``second_order`` is ``(fxx, fuu, fux)`` of
    the discrete map (already multiplied by ``dt``) or ``None``.
    """

    A: np.ndarray
    B: np.ndarray
    Gamma0: np.ndarray
    Gamma_dx: np.ndarray
    Gamma_du: np.ndarray
    dt: float
    second_order: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None

    def gamma_at(self, dx, du) -> np.ndarray:
        """Diffusion matrix at the perturbed point, affine in ``(dx, du)``."""
        dx = np.asarray(dx, dtype=float)
        du = np.asarray(du, dtype=float)
        delta = np.einsum("...ink,...k->...ni", self.Gamma_dx, dx)
        delta = delta + np.einsum("...ink,...k->...ni", self.Gamma_du, du)
        return self.Gamma0 + delta

    def __getitem__(self, i) -> "LocalModel":
        so = None if self.second_order is None else tuple(t[i] for t in self.second_order)
        return LocalModel(
            self.A[i], self.B[i], self.Gamma0[i], self.Gamma_dx[i], self.Gamma_du[i], self.dt, so
        )


def discretize_linearize(model: ControlledSDE, x_bar, u_bar, dt: float, kappa: int = 0) -> LocalModel:
    """Euler discretization linearized about ``(x_bar, u_bar)``.

    ``A = I + fx dt`` and ``B = fu dt``.  Batched over leading axes, so a
    whole nominal trajectory can be linearized in one call.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if kappa not in (0, 1):
        raise ValueError("kappa must be 0 or 1")
    x_bar = np.asarray(x_bar, dtype=float)
    u_bar = np.asarray(u_bar, dtype=float)
    n = model.state_dim
    G0 = model.F(x_bar, u_bar)
    fx, fu, Fx, Fu = model.jacobians(x_bar, u_bar)
    A = np.eye(n) + fx * dt
    B = fu * dt
    second = None
    if kappa == 1:
        fxx, fuu, fux = model.drift_hessians(x_bar, u_bar)
        second = (fxx * dt, fuu * dt, fux * dt)
    return LocalModel(A, B, G0, Fx, Fu, dt, second)


def em_update(x, drift, diff, dt, xi) -> np.ndarray:
    return x + drift * dt + np.einsum("...ij,...j->...i", diff, xi)


def euler_maruyama_step(model: ControlledSDE, x, u, dt: float, xi, step: int | None = None) -> np.ndarray:
    """``x + f(x, u) dt + F(x, u) xi``; the caller draws ``xi ~ N(0, dt I)``.

    Non-finite drift/diffusion or a non-finite result raises
    :class:`IntegrationBlowupError` tagged with ``step``.
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1:] != (model.noise_dim,):
        raise StructuralError(f"noise has shape {xi.shape}, expected (..., {model.noise_dim})")
    try:
        drift = model.f(x, u)
        diff = model.F(x, u)
    except ModelEvaluationError as exc:
        raise IntegrationBlowupError(str(exc), step) from exc
    with np.errstate(over="ignore", invalid="ignore"):
        x_next = em_update(x, drift, diff, dt, xi)
    if not np.all(np.isfinite(x_next)):
        raise IntegrationBlowupError("non-finite state after Euler-Maruyama step", step)
    return x_next
