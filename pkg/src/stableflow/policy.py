"""Observation-space stochastic policy and its stability verifier.

A policy is the three-stage composition: pull the current observation back
to latent space through the inverse conditioned map, advance one step of the
stable latent SDE, push forward again. Data standardization is folded into
the change of variables as a fixed affine bijection (its constant log-det
enters every density).

The exact one-step conditional log density follows from the change of
variables: log p(y'|y, c) = log p_z(z'|z) - log|det df/dz|(z', c) - sum(log s)
with s the standardization scales. The pullback Lyapunov function
V(y) = U(f^-1(y, c)) transports the latent certificate to observation space;
``verify_generator_identity`` rebuilds the diffusion generator of V in
y-space from finite differences and the pushed-forward drift/diffusion, and
checks it against the latent closed form, which the chain rule says it must
equal for any diffeomorphism.

Likelihood terms condition on the context recorded with the earlier state of
each transition; within one generated step the same context is used for both
the inverse and forward maps.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector
from .errors import (
    ConditioningError,
    DatasetFormatError,
    DimensionError,
    NumericalError,
    ValidationError,
)
from .flow import ConditionedFlow
from .latent import latent_from_json, latent_to_json

__all__ = ["Standardization", "ContextDynamics", "Rollout", "StablePolicyModel"]

_COND_LIMIT = 1e8


@dataclass(frozen=True)
class Standardization:
    """Per-dimension affine normalization for states and contexts."""

    y_shift: np.ndarray
    y_scale: np.ndarray
    c_shift: np.ndarray
    c_scale: np.ndarray

    def __post_init__(self):
        for name in ("y_scale", "c_scale"):
            if np.any(getattr(self, name) <= 0):
                raise ValidationError(f"{name} entries must be > 0")

    @classmethod
    def identity(cls, dim_y: int, dim_c: int) -> "Standardization":
        return cls(np.zeros(dim_y), np.ones(dim_y), np.zeros(dim_c), np.ones(dim_c))

    @classmethod
    def fit(cls, states: np.ndarray, contexts: np.ndarray) -> "Standardization":
        """Mean/std per dimension; constant dimensions get unit scale."""
        y_scale = np.where(states.std(axis=0) > 1e-12, states.std(axis=0), 1.0)
        if contexts.size:
            c_shift = contexts.mean(axis=0)
            c_scale = np.where(contexts.std(axis=0) > 1e-12, contexts.std(axis=0), 1.0)
        else:
            c_shift = np.zeros(contexts.shape[-1] if contexts.ndim else 0)
            c_scale = np.ones_like(c_shift)
        return cls(states.mean(axis=0), y_scale, c_shift, c_scale)

    def std_y(self, y):
        return ad.div(ad.sub(y, self.y_shift), self.y_scale)

    def destd_y(self, y):
        return ad.add(ad.mul(y, self.y_scale), self.y_shift)

    def std_c(self, c):
        if self.c_shift.size == 0:
            return c
        return ad.div(ad.sub(c, self.c_shift), self.c_scale)

    @property
    def log_det_correction(self) -> float:
        """Constant subtracted from standardized-space log densities."""
        return float(np.sum(np.log(self.y_scale)))

    def to_json(self) -> dict:
        return {
            "y_shift": self.y_shift.tolist(),
            "y_scale": self.y_scale.tolist(),
            "c_shift": self.c_shift.tolist(),
            "c_scale": self.c_scale.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Standardization":
        return cls(*(np.asarray(obj[k], dtype=np.float64)
                     for k in ("y_shift", "y_scale", "c_shift", "c_scale")))


@dataclass(frozen=True)
class ContextDynamics:
    """Evolution law for the context along a rollout.

    ``constant`` holds the starting context. ``exponential-approach`` moves
    toward a target c* with |c - c*| shrinking by exp(-rate*dt) each step, so
    the context converges and the conditioned model inherits the fixed-target
    stability case in the limit.
    """

    kind: str = "constant"
    target: np.ndarray | None = None
    rate: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "exponential-approach"):
            raise ValidationError(f"unknown context dynamics kind {self.kind!r}")
        if self.kind == "exponential-approach":
            if self.target is None:
                raise ValidationError("exponential-approach needs a target context")
            if self.rate <= 0:
                raise ValidationError("approach rate must be > 0")

    def step(self, c: np.ndarray, dt: float) -> np.ndarray:
        if self.kind == "constant":
            return c
        decay = np.exp(-self.rate * dt)
        return self.target + (c - self.target) * decay


@dataclass
class Rollout:
    """Trace of one rollout: K+1 states/contexts/latents and K step densities.

    Log densities are None for noise-free steps, where the one-step law is
    degenerate and has no density.
    """

    states: np.ndarray
    contexts: np.ndarray
    latents: np.ndarray
    log_densities: list
    dt: float
    perturbations: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.states)
        if len(self.contexts) != n or len(self.latents) != n:
            raise ValidationError("states/contexts/latents must share length")
        if len(self.log_densities) != max(n - 1, 0):
            raise ValidationError("need one log density per step")

    def to_json(self) -> dict:
        return {
            "dt": self.dt,
            "states": [row.tolist() for row in self.states],
            "contexts": [row.tolist() for row in self.contexts],
            "log_densities": [None if v is None else float(v) for v in self.log_densities],
            "perturbations": [[int(k), list(map(float, d))] for k, d in self.perturbations],
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def from_json(cls, obj: dict, latents=None) -> "Rollout":
        states = np.asarray(obj["states"], dtype=np.float64)
        contexts = np.asarray(obj["contexts"], dtype=np.float64)
        if latents is None:
            latents = np.full_like(states, np.nan)
        return cls(states=states, contexts=contexts, latents=latents,
                   log_densities=list(obj["log_densities"]), dt=float(obj["dt"]),
                   perturbations=[(int(k), np.asarray(d)) for k, d in obj.get("perturbations", [])])


class StablePolicyModel:
    """Stable stochastic dynamics in observation space.

    Composition of a fixed affine standardization, a conditioned invertible
    flow, and a stable latent SDE. Stability in observation space is
    inherited structurally from the latent process for every context and
    every parameter value.
    """

    def __init__(self, flow: ConditionedFlow, latent, standardization: Standardization):
        if flow.dim != latent.dim:
            raise DimensionError("flow and latent dynamics disagree on state dimension")
        if standardization.y_shift.shape != (flow.dim,):
            raise DimensionError("standardization state width disagrees with the flow")
        if standardization.c_shift.shape != (flow.context_dim,):
            raise DimensionError("standardization context width disagrees with the flow")
        self.flow = flow
        self.latent = latent
        self.standardization = standardization
        self.dim = flow.dim
        self.context_dim = flow.context_dim

    # -- basic maps ---------------------------------------------------------

    def parameters(self) -> ParamVector:
        return ParamVector(self.flow.parameters())

    def to_latent(self, y, c):
        """Raw observation to latent point; returns (z, log|det dz/dy_std|)."""
        return self.flow.inverse(self.standardization.std_y(y), self.standardization.std_c(c))

    def to_observation(self, z, c):
        """Latent point to raw observation."""
        y_std, _ = self.flow.forward(z, self.standardization.std_c(c))
        return self.standardization.destd_y(y_std)

    def _check_pair(self, y, c):
        yv = ad.value_of(y)
        if yv.ndim == 0 or yv.shape[-1] != self.dim:
            raise DimensionError(f"state must have trailing dimension {self.dim}")
        if self.context_dim > 0:
            if c is None:
                raise DimensionError(f"context of dimension {self.context_dim} required")
            cv = ad.value_of(c)
            if cv.ndim == 0 or cv.shape[-1] != self.context_dim:
                raise DimensionError(f"context must have trailing dimension {self.context_dim}")

    # -- stepping -----------------------------------------------------------

    def step(self, y_prev, c, rng: np.random.Generator, deterministic: bool = False):
        """One observation-space step: inverse map, latent EM step, forward map."""
        self._check_pair(y_prev, c)
        z_prev, _ = self.to_latent(y_prev, c)
        z_next = self.latent.em_step(z_prev, rng, deterministic=deterministic)
        y_next = self.to_observation(z_next, c)
        if not np.all(np.isfinite(ad.value_of(y_next))):
            raise NumericalError("step produced a non-finite state")
        return y_next

    def log_cond_density(self, y_prev, y_next, c):
        """Exact log p(y_next | y_prev, c); differentiable w.r.t. parameters."""
        self._check_pair(y_prev, c)
        self._check_pair(y_next, c)
        z_prev, _ = self.to_latent(y_prev, c)
        z_next, log_det_inv = self.to_latent(y_next, c)
        lp = self.latent.log_transition(z_prev, z_next)
        return ad.sub(ad.add(lp, log_det_inv), self.standardization.log_det_correction)

    def log_initial_density(self, y0, c0):
        """Static density of the first state: standard normal base pulled
        through the conditioned map (plus the standardization correction)."""
        self._check_pair(y0, c0)
        z0, log_det_inv = self.to_latent(y0, c0)
        base = ad.mul(ad.add(ad.asum(ad.mul(z0, z0), axis=-1),
                             self.dim * np.log(2.0 * np.pi)), -0.5)
        return ad.sub(ad.add(base, log_det_inv), self.standardization.log_det_correction)

    def attractor_distance(self, y, c):
        """Latent-space distance of y to the attractor image under f(., c)."""
        z, _ = self.to_latent(y, c)
        return self.latent.attractor_distance(z)

    def pullback_V(self, y, c):
        """Lyapunov candidate V(y) = U(f^-1(y, c)); zero on the attractor image."""
        z, _ = self.to_latent(y, c)
        return self.latent.lyapunov(z)

    # -- rollouts -----------------------------------------------------------

    def rollout(self, y0, context_dyn, n_steps: int, rng: np.random.Generator,
                perturbations=(), context0=None, deterministic: bool = False) -> Rollout:
        """Iterate step() for n_steps, applying listed state displacements.

        ``perturbations`` is a list of (step index, displacement vector); the
        displacement is added to the current state before that step runs.
        The context evolves by ``context_dyn`` once per step.
        """
        if n_steps < 0:
            raise ValidationError("n_steps must be >= 0")
        y = np.asarray(y0, dtype=np.float64).copy()
        if context0 is not None:
            c = np.asarray(context0, dtype=np.float64).copy()
        elif isinstance(context_dyn, ContextDynamics) and context_dyn.target is not None:
            c = np.asarray(context_dyn.target, dtype=np.float64).copy()
        else:
            c = np.zeros(self.context_dim)
        self._check_pair(y, c)
        bumps = {}
        for k, d in perturbations:
            d = np.asarray(d, dtype=np.float64)
            if d.shape != (self.dim,):
                raise ValidationError(f"perturbation at step {k} has wrong dimension")
            bumps[int(k)] = bumps.get(int(k), 0) + d

        noise_free = deterministic or getattr(self.latent, "sigma", 0.0) == 0.0
        states, contexts, latents, perturb_list = [], [], [], []
        log_densities: list = []
        for k in range(n_steps + 1):
            if k in bumps:
                y = y + bumps[k]
                perturb_list.append((k, bumps[k]))
            z, _ = self.to_latent(y, c)
            states.append(np.asarray(y, dtype=np.float64))
            contexts.append(np.asarray(c, dtype=np.float64))
            latents.append(ad.value_of(z))
            if k == n_steps:
                break
            try:
                y_next = self.step(y, c, rng, deterministic=deterministic)
            except NumericalError as exc:
                raise NumericalError(f"rollout failed at step {k}: {exc}") from exc
            if noise_free:
                log_densities.append(None)
            else:
                log_densities.append(float(ad.value_of(self.log_cond_density(y, y_next, c))))
            y = y_next
            c = context_dyn.step(c, self.latent.dt)
        return Rollout(states=np.asarray(states), contexts=np.asarray(contexts),
                       latents=np.asarray(latents), log_densities=log_densities,
                       dt=self.latent.dt, perturbations=perturb_list)

    # -- verification -------------------------------------------------------

    def verify_generator_identity(self, y, c, h: float = 1e-4, certify_tol: float = 1e-3):
        """Numeric generator of the pullback V in y-space vs the latent closed
        form; returns (LV_numeric, LU_exact, abs_diff).

        LV is assembled from central-difference first/second derivatives of
        V in raw observation space and the pushed-forward drift/diffusion of
        the latent SDE. The pushed drift is the full Ito image
        J v + (s^2/2) Laplacian(f) of the process the model actually
        simulates (stepping in z and mapping through f); dropping the
        second-order term would break the identity for any curved map.

        Raises ConditioningError when the Jacobian is ill-conditioned or the
        stencil's roundoff would exceed ``certify_tol``, i.e. when no verdict
        at that tolerance is numerically certifiable.
        """
        if h <= 0 or certify_tol <= 0:
            raise ValidationError("step h and certify_tol must be > 0")
        y = np.asarray(y, dtype=np.float64)
        self._check_pair(y, c)
        d = self.dim
        z, _ = self.to_latent(y, c)

        # full-map Jacobian and Laplacian of z -> y (standardization folded in)
        eye = np.eye(d)
        zb = np.concatenate([z[None, :], z + h * eye, z - h * eye], axis=0)
        cb = None if self.context_dim == 0 else np.broadcast_to(
            np.asarray(c, dtype=np.float64), (2 * d + 1, self.context_dim))
        yb = self.to_observation(zb, cb if self.context_dim else None)
        y_center, y_plus, y_minus = yb[0], yb[1:d + 1], yb[d + 1:]
        jac = (y_plus - y_minus).T / (2.0 * h)
        laplacian = np.sum(y_plus + y_minus - 2.0 * y_center, axis=0) / (h * h)
        cond = np.linalg.cond(jac)
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            raise ConditioningError(f"flow Jacobian condition number {cond:.3e} exceeds {_COND_LIMIT:.0e}")

        # batched V evaluations for gradient and Hessian stencils
        points = []
        for i in range(d):
            points.append(y + h * eye[i])
            points.append(y - h * eye[i])
        for i in range(d):
            for j in range(d):
                points.append(y + h * eye[i] + h * eye[j])
                points.append(y + h * eye[i] - h * eye[j])
                points.append(y - h * eye[i] + h * eye[j])
                points.append(y - h * eye[i] - h * eye[j])
        pts = np.asarray(points)
        cb = None if self.context_dim == 0 else np.broadcast_to(
            np.asarray(c, dtype=np.float64), (len(pts), self.context_dim))
        v = ad.value_of(self.pullback_V(pts, cb))
        lu = float(ad.value_of(self.latent.generator(z)))
        # second-difference roundoff scales as eps*V/h^2; refuse to certify a
        # tolerance the stencil cannot resolve
        roundoff = 16.0 * np.finfo(np.float64).eps * float(np.max(np.abs(v))) / (h * h)
        if roundoff > certify_tol:
            raise ConditioningError(
                f"finite-difference stencil roundoff {roundoff:.3e} exceeds the "
                f"certifiable tolerance {certify_tol:.1e}")
        grad = np.array([(v[2 * i] - v[2 * i + 1]) / (2.0 * h) for i in range(d)])
        hess = np.zeros((d, d))
        base = 2 * d
        idx = 0
        for i in range(d):
            for j in range(d):
                vpp, vpm, vmp, vmm = v[base + idx: base + idx + 4]
                hess[i, j] = (vpp - vpm - vmp + vmm) / (4.0 * h * h)
                idx += 4
        hess = 0.5 * (hess + hess.T)

        s = float(ad.value_of(self.latent.diffusion_scale(z))[0])
        drift_y = jac @ ad.value_of(self.latent.drift(z)) + 0.5 * s * s * laplacian
        g_y = jac @ self.latent.diffusion(z)
        lv = float(grad @ drift_y + 0.5 * np.trace(g_y.T @ hess @ g_y))
        return lv, lu, abs(lv - lu)

    def verify_convergence(self, n_starts: int, radius: float, n_steps: int,
                           tol: float, rng: np.random.Generator, context=None,
                           deterministic: bool = False) -> dict:
        """Empirical global-convergence sweep from uniform-ball starts.

        Starts are sampled in the raw-unit ball of the given radius around
        the standardization center; reports the fraction of rollouts whose
        terminal latent distance to the attractor set is below tol.
        """
        if n_starts < 1 or radius <= 0 or tol <= 0:
            raise ValidationError("need n_starts >= 1, radius > 0, tol > 0")
        d = self.dim
        if context is None:
            context = self.standardization.c_shift.copy()
        # uniform in the ball: direction times radius * U^(1/d)
        dirs = rng.standard_normal((n_starts, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radii = radius * rng.uniform(0.0, 1.0, size=n_starts) ** (1.0 / d)
        starts = self.standardization.y_shift + dirs * radii[:, None]
        cb = np.broadcast_to(np.asarray(context, dtype=np.float64),
                             (n_starts, self.context_dim)) if self.context_dim else None

        y = starts
        for _ in range(n_steps):
            z, _ = self.to_latent(y, cb)
            z = self.latent.em_step(z, rng, deterministic=deterministic)
            y = self.to_observation(z, cb)
        z, _ = self.to_latent(y, cb)
        dist = np.atleast_1d(ad.value_of(self.latent.attractor_distance(z)))
        return {
            "n_starts": int(n_starts),
            "radius": float(radius),
            "n_steps": int(n_steps),
            "tol": float(tol),
            "deterministic": bool(deterministic),
            "fraction_converged": float(np.mean(dist < tol)),
            "min_distance": float(dist.min()),
            "median_distance": float(np.median(dist)),
            "max_distance": float(dist.max()),
        }

    # -- persistence --------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "context_dim": self.context_dim,
            "flow": self.flow.to_json(),
            "latent": latent_to_json(self.latent),
            "standardization": self.standardization.to_json(),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def from_json(cls, obj: dict) -> "StablePolicyModel":
        try:
            model = cls(
                flow=ConditionedFlow.from_json(obj["flow"]),
                latent=latent_from_json(obj["latent"]),
                standardization=Standardization.from_json(obj["standardization"]),
            )
        except KeyError as exc:
            raise DatasetFormatError(f"model checkpoint missing key {exc}") from exc
        if model.dim != obj.get("dim") or model.context_dim != obj.get("context_dim"):
            raise DatasetFormatError("checkpoint dims disagree with components")
        return model

    @classmethod
    def load(cls, path) -> "StablePolicyModel":
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"malformed checkpoint: {exc}") from exc
        if not isinstance(obj, dict):
            raise DatasetFormatError("checkpoint must be a JSON object")
        return cls.from_json(obj)
