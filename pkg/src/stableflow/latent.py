"""Stable latent stochastic dynamics and their Lyapunov certificates.

Two concrete processes are provided, both of the form
``dz = v(z) dt + g(z) dB`` with diagonal diffusion that vanishes exactly on
the attractor set:

* ``LinearAttractor``: v(z) = -alpha z, g(z) = sigma tanh(|z|) I. The
  attractor set is the origin.
* ``LimitCycleLatent``: polar dynamics on dims (0, 1) with radial pull to a
  circle of radius r_star and constant angular velocity; remaining dims
  contract linearly. g(z) = sigma tanh(D) I where D is the distance to the
  attractor set, so the one-step transition density stays full rank off the
  set (rank-one radial-only noise would make exact likelihoods degenerate).

Both expose the same surface: drift, diffusion, Euler-Maruyama stepping, the
matching Gaussian one-step log density, a Lyapunov candidate U that is zero
exactly on the attractor set, and the closed-form diffusion generator LU.
All the math is written against the autodiff ops, so every function accepts
plain arrays (fast path) or Tensors (differentiable path) with a trailing
state axis of width ``dim``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import (
    DatasetFormatError,
    DegenerateDensityError,
    DimensionError,
    ValidationError,
)

__all__ = [
    "LinearAttractor",
    "LimitCycleLatent",
    "GaussianTransition",
    "latent_to_json",
    "latent_from_json",
]

_TINY_RADIUS = 1e-300  # guards 0/0 at the polar singularity only


def _check_dim(z, dim: int, name: str = "z"):
    zv = ad.value_of(z)
    if zv.ndim == 0 or zv.shape[-1] != dim:
        raise DimensionError(f"{name} must have trailing dimension {dim}, got shape {zv.shape}")
    return zv


@dataclass(frozen=True)
class GaussianTransition:
    """Diagonal-covariance Gaussian one-step law. Fields may be Tensors."""

    mean: object
    var: object

    def log_density(self, x):
        """Log density at x; raises DegenerateDensityError on zero variance."""
        var_v = ad.value_of(self.var)
        if np.any(var_v <= 0.0):
            raise DegenerateDensityError(
                "transition variance has non-positive entries (vanishing diffusion)"
            )
        delta = ad.sub(x, self.mean)
        quad = ad.asum(ad.div(ad.mul(delta, delta), self.var), axis=-1)
        norm = ad.asum(ad.log(ad.mul(self.var, 2.0 * np.pi)), axis=-1)
        return ad.mul(ad.add(quad, norm), -0.5)


@dataclass(frozen=True)
class LinearAttractor:
    """Contracting latent SDE with the origin as its attractor."""

    dim: int
    alpha: float
    sigma: float
    dt: float

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError("dim must be >= 1")
        if self.alpha <= 0:
            raise ValidationError("contraction rate alpha must be > 0")
        if self.sigma < 0:
            raise ValidationError("noise scale sigma must be >= 0")
        if 2.0 * self.alpha <= self.sigma ** 2 * self.dim:
            raise ValidationError(
                f"stability margin violated: need 2*alpha > sigma^2*dim "
                f"({2 * self.alpha} <= {self.sigma ** 2 * self.dim})"
            )
        if self.dt <= 0 or self.alpha * self.dt >= 1.0:
            raise ValidationError("need dt > 0 and alpha*dt < 1")

    def drift(self, z):
        _check_dim(z, self.dim)
        return ad.mul(z, -self.alpha)

    def diffusion_scale(self, z):
        """Common per-dimension noise scale, shape (..., 1)."""
        _check_dim(z, self.dim)
        sq = ad.asum(ad.mul(z, z), axis=-1, keepdims=True)
        return ad.mul(ad.tanh(ad.sqrt(sq)), self.sigma)

    def diffusion(self, z) -> np.ndarray:
        """Diffusion matrix g(z) at a single point, shape (dim, dim)."""
        zv = _check_dim(z, self.dim)
        if zv.ndim != 1:
            raise DimensionError("diffusion expects a single point")
        s = float(ad.value_of(self.diffusion_scale(zv))[0])
        return s * np.eye(self.dim)

    def attractor_distance(self, z):
        _check_dim(z, self.dim)
        return ad.sqrt(ad.asum(ad.mul(z, z), axis=-1))

    def lyapunov(self, z):
        """U(z) = |z|^2; zero exactly at the attractor."""
        _check_dim(z, self.dim)
        return ad.asum(ad.mul(z, z), axis=-1)

    def generator(self, z):
        """Closed-form LU(z) = -2 alpha |z|^2 + sigma^2 tanh^2(|z|) dim."""
        _check_dim(z, self.dim)
        sq = ad.asum(ad.mul(z, z), axis=-1)
        t = ad.tanh(ad.sqrt(sq))
        return ad.add(ad.mul(sq, -2.0 * self.alpha),
                      ad.mul(ad.mul(t, t), self.sigma ** 2 * self.dim))

    def transition(self, z_prev) -> GaussianTransition:
        """One-step Euler-Maruyama law frozen at z_prev (mismatch with the
        continuous process is O(dt))."""
        mean = ad.add(z_prev, ad.mul(self.drift(z_prev), self.dt))
        s = self.diffusion_scale(z_prev)
        # broadcast the shared scale to full width so the normalizer sums dim terms
        var = ad.mul(ad.mul(ad.mul(s, s), self.dt), np.ones(self.dim))
        return GaussianTransition(mean=mean, var=var)

    def em_step(self, z, rng: np.random.Generator, deterministic: bool = False):
        zv = _check_dim(z, self.dim)
        out = zv + ad.value_of(self.drift(zv)) * self.dt
        if not deterministic and self.sigma > 0:
            s = ad.value_of(self.diffusion_scale(zv))
            out = out + s * np.sqrt(self.dt) * rng.standard_normal(zv.shape)
        return out

    def log_transition(self, z_prev, z_next):
        if self.sigma == 0:
            raise DegenerateDensityError("log_transition undefined for sigma = 0")
        _check_dim(z_next, self.dim, "z_next")
        return self.transition(z_prev).log_density(z_next)

    def to_json(self) -> dict:
        return {"kind": "attractor", "dim": self.dim, "alpha": self.alpha,
                "sigma": self.sigma, "dt": self.dt}


@dataclass(frozen=True)
class LimitCycleLatent:
    """Latent SDE whose attractor is a circle of radius r_star in dims (0, 1).

    Polar drift on the leading pair: dr = -beta (r - r_star) dt, dphi = omega dt;
    remaining dims contract at rate beta. Noise is sigma tanh(D) per dimension
    with D the distance to the attractor set, which preserves the radial noise
    law sigma tanh(|r - r_star|) when dim == 2.
    """

    dim: int
    r_star: float
    beta: float
    omega: float
    sigma: float
    dt: float

    def __post_init__(self):
        if self.dim < 2:
            raise ValidationError("limit cycle needs dim >= 2")
        if self.r_star <= 0:
            raise ValidationError("cycle radius r_star must be > 0")
        if self.beta <= 0:
            raise ValidationError("radial gain beta must be > 0")
        if self.sigma < 0:
            raise ValidationError("noise scale sigma must be >= 0")
        if 2.0 * self.beta <= self.sigma ** 2 * self.dim:
            raise ValidationError(
                f"stability margin violated: need 2*beta > sigma^2*dim "
                f"({2 * self.beta} <= {self.sigma ** 2 * self.dim})"
            )
        if self.dt <= 0 or self.beta * self.dt >= 1.0:
            raise ValidationError("need dt > 0 and beta*dt < 1")

    def _polar_radius(self, z):
        xy = ad.gather(z, [0, 1])
        sq = ad.asum(ad.mul(xy, xy), axis=-1, keepdims=True)
        return ad.maximum(ad.sqrt(sq), _TINY_RADIUS)

    def drift(self, z):
        _check_dim(z, self.dim)
        x = ad.gather(z, [0])
        y = ad.gather(z, [1])
        r = self._polar_radius(z)
        radial = ad.mul(ad.sub(r, self.r_star), -self.beta)
        vx = ad.sub(ad.div(ad.mul(radial, x), r), ad.mul(y, self.omega))
        vy = ad.add(ad.div(ad.mul(radial, y), r), ad.mul(x, self.omega))
        if self.dim == 2:
            return ad.concat([vx, vy], axis=-1)
        rest = ad.gather(z, list(range(2, self.dim)))
        return ad.concat([vx, vy, ad.mul(rest, -self.beta)], axis=-1)

    def _set_distance_sq(self, z):
        """Squared distance to the attractor set, shape (..., 1)."""
        r = self._polar_radius(z)
        dr = ad.sub(r, self.r_star)
        total = ad.mul(dr, dr)
        if self.dim > 2:
            rest = ad.gather(z, list(range(2, self.dim)))
            total = ad.add(total, ad.asum(ad.mul(rest, rest), axis=-1, keepdims=True))
        return total

    def attractor_distance(self, z):
        """Distance to the attractor set {r = r_star, z_rest = 0}."""
        _check_dim(z, self.dim)
        return _squeeze_last(ad.sqrt(self._set_distance_sq(z)))

    def diffusion_scale(self, z):
        _check_dim(z, self.dim)
        return ad.mul(ad.tanh(ad.sqrt(self._set_distance_sq(z))), self.sigma)

    def diffusion(self, z) -> np.ndarray:
        zv = _check_dim(z, self.dim)
        if zv.ndim != 1:
            raise DimensionError("diffusion expects a single point")
        s = float(ad.value_of(self.diffusion_scale(zv))[0])
        return s * np.eye(self.dim)

    def lyapunov(self, z):
        """U(z) = (r - r_star)^2 + |z_rest|^2; zero exactly on the cycle."""
        _check_dim(z, self.dim)
        return _squeeze_last(self._set_distance_sq(z))

    def generator(self, z):
        """LU = -2 beta U + sigma^2 tanh^2(D) (dim - r_star/r).

        Derived from the Ito generator with g = sigma tanh(D) I:
        Tr(U_zz) = 2 dim - 2 r_star / r away from the polar singularity.
        """
        _check_dim(z, self.dim)
        u = self.lyapunov(z)
        r = _squeeze_last(self._polar_radius(z))
        t = ad.tanh(ad.sqrt(u))
        trace_term = ad.sub(float(self.dim), ad.div(self.r_star, r))
        return ad.add(ad.mul(u, -2.0 * self.beta),
                      ad.mul(ad.mul(ad.mul(t, t), self.sigma ** 2), trace_term))

    def step_mean(self, z):
        """One-step mean: radial Euler pull composed with the exact rotation.

        Plain Euler on the rotation inflates the radius by r*ω²Δt²/2 each
        step, parking the discrete attractor O(Δt) off the cycle; rotating
        exactly keeps the circle invariant while the noise-carrying radial
        and transverse directions stay Euler-Maruyama.
        """
        _check_dim(z, self.dim)
        x = ad.gather(z, [0])
        y = ad.gather(z, [1])
        r = self._polar_radius(z)
        pull = ad.mul(ad.mul(ad.sub(r, self.r_star), -self.beta), self.dt)
        px = ad.add(x, ad.div(ad.mul(pull, x), r))
        py = ad.add(y, ad.div(ad.mul(pull, y), r))
        cos_w, sin_w = np.cos(self.omega * self.dt), np.sin(self.omega * self.dt)
        mx = ad.sub(ad.mul(px, cos_w), ad.mul(py, sin_w))
        my = ad.add(ad.mul(px, sin_w), ad.mul(py, cos_w))
        if self.dim == 2:
            return ad.concat([mx, my], axis=-1)
        rest = ad.gather(z, list(range(2, self.dim)))
        return ad.concat([mx, my, ad.mul(rest, 1.0 - self.beta * self.dt)], axis=-1)

    def transition(self, z_prev) -> GaussianTransition:
        s = self.diffusion_scale(z_prev)
        # broadcast the shared scale to full width so the normalizer sums dim terms
        var = ad.mul(ad.mul(ad.mul(s, s), self.dt), np.ones(self.dim))
        return GaussianTransition(mean=self.step_mean(z_prev), var=var)

    def em_step(self, z, rng: np.random.Generator, deterministic: bool = False):
        zv = _check_dim(z, self.dim)
        out = ad.value_of(self.step_mean(zv))
        if not deterministic and self.sigma > 0:
            s = ad.value_of(self.diffusion_scale(zv))
            out = out + s * np.sqrt(self.dt) * rng.standard_normal(zv.shape)
        return out

    def log_transition(self, z_prev, z_next):
        if self.sigma == 0:
            raise DegenerateDensityError("log_transition undefined for sigma = 0")
        _check_dim(z_next, self.dim, "z_next")
        return self.transition(z_prev).log_density(z_next)

    def to_json(self) -> dict:
        return {"kind": "limit_cycle", "dim": self.dim, "beta": self.beta,
                "omega": self.omega, "r_star": self.r_star,
                "sigma": self.sigma, "dt": self.dt}


def _squeeze_last(x):
    """Drop a trailing axis of width 1 (works for arrays and Tensors)."""
    if isinstance(x, np.ndarray):
        return x[..., 0]
    return ad.asum(x, axis=-1)


def latent_to_json(dyn) -> dict:
    return dyn.to_json()


def latent_from_json(obj: dict):
    if not isinstance(obj, dict) or "kind" not in obj:
        raise DatasetFormatError("latent config must be an object with a 'kind' key")
    kind = obj.get("kind")
    try:
        if kind == "attractor":
            return LinearAttractor(dim=int(obj["dim"]), alpha=float(obj["alpha"]),
                                   sigma=float(obj["sigma"]), dt=float(obj["dt"]))
        if kind == "limit_cycle":
            return LimitCycleLatent(dim=int(obj["dim"]), r_star=float(obj["r_star"]),
                                    beta=float(obj["beta"]), omega=float(obj["omega"]),
                                    sigma=float(obj["sigma"]), dt=float(obj["dt"]))
    except KeyError as exc:
        raise DatasetFormatError(f"latent config missing key {exc}") from exc
    raise DatasetFormatError(f"unknown latent kind {kind!r}")
