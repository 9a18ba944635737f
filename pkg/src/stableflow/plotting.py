"""Deterministic SVG renderings of models and rollouts.

Three figure kinds, all emitted as plain SVG text with fixed-precision
coordinates so identical inputs produce byte-identical files:

* ``field``: expected one-step displacement arrows on a grid of states for a
  fixed context, demonstrations overlaid in blue, generated rollouts in green;
* ``grid``: the image of a rectangular latent grid under the conditioned map,
  i.e. the learned deformation of the state space, with obstacle disks when a
  scene context is supplied;
* ``timeseries``: state coordinates against the step index with perturbation
  steps shaded.

Only 2-D models draw the spatial figures; the caller enforces that.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, ValidationError

__all__ = ["render_field_svg", "render_grid_svg", "render_timeseries_svg"]

_SIZE = 640.0
_MARGIN = 40.0

_BLUE = "#3465a4"
_GREEN = "#4e9a06"
_GRAY = "#888888"
_PINK = "#cc5599"
_YELLOW = "#f5d76e"


def _fmt(x: float) -> str:
    return f"{x:.3f}"


class _Canvas:
    """Maps data coordinates to a fixed pixel box and collects elements."""

    def __init__(self, xlim, ylim):
        self.xlim = xlim
        self.ylim = ylim
        span_x = max(xlim[1] - xlim[0], 1e-9)
        span_y = max(ylim[1] - ylim[0], 1e-9)
        self.scale = (_SIZE - 2 * _MARGIN) / max(span_x, span_y)
        self.elements: list[str] = []

    def pt(self, x, y):
        px = _MARGIN + (x - self.xlim[0]) * self.scale
        py = _SIZE - _MARGIN - (y - self.ylim[0]) * self.scale
        return px, py

    def line(self, a, b, color, width=1.0, klass=""):
        (x1, y1), (x2, y2) = self.pt(*a), self.pt(*b)
        cls = f' class="{klass}"' if klass else ""
        self.elements.append(
            f'<line{cls} x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
            f'stroke="{color}" stroke-width="{_fmt(width)}"/>')

    def polyline(self, points, color, width=1.5, klass=""):
        coords = " ".join(f"{_fmt(px)},{_fmt(py)}" for px, py in (self.pt(x, y) for x, y in points))
        cls = f' class="{klass}"' if klass else ""
        self.elements.append(
            f'<polyline{cls} points="{coords}" fill="none" stroke="{color}" '
            f'stroke-width="{_fmt(width)}"/>')

    def circle(self, center, r_data, color, klass=""):
        cx, cy = self.pt(*center)
        cls = f' class="{klass}"' if klass else ""
        self.elements.append(
            f'<circle{cls} cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="{_fmt(r_data * self.scale)}" '
            f'fill="{color}" fill-opacity="0.45" stroke="{color}"/>')

    def rect_steps(self, k0, k1, n_steps, color, klass=""):
        # vertical band between step indices on a [0, n_steps] x-axis
        x0 = _MARGIN + (k0 / max(n_steps, 1)) * (_SIZE - 2 * _MARGIN)
        x1 = _MARGIN + (k1 / max(n_steps, 1)) * (_SIZE - 2 * _MARGIN)
        cls = f' class="{klass}"' if klass else ""
        self.elements.append(
            f'<rect{cls} x="{_fmt(x0)}" y="{_fmt(_MARGIN)}" width="{_fmt(x1 - x0)}" '
            f'height="{_fmt(_SIZE - 2 * _MARGIN)}" fill="{color}" fill-opacity="0.35"/>')

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{int(_SIZE)}" '
                f'height="{int(_SIZE)}" viewBox="0 0 {int(_SIZE)} {int(_SIZE)}">')
        frame = (f'<rect x="{_fmt(_MARGIN)}" y="{_fmt(_MARGIN)}" '
                 f'width="{_fmt(_SIZE - 2 * _MARGIN)}" height="{_fmt(_SIZE - 2 * _MARGIN)}" '
                 f'fill="none" stroke="#000000"/>')
        return "\n".join([head, frame, *self.elements, "</svg>"]) + "\n"


def _require_2d(model):
    if model.dim != 2:
        raise DimensionError("spatial plots need a 2-D state space")


def _bounds(arrays, pad=0.15):
    pts = np.concatenate([np.asarray(a).reshape(-1, 2) for a in arrays if len(a)])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-6)
    lo, hi = lo - pad * span, hi + pad * span
    return (lo[0], hi[0]), (lo[1], hi[1])


def render_field_svg(model, context=None, demonstrations=(), rollouts=(),
                     n_grid: int = 15) -> str:
    """One-step displacement field with demonstration/generated overlays."""
    _require_2d(model)
    if context is None:
        context = model.standardization.c_shift.copy()
    demo_arrays = [np.asarray(t, dtype=np.float64) for t in demonstrations]
    roll_arrays = [np.asarray(r, dtype=np.float64) for r in rollouts]
    center = model.standardization.y_shift
    spread = 3.0 * model.standardization.y_scale
    seed_pts = [np.stack([center - spread, center + spread])]
    xlim, ylim = _bounds(seed_pts + demo_arrays + roll_arrays)

    canvas = _Canvas(xlim, ylim)
    xs = np.linspace(xlim[0], xlim[1], n_grid)
    ys = np.linspace(ylim[0], ylim[1], n_grid)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    cb = (np.broadcast_to(context, (len(pts), model.context_dim))
          if model.context_dim else None)
    nxt = model.step(pts, cb, np.random.default_rng(0), deterministic=True)
    disp = nxt - pts
    # cap arrow length to grid spacing for readability
    cell = min(xs[1] - xs[0], ys[1] - ys[0])
    norms = np.linalg.norm(disp, axis=1, keepdims=True)
    disp = np.where(norms > cell, disp * (cell / np.maximum(norms, 1e-12)), disp)
    for p, d in zip(pts, disp):
        tip = p + d
        canvas.line(p, tip, _GRAY, width=1.0, klass="arrow")
        # small head: two short strokes back from the tip
        if np.linalg.norm(d) > 1e-12:
            u = d / np.linalg.norm(d)
            left = np.array([-u[1], u[0]])
            for side in (left, -left):
                canvas.line(tip, tip - 0.25 * np.linalg.norm(d) * (u - 0.7 * side),
                            _GRAY, width=0.8, klass="arrowhead")
    for t in demo_arrays:
        canvas.polyline(t, _BLUE, klass="demo")
    for t in roll_arrays:
        canvas.polyline(t, _GREEN, klass="generated")
    return canvas.render()


def render_grid_svg(model, context=None, n_lines: int = 13, span: float = 2.5,
                    samples: int = 120, obstacles=None, obstacle_radius=None) -> str:
    """Image of a rectangular latent grid under the conditioned map."""
    _require_2d(model)
    if model.context_dim and context is None:
        context = model.standardization.c_shift.copy()
    ticks = np.linspace(-span, span, n_lines)
    dense = np.linspace(-span, span, samples)
    lines = []
    for t in ticks:
        lines.append(np.stack([np.full(samples, t), dense], axis=-1))   # vertical
        lines.append(np.stack([dense, np.full(samples, t)], axis=-1))   # horizontal
    mapped = []
    for line in lines:
        cb = (np.broadcast_to(context, (samples, model.context_dim))
              if model.context_dim else None)
        mapped.append(model.to_observation(line, cb))
    extras = []
    if obstacles is not None:
        extras.append(np.asarray(obstacles, dtype=np.float64))
    xlim, ylim = _bounds(mapped + extras)
    canvas = _Canvas(xlim, ylim)
    for pts in mapped:
        canvas.polyline(pts, _GRAY, width=1.0, klass="gridline")
    if obstacles is not None:
        radius = 0.1 if obstacle_radius is None else float(obstacle_radius)
        for ob in np.asarray(obstacles, dtype=np.float64):
            canvas.circle(ob, radius, _PINK, klass="obstacle")
    return canvas.render()


def render_timeseries_svg(states, perturbations=(), commanded=None) -> str:
    """State coordinates vs step index; perturbation steps shaded."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or len(states) < 2:
        raise ValidationError("timeseries needs a (steps, dim) state array")
    n_steps = len(states) - 1
    lo, hi = states.min(), states.max()
    span = max(hi - lo, 1e-9)
    lo, hi = lo - 0.1 * span, hi + 0.1 * span
    canvas = _Canvas((0.0, float(n_steps)), (lo, hi))
    for k, _ in perturbations:
        canvas.rect_steps(max(k - 0.5, 0), min(k + 0.5, n_steps), n_steps,
                          _YELLOW, klass="perturbation")
    palette = [_PINK, _BLUE, _GREEN, "#aa7700", "#7755cc", "#117777", "#771111"]
    for j in range(states.shape[1]):
        pts = np.stack([np.arange(len(states)), states[:, j]], axis=-1)
        canvas.polyline(pts, palette[j % len(palette)], klass=f"state-dim-{j}")
    if commanded is not None:
        commanded = np.asarray(commanded, dtype=np.float64)
        for j in range(commanded.shape[1]):
            pts = np.stack([np.arange(len(commanded)), commanded[:, j]], axis=-1)
            canvas.polyline(pts, "#550077", width=0.8, klass=f"commanded-dim-{j}")
    return canvas.render()
