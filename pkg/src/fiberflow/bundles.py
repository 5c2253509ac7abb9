"""Hermitian bundle specifications and their per-step parallel transport.

Three connection kinds cover the catalog:

  trivial(d)    flat connection on a trivialized rank-d bundle; transport
                is the identity on every model.
  tangent       complexified tangent bundle of the 2-sphere with the
                Levi-Civita connection; transport along a geodesic step is
                the closed-form great-circle rotation (rank 2).
  magnetic(beta) trivial line bundle with connection d + i*beta; transport
                along a step is the phase exp(-i * int beta) with the
                Stratonovich midpoint rule (rank 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import Circle, Euclidean, FlatTorus, ManifoldModel, OpenSubdomain, Sphere2
from .potentials import OneForm

__all__ = ["BundleSpec", "trivial_bundle", "tangent_bundle", "magnetic_bundle",
           "stratonovich_increment"]


def stratonovich_increment(model, beta: OneForm, x, xi):
    """int beta over one geodesic step, midpoint rule: beta evaluated at the
    chart midpoint, paired with the (unwrapped) chart increment.  Supported
    on the flat models and the circle, where chart steps equal frame steps."""
    base = model.base if isinstance(model, OpenSubdomain) else model
    xi = np.asarray(xi, dtype=float)
    if isinstance(base, Circle):
        d_chart = base.chart_increment(x, xi)
    elif isinstance(base, (Euclidean, FlatTorus)):
        d_chart = xi
    else:
        raise ValueError("Stratonovich line integrals need a flat chart or the circle")
    mid = np.asarray(x, dtype=float) + 0.5 * d_chart
    return beta.pair(mid, d_chart)


@dataclass
class BundleSpec:
    rank: int
    kind: str = "trivial"  # trivial | tangent | magnetic
    beta: Optional[OneForm] = None

    def __post_init__(self):
        if self.kind not in ("trivial", "tangent", "magnetic"):
            raise ValueError(f"unknown bundle kind {self.kind!r}")
        if self.kind == "magnetic" and self.rank != 1:
            raise ValueError("magnetic bundles are rank 1")
        if self.kind == "tangent" and self.rank != 2:
            raise ValueError("the tangent bundle of sphere2 has rank 2")
        if self.rank < 1 or self.rank > 16:
            raise ValueError("bundle rank must be in 1..16")

    @property
    def trivial_transport(self) -> bool:
        return self.kind == "trivial"

    def validate_model(self, model: ManifoldModel):
        base = model.base if isinstance(model, OpenSubdomain) else model
        if self.kind == "tangent" and not isinstance(base, Sphere2):
            raise ValueError("tangent-bundle transport is implemented for sphere2 only")
        if self.kind == "magnetic" and not isinstance(base, (Euclidean, FlatTorus, Circle)):
            raise ValueError("magnetic 1-forms are supported on flat models and the circle")

    def step_transport(self, model: ManifoldModel, x, xi):
        """Unitary matrices (..., d, d) carrying fiber coordinates at x to
        fiber coordinates at exp_x(xi) along the geodesic step."""
        base = model.base if isinstance(model, OpenSubdomain) else model
        if self.kind == "trivial":
            eye = np.eye(self.rank, dtype=complex)
            return np.broadcast_to(eye, np.asarray(xi).shape[:-1] + (self.rank, self.rank))
        if self.kind == "tangent":
            _, T = base.transport_matrix(x, xi)
            return T.astype(complex)
        # magnetic: phase e^{-i int beta} with midpoint evaluation
        phase = np.exp(-1j * stratonovich_increment(model, self.beta, x, xi))
        return phase[..., None, None]


def trivial_bundle(rank=1):
    return BundleSpec(rank=rank, kind="trivial")


def tangent_bundle():
    return BundleSpec(rank=2, kind="tangent")


def magnetic_bundle(beta: OneForm):
    return BundleSpec(rank=1, kind="magnetic", beta=beta)
