"""Contact frames, grasp matrices and the pyramidal friction-cone linearisation.

Forces at a contact are parameterised by nonnegative edge weights ``lam``
over pyramid edges ``v_k = n + mu (cos th_k d + sin th_k e)``. Each edge has
unit normal component, so the normal force equals ``sum(lam)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_EDGES = 8
_FALLBACK_DOT = 0.99


@dataclass(frozen=True)
class ContactFrame:
    p: np.ndarray
    n: np.ndarray  # inward surface normal
    d: np.ndarray
    e: np.ndarray

    @property
    def basis(self) -> np.ndarray:
        """Columns ``[n d e]``."""
        return np.stack([self.n, self.d, self.e], axis=1)


@dataclass(frozen=True)
class GraspMatrix:
    G: np.ndarray  # (6, 3)


@dataclass(frozen=True)
class PyramidCone:
    mu: float
    edges: np.ndarray  # (k, 3)

    @property
    def V(self) -> np.ndarray:
        """Edge matrix with edges as columns, (3, k)."""
        return self.edges.T


def tangent_basis(n: np.ndarray):
    """Deterministic tangents for (..., 3) unit normals. Returns (d, e)."""
    n = np.asarray(n, dtype=float)
    a = np.zeros_like(n)
    use_y = np.abs(n[..., 0]) > _FALLBACK_DOT
    a[..., 0] = np.where(use_y, 0.0, 1.0)
    a[..., 1] = np.where(use_y, 1.0, 0.0)
    u = np.cross(n, a)
    d = u / np.linalg.norm(u, axis=-1, keepdims=True)
    e = np.cross(n, d)
    return d, e


def build_frame(p, n) -> ContactFrame:
    p = np.asarray(p, dtype=float).reshape(3)
    n = np.asarray(n, dtype=float).reshape(3)
    norm = np.linalg.norm(n)
    if not np.isfinite(norm) or norm < 1e-12:
        raise ValueError("contact normal must be nonzero and finite")
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"contact normal must be unit length, got |n| = {norm:.6g}")
    n = n / norm
    d, e = tangent_basis(n)
    return ContactFrame(p.copy(), n, d, e)


def grasp_matrix(frame: ContactFrame) -> GraspMatrix:
    B = frame.basis
    return GraspMatrix(np.vstack([B, np.cross(frame.p, B.T).T]))


def edge_angles(k: int = N_EDGES) -> np.ndarray:
    return 2 * np.pi * np.arange(k) / k


def pyramid_edges(frame: ContactFrame, mu: float, k: int = N_EDGES) -> PyramidCone:
    if not mu > 0:
        raise ValueError("friction coefficient must be positive")
    th = edge_angles(k)
    edges = (frame.n[None, :] + mu * (np.cos(th)[:, None] * frame.d[None, :]
                                      + np.sin(th)[:, None] * frame.e[None, :]))
    return PyramidCone(float(mu), edges)


def force_from_weights(cone: PyramidCone, lam):
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (cone.edges.shape[0],):
        raise ValueError(f"expected {cone.edges.shape[0]} edge weights, got shape {lam.shape}")
    if np.any(lam < 0):
        raise ValueError("edge weights must be nonnegative")
    return lam @ cone.edges, float(lam.sum())


def contact_wrench_matrix(frames, mu: float, k: int = N_EDGES) -> np.ndarray:
    """Stacked edge wrenches ``W = [G_1 V_1 ... G_m V_m]`` of shape (6, k m)."""
    cols = []
    for f in frames:
        V = pyramid_edges(f, mu, k).V
        cols.append(grasp_matrix(f).G @ np.vstack([f.n, f.d, f.e]) @ V)
    return np.hstack(cols)


def wrench_edges_batch(P: np.ndarray, N: np.ndarray, mu: float, k: int = N_EDGES):
    """Batched edge wrenches for contacts (B, m, 3).

    Returns ``W`` of shape (B, 6, k m) and the tangents ``(d, e)``.
    """
    d, e = tangent_basis(N)
    th = edge_angles(k)
    V = (N[:, :, None, :] + mu * (np.cos(th)[None, None, :, None] * d[:, :, None, :]
                                  + np.sin(th)[None, None, :, None] * e[:, :, None, :]))
    tau = np.cross(P[:, :, None, :], V)
    B, m = P.shape[:2]
    W = np.concatenate([V, tau], axis=-1).reshape(B, m * k, 6).transpose(0, 2, 1)
    return W, d, e
