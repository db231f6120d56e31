"""Parametric surplus families with analytic gradients.

The taste-quality interaction is one of four closed-form families so
that gradients, cross Hessians, and the injectivity (twist) diagnostic
are exact: bilinear z'eps, feature-map bilinear phi(z)'psi(x,eps),
negative quadratic -1/2 (z-eps)'Q(z-eps), and sparse polynomials in
(x, eps, z).  Scalar families for the base utility and producer cost
reuse the same machinery over (x, z) and (y, z).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "SurplusFamily",
    "ScalarFamily",
    "StructuralSpec",
    "TwistReport",
    "TwistViolationError",
    "check_twist",
]


class TwistViolationError(ValueError):
    """The surplus family fails the taste-injectivity diagnostic."""


# ---------------------------------------------------------------------------
# Sparse monomial helper
# ---------------------------------------------------------------------------


class _Monomials:
    """Sparse polynomial over one or more variable blocks.

    Terms are rows of integer exponent arrays, one per block, with a
    shared coefficient vector.  Evaluation broadcasts over rows of each
    block, and per-block partial derivatives return new _Monomials.
    """

    def __init__(self, coeffs, blocks: dict):
        self.coeffs = np.asarray(coeffs, dtype=float).ravel()
        self.blocks = {
            name: np.asarray(e, dtype=int).reshape(self.coeffs.shape[0], -1)
            for name, e in blocks.items()
        }

    def block_dim(self, name: str) -> int:
        return self.blocks[name].shape[1]

    def factors(self, name: str, pts: np.ndarray) -> np.ndarray:
        """Per-term monomial values of one block: (n_terms, n_points)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        exps = self.blocks[name]
        if exps.shape[1] == 0:
            # zero-width block: the polynomial does not consume this input
            return np.ones((exps.shape[0], max(pts.shape[0], 1)))
        if pts.shape[1] != exps.shape[1]:
            raise ValueError(
                f"block {name!r} expects dim {exps.shape[1]}, got {pts.shape[1]}"
            )
        return np.prod(pts[None, :, :] ** exps[:, None, :], axis=2)

    def eval_rows(self, **pts) -> np.ndarray:
        """Row-aligned evaluation: all blocks share the same row count."""
        prod = self.coeffs[:, None]
        for name in self.blocks:
            prod = prod * self.factors(name, pts[name])
        return prod.sum(axis=0)

    def diff(self, name: str, axis: int) -> "_Monomials":
        exps = self.blocks[name]
        keep = exps[:, axis] >= 1
        coeffs = self.coeffs[keep] * exps[keep, axis]
        blocks = {n: e[keep].copy() for n, e in self.blocks.items()}
        blocks[name][:, axis] -= 1
        if coeffs.shape[0] == 0:
            coeffs = np.zeros(1)
            blocks = {n: np.zeros((1, e.shape[1]), dtype=int) for n, e in self.blocks.items()}
        return _Monomials(coeffs, blocks)


def _terms_to_monomials(terms: Sequence[dict], block_dims: dict) -> _Monomials:
    coeffs = []
    blocks = {name: [] for name in block_dims}
    for t in terms:
        coeffs.append(float(t["coeff"]))
        for name, d in block_dims.items():
            e = np.asarray(t.get(name, [0] * d), dtype=int).ravel()
            if e.shape[0] != d or np.any(e < 0):
                raise ValueError(f"term block {name!r} needs {d} nonnegative exponents")
            blocks[name].append(e)
    if not coeffs:
        raise ValueError("polynomial needs at least one term")
    return _Monomials(coeffs, {n: np.asarray(b) for n, b in blocks.items()})


def _monomials_to_terms(mon: _Monomials) -> list[dict]:
    out = []
    for t in range(mon.coeffs.shape[0]):
        term = {"coeff": float(mon.coeffs[t])}
        for name, exps in mon.blocks.items():
            term[name] = exps[t].tolist()
        out.append(term)
    return out


# ---------------------------------------------------------------------------
# Taste surplus families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SurplusFamily:
    """Known interaction between tastes and qualities.

    kind is one of "bilinear", "bilinear-feature", "neg-quadratic",
    "polynomial"; params hold the coefficient tensors of that kind.
    """

    kind: str
    d_x: int
    d_z: int
    params: dict = field(default_factory=dict)

    # -- constructors ---------------------------------------------------
    @staticmethod
    def bilinear(dim: int, d_x: int = 0) -> "SurplusFamily":
        return SurplusFamily("bilinear", d_x, int(dim))

    @staticmethod
    def neg_quadratic(q, d_x: int = 0) -> "SurplusFamily":
        q = np.asarray(q, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValueError("Q must be square")
        if np.max(np.abs(q - q.T)) > 1e-12:
            raise ValueError("Q must be symmetric")
        if np.linalg.eigvalsh(q).min() <= 0:
            raise ValueError("Q must be positive definite")
        q = q.copy()
        q.setflags(write=False)
        return SurplusFamily("neg-quadratic", d_x, q.shape[0], {"q": q})

    @staticmethod
    def polynomial(terms: Sequence[dict], d_x: int, d_z: int) -> "SurplusFamily":
        mon = _terms_to_monomials(terms, {"x": d_x, "eps": d_z, "z": d_z})
        return SurplusFamily("polynomial", d_x, d_z, {"mon": mon})

    @staticmethod
    def bilinear_feature(
        phi_terms: Sequence[Sequence[dict]],
        psi_terms: Sequence[Sequence[dict]],
        d_x: int,
        d_z: int,
    ) -> "SurplusFamily":
        """zeta = sum_k phi_k(z) psi_k(x, eps) with polynomial features."""
        if len(phi_terms) != len(psi_terms):
            raise ValueError("phi and psi must have the same feature count")
        phi = [_terms_to_monomials(t, {"z": d_z}) for t in phi_terms]
        psi = [_terms_to_monomials(t, {"x": d_x, "eps": d_z}) for t in psi_terms]
        return SurplusFamily("bilinear-feature", d_x, d_z, {"phi": phi, "psi": psi})

    # -- shape checks ---------------------------------------------------
    def _check(self, x, eps, z):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        eps = np.atleast_2d(np.asarray(eps, dtype=float))
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if eps.shape[1] != self.d_z or z.shape[1] != self.d_z:
            raise ValueError(
                f"eps/z must have dimension {self.d_z}, got {eps.shape[1]}/{z.shape[1]}"
            )
        if self.d_x and x.shape[1] != self.d_x:
            raise ValueError(f"x must have dimension {self.d_x}, got {x.shape[1]}")
        return x, eps, z

    # -- row-aligned evaluation ------------------------------------------
    def eval_rows(self, x, eps, z) -> np.ndarray:
        x, eps, z = self._check(x, eps, z)
        n = max(x.shape[0], eps.shape[0], z.shape[0])
        x, eps, z = (np.broadcast_to(a, (n, a.shape[1])) for a in (x, eps, z))
        if self.kind == "bilinear":
            return np.einsum("ij,ij->i", eps, z)
        if self.kind == "neg-quadratic":
            diff = z - eps
            return -0.5 * np.einsum("ij,jk,ik->i", diff, self.params["q"], diff)
        if self.kind == "polynomial":
            return self.params["mon"].eval_rows(x=x, eps=eps, z=z)
        if self.kind == "bilinear-feature":
            total = np.zeros(n)
            for phi_k, psi_k in zip(self.params["phi"], self.params["psi"]):
                total += phi_k.eval_rows(z=z) * psi_k.eval_rows(x=x, eps=eps)
            return total
        raise ValueError(f"unknown family kind {self.kind!r}")

    def eval(self, x, eps, z) -> float:
        return float(self.eval_rows(x, eps, z)[0])

    # -- pairwise evaluation (surplus matrices) ---------------------------
    def pairwise(self, x, eps_points: np.ndarray, z_points: np.ndarray) -> np.ndarray:
        """Matrix of zeta(x, eps_i, z_j) for a fixed observable type."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        eps = np.atleast_2d(np.asarray(eps_points, dtype=float))
        z = np.atleast_2d(np.asarray(z_points, dtype=float))
        self._check(x, eps[:1], z[:1])
        if self.kind == "bilinear":
            return eps @ z.T
        if self.kind == "neg-quadratic":
            q = self.params["q"]
            cross = eps @ q @ z.T
            e_sq = 0.5 * np.einsum("ij,jk,ik->i", eps, q, eps)
            z_sq = 0.5 * np.einsum("ij,jk,ik->i", z, q, z)
            return cross - e_sq[:, None] - z_sq[None, :]
        if self.kind == "polynomial":
            mon = self.params["mon"]
            fx = mon.factors("x", x)[:, 0]
            fe = mon.factors("eps", eps)
            fz = mon.factors("z", z)
            return np.einsum("t,ti,tj->ij", mon.coeffs * fx, fe, fz)
        if self.kind == "bilinear-feature":
            n, m = eps.shape[0], z.shape[0]
            psi_vals = np.column_stack(
                [psi_k.eval_rows(x=np.broadcast_to(x, (n, x.shape[1])), eps=eps)
                 for psi_k in self.params["psi"]]
            )
            phi_vals = np.column_stack(
                [phi_k.eval_rows(z=z) for phi_k in self.params["phi"]]
            )
            return psi_vals @ phi_vals.T
        raise ValueError(self.kind)

    def pairwise_consumer_grid(self, x_rows, eps_rows, z_points) -> np.ndarray:
        """Matrix of zeta(x_i, eps_i, z_g) over consumers i and grid nodes g."""
        x = np.atleast_2d(np.asarray(x_rows, dtype=float))
        eps = np.atleast_2d(np.asarray(eps_rows, dtype=float))
        z = np.atleast_2d(np.asarray(z_points, dtype=float))
        self._check(x[:1], eps[:1], z[:1])
        if self.kind == "bilinear":
            return eps @ z.T
        if self.kind == "neg-quadratic":
            q = self.params["q"]
            cross = eps @ q @ z.T
            e_sq = 0.5 * np.einsum("ij,jk,ik->i", eps, q, eps)
            z_sq = 0.5 * np.einsum("ij,jk,ik->i", z, q, z)
            return cross - e_sq[:, None] - z_sq[None, :]
        if self.kind == "polynomial":
            mon = self.params["mon"]
            fxe = mon.factors("x", x) * mon.factors("eps", eps)
            fz = mon.factors("z", z)
            return np.einsum("t,ti,tg->ig", mon.coeffs, fxe, fz)
        if self.kind == "bilinear-feature":
            psi_vals = np.column_stack(
                [psi_k.eval_rows(x=x, eps=eps) for psi_k in self.params["psi"]]
            )
            phi_vals = np.column_stack(
                [phi_k.eval_rows(z=z) for phi_k in self.params["phi"]]
            )
            return psi_vals @ phi_vals.T
        raise ValueError(self.kind)

    # -- gradients ---------------------------------------------------------
    def grad_z_rows(self, x, eps, z) -> np.ndarray:
        x, eps, z = self._check(x, eps, z)
        n = max(x.shape[0], eps.shape[0], z.shape[0])
        x, eps, z = (np.broadcast_to(a, (n, a.shape[1])) for a in (x, eps, z))
        if self.kind == "bilinear":
            return eps.copy()
        if self.kind == "neg-quadratic":
            return (eps - z) @ self.params["q"].T
        if self.kind == "polynomial":
            mon = self.params["mon"]
            return np.column_stack(
                [mon.diff("z", k).eval_rows(x=x, eps=eps, z=z) for k in range(self.d_z)]
            )
        if self.kind == "bilinear-feature":
            out = np.zeros((n, self.d_z))
            for phi_k, psi_k in zip(self.params["phi"], self.params["psi"]):
                psi_vals = psi_k.eval_rows(x=x, eps=eps)
                grad_phi = np.column_stack(
                    [phi_k.diff("z", a).eval_rows(z=z) for a in range(self.d_z)]
                )
                out += psi_vals[:, None] * grad_phi
            return out
        raise ValueError(self.kind)

    def grad_eps_rows(self, x, eps, z) -> np.ndarray:
        x, eps, z = self._check(x, eps, z)
        n = max(x.shape[0], eps.shape[0], z.shape[0])
        x, eps, z = (np.broadcast_to(a, (n, a.shape[1])) for a in (x, eps, z))
        if self.kind == "bilinear":
            return z.copy()
        if self.kind == "neg-quadratic":
            return (z - eps) @ self.params["q"].T
        if self.kind == "polynomial":
            mon = self.params["mon"]
            return np.column_stack(
                [mon.diff("eps", k).eval_rows(x=x, eps=eps, z=z) for k in range(self.d_z)]
            )
        if self.kind == "bilinear-feature":
            out = np.zeros((n, self.d_z))
            for phi_k, psi_k in zip(self.params["phi"], self.params["psi"]):
                phi_vals = phi_k.eval_rows(z=z)
                grad_psi = np.column_stack(
                    [psi_k.diff("eps", a).eval_rows(x=x, eps=eps) for a in range(self.d_z)]
                )
                out += phi_vals[:, None] * grad_psi
            return out
        raise ValueError(self.kind)

    def grad_z(self, x, eps, z) -> np.ndarray:
        return self.grad_z_rows(x, eps, z)[0]

    def grad_eps(self, x, eps, z) -> np.ndarray:
        return self.grad_eps_rows(x, eps, z)[0]

    def cross_hessian(self, x, eps, z) -> np.ndarray:
        """Mixed second derivatives d^2 zeta / d eps_a d z_b, a d_z x d_z matrix."""
        x, eps, z = self._check(x, eps, z)
        d = self.d_z
        if self.kind == "bilinear":
            return np.eye(d)
        if self.kind == "neg-quadratic":
            return self.params["q"].copy()
        if self.kind == "polynomial":
            mon = self.params["mon"]
            out = np.empty((d, d))
            for a in range(d):
                d_eps = mon.diff("eps", a)
                for b in range(d):
                    out[a, b] = d_eps.diff("z", b).eval_rows(x=x, eps=eps, z=z)[0]
            return out
        if self.kind == "bilinear-feature":
            out = np.zeros((d, d))
            for phi_k, psi_k in zip(self.params["phi"], self.params["psi"]):
                grad_phi = np.array(
                    [phi_k.diff("z", b).eval_rows(z=z)[0] for b in range(d)]
                )
                grad_psi = np.array(
                    [psi_k.diff("eps", a).eval_rows(x=x, eps=eps)[0] for a in range(d)]
                )
                out += np.outer(grad_psi, grad_phi)
            return out
        raise ValueError(self.kind)

    # -- config round trip -------------------------------------------------
    def to_config(self) -> dict:
        if self.kind == "bilinear":
            return {"kind": "bilinear", "dim": self.d_z, "d_x": self.d_x}
        if self.kind == "neg-quadratic":
            return {"kind": "neg-quadratic", "q": self.params["q"].tolist(), "d_x": self.d_x}
        if self.kind == "polynomial":
            return {
                "kind": "polynomial",
                "d_x": self.d_x,
                "d_z": self.d_z,
                "terms": _monomials_to_terms(self.params["mon"]),
            }
        if self.kind == "bilinear-feature":
            return {
                "kind": "bilinear-feature",
                "d_x": self.d_x,
                "d_z": self.d_z,
                "phi": [_monomials_to_terms(m) for m in self.params["phi"]],
                "psi": [_monomials_to_terms(m) for m in self.params["psi"]],
            }
        raise ValueError(self.kind)

    @staticmethod
    def from_config(cfg: dict) -> "SurplusFamily":
        kind = cfg.get("kind")
        if kind == "bilinear":
            return SurplusFamily.bilinear(cfg["dim"], cfg.get("d_x", 0))
        if kind == "neg-quadratic":
            return SurplusFamily.neg_quadratic(cfg["q"], cfg.get("d_x", 0))
        if kind == "polynomial":
            return SurplusFamily.polynomial(cfg["terms"], cfg["d_x"], cfg["d_z"])
        if kind == "bilinear-feature":
            return SurplusFamily.bilinear_feature(
                cfg["phi"], cfg["psi"], cfg["d_x"], cfg["d_z"]
            )
        raise ValueError(f"unknown surplus kind {kind!r}")


# ---------------------------------------------------------------------------
# Scalar families for base utility and producer cost
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalarFamily:
    """Scalar function of (a, z) where a is the observable (x) or the
    producer type (y): sparse polynomial, or negative quadratic in z
    with an affine a-dependent center."""

    kind: str
    d_a: int
    d_z: int
    params: dict = field(default_factory=dict)

    @staticmethod
    def zero(d_a: int, d_z: int) -> "ScalarFamily":
        return ScalarFamily.polynomial([{"coeff": 0.0}], d_a, d_z)

    @staticmethod
    def polynomial(terms: Sequence[dict], d_a: int, d_z: int) -> "ScalarFamily":
        mon = _terms_to_monomials(terms, {"a": d_a, "z": d_z})
        return ScalarFamily("polynomial", d_a, d_z, {"mon": mon})

    @staticmethod
    def neg_quadratic(q, center_matrix=None, center_offset=None, d_a: int = 0) -> "ScalarFamily":
        """-1/2 (z - c(a))' Q (z - c(a)) with c(a) = M a + c0."""
        q = np.asarray(q, dtype=float)
        d_z = q.shape[0]
        if q.ndim != 2 or q.shape[1] != d_z or np.max(np.abs(q - q.T)) > 1e-12:
            raise ValueError("Q must be square symmetric")
        if np.linalg.eigvalsh(q).min() <= 0:
            raise ValueError("Q must be positive definite")
        m = (
            np.zeros((d_z, d_a))
            if center_matrix is None
            else np.asarray(center_matrix, dtype=float).reshape(d_z, d_a)
        )
        c0 = (
            np.zeros(d_z)
            if center_offset is None
            else np.asarray(center_offset, dtype=float).ravel()
        )
        if c0.shape[0] != d_z:
            raise ValueError("center offset must have quality dimension")
        return ScalarFamily(
            "neg-quadratic", d_a, d_z, {"q": q.copy(), "m": m, "c0": c0}
        )

    def _rows(self, a, z):
        a = np.atleast_2d(np.asarray(a, dtype=float))
        z = np.atleast_2d(np.asarray(z, dtype=float))
        n = max(a.shape[0], z.shape[0])
        a = np.broadcast_to(a, (n, a.shape[1]))
        z = np.broadcast_to(z, (n, z.shape[1]))
        if self.d_a and a.shape[1] != self.d_a:
            raise ValueError(f"first block must have dimension {self.d_a}")
        if z.shape[1] != self.d_z:
            raise ValueError(f"z must have dimension {self.d_z}")
        return a, z

    def eval_rows(self, a, z) -> np.ndarray:
        a, z = self._rows(a, z)
        if self.kind == "polynomial":
            return self.params["mon"].eval_rows(a=a, z=z)
        if self.kind == "neg-quadratic":
            center = a @ self.params["m"].T + self.params["c0"]
            diff = z - center
            return -0.5 * np.einsum("ij,jk,ik->i", diff, self.params["q"], diff)
        raise ValueError(self.kind)

    def eval(self, a, z) -> float:
        return float(self.eval_rows(a, z)[0])

    def pairwise_grid(self, a_rows, z_points) -> np.ndarray:
        """Matrix of f(a_i, z_g) over type rows i and grid nodes g."""
        a = np.atleast_2d(np.asarray(a_rows, dtype=float))
        z = np.atleast_2d(np.asarray(z_points, dtype=float))
        if self.kind == "polynomial":
            mon = self.params["mon"]
            fa = mon.factors("a", a)
            fz = mon.factors("z", z)
            return np.einsum("t,ti,tg->ig", mon.coeffs, fa, fz)
        if self.kind == "neg-quadratic":
            q = self.params["q"]
            centers = a @ self.params["m"].T + self.params["c0"]
            cross = centers @ q @ z.T
            c_sq = 0.5 * np.einsum("ij,jk,ik->i", centers, q, centers)
            z_sq = 0.5 * np.einsum("ij,jk,ik->i", z, q, z)
            return cross - c_sq[:, None] - z_sq[None, :]
        raise ValueError(self.kind)

    def grad_z_rows(self, a, z) -> np.ndarray:
        a, z = self._rows(a, z)
        if self.kind == "polynomial":
            mon = self.params["mon"]
            return np.column_stack(
                [mon.diff("z", k).eval_rows(a=a, z=z) for k in range(self.d_z)]
            )
        if self.kind == "neg-quadratic":
            center = a @ self.params["m"].T + self.params["c0"]
            return (center - z) @ self.params["q"].T
        raise ValueError(self.kind)

    def grad_z(self, a, z) -> np.ndarray:
        return self.grad_z_rows(a, z)[0]

    def to_config(self) -> dict:
        if self.kind == "polynomial":
            return {
                "kind": "polynomial",
                "d_a": self.d_a,
                "d_z": self.d_z,
                "terms": _monomials_to_terms(self.params["mon"]),
            }
        return {
            "kind": "neg-quadratic",
            "d_a": self.d_a,
            "q": self.params["q"].tolist(),
            "center_matrix": self.params["m"].tolist(),
            "center_offset": self.params["c0"].tolist(),
        }

    @staticmethod
    def from_config(cfg: dict) -> "ScalarFamily":
        kind = cfg.get("kind")
        if kind == "polynomial":
            return ScalarFamily.polynomial(cfg["terms"], cfg["d_a"], cfg["d_z"])
        if kind == "neg-quadratic":
            return ScalarFamily.neg_quadratic(
                cfg["q"],
                cfg.get("center_matrix"),
                cfg.get("center_offset"),
                cfg.get("d_a", 0),
            )
        raise ValueError(f"unknown scalar family kind {kind!r}")


@dataclass(frozen=True)
class StructuralSpec:
    """Primitives of a market: base utility, producer cost, taste surplus."""

    u_bar: ScalarFamily
    cost: ScalarFamily
    zeta: SurplusFamily

    def __post_init__(self):
        if self.u_bar.d_z != self.zeta.d_z or self.cost.d_z != self.zeta.d_z:
            raise ValueError("u_bar, cost and zeta must share the quality dimension")

    def to_config(self) -> dict:
        return {
            "u_bar": self.u_bar.to_config(),
            "cost": self.cost.to_config(),
            "zeta": self.zeta.to_config(),
        }

    @staticmethod
    def from_config(cfg: dict) -> "StructuralSpec":
        return StructuralSpec(
            u_bar=ScalarFamily.from_config(cfg["u_bar"]),
            cost=ScalarFamily.from_config(cfg["cost"]),
            zeta=SurplusFamily.from_config(cfg["zeta"]),
        )


# ---------------------------------------------------------------------------
# Twist (taste injectivity) diagnostic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TwistReport:
    passed: bool
    min_singular_value: float
    witness: Optional[tuple]
    inverse_cross_bound: float
    quality_hessian_bound: float
    threshold: float
    growth_condition: str = "not checked"

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        msg = f"twist check {status}: min singular value {self.min_singular_value:.3e}"
        if self.witness is not None:
            eps_a, eps_b, z = self.witness
            msg += f"; witness eps={eps_a} vs eps'={eps_b} at z={z}"
        return msg


def _quality_hessian_norm(f: SurplusFamily, x, eps, z, h: float = 1e-5) -> float:
    """Spectral norm of d^2 zeta / dz dz by central differences of grad_z."""
    d = f.d_z
    hess = np.empty((d, d))
    z = np.asarray(z, dtype=float).ravel()
    for b in range(d):
        dz = np.zeros(d)
        dz[b] = h
        g_hi = f.grad_z(x, eps, z + dz)
        g_lo = f.grad_z(x, eps, z - dz)
        hess[:, b] = (g_hi - g_lo) / (2 * h)
    return float(np.linalg.norm(hess, 2))


def check_twist(
    f: SurplusFamily,
    x,
    eps_grid,
    z_grid,
    threshold: float = 1e-8,
    witness_tol: float = 1e-9,
) -> TwistReport:
    """Sampled injectivity diagnostic for eps -> grad_z zeta(x, eps, z).

    Scans all grid pairs for (a) the smallest singular value of the
    cross Hessian and (b) distinct taste points with coinciding quality
    gradients at some grid z (an explicit injectivity witness).  A
    sampled check, not a proof.
    """
    eps_pts = eps_grid.points if hasattr(eps_grid, "points") else eps_grid
    z_pts = z_grid.points if hasattr(z_grid, "points") else z_grid
    eps_pts = np.atleast_2d(np.asarray(eps_pts, dtype=float))
    z_pts = np.atleast_2d(np.asarray(z_pts, dtype=float))
    if eps_pts.shape[0] == 0 or z_pts.shape[0] == 0:
        raise ValueError("twist check needs non-empty grids")

    min_sv = np.inf
    max_inv = 0.0
    max_hzz = 0.0
    witness = None
    n_e = eps_pts.shape[0]
    for z in z_pts:
        grads = f.grad_z_rows(x, eps_pts, np.tile(z, (n_e, 1)))
        if witness is None and n_e > 1:
            diff = grads[:, None, :] - grads[None, :, :]
            dist = np.linalg.norm(diff, axis=2)
            dist[np.tril_indices(n_e)] = np.inf
            flat = np.argmin(dist)
            i, j = np.unravel_index(flat, dist.shape)
            if dist[i, j] <= witness_tol and not np.allclose(
                eps_pts[i], eps_pts[j], rtol=0.0, atol=witness_tol
            ):
                witness = (eps_pts[i].copy(), eps_pts[j].copy(), z.copy())
    # singular values and curvature bounds on a subsample of pairs
    stride_e = max(1, n_e // 25)
    stride_z = max(1, z_pts.shape[0] // 25)
    for eps in eps_pts[::stride_e]:
        for z in z_pts[::stride_z]:
            cross = f.cross_hessian(x, eps, z)
            sv = np.linalg.svd(cross, compute_uv=False)
            min_sv = min(min_sv, float(sv[-1]))
            if sv[-1] > 0:
                max_inv = max(max_inv, 1.0 / float(sv[-1]))
            else:
                max_inv = np.inf
            max_hzz = max(max_hzz, _quality_hessian_norm(f, x, eps, z))

    passed = (witness is None) and (min_sv > threshold)
    return TwistReport(
        passed=passed,
        min_singular_value=float(min_sv),
        witness=witness,
        inverse_cross_bound=float(max_inv),
        quality_hessian_bound=float(max_hzz),
        threshold=threshold,
    )
