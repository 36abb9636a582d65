"""The fibred-kernel algebra: atoms, convolution, transpose, pushforward.

A kernel is a finite sum of atoms fibred over the range or source map of
a bisubmersion term.  Atoms pair against test functions on the host's
parameter space, fibrewise over base points:

* Dirac atoms evaluate the test function on a bisection and multiply by
  a coefficient;
* density atoms integrate it against a smooth weight and the canonical
  fibre-chart measure d(xi) (densities are functions on the parameter
  space, so transposition leaves them untouched);
* convolved atoms nest two pairings over a composed host;
* pushed atoms pair through a morphism's parameter map.

Pairings return one value per base point, with NaN marking points whose
fibre chart escaped the integration domain; zeros outside support boxes
are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bisubmersion as bis
from . import flow as _flow
from .errors import (
    BaseMismatch,
    HostMismatch,
    NotTransverse,
    QuadratureFailure,
    SideMismatch,
    SupportViolation,
)
from .expr import ScalarExpr

__all__ = [
    "QuadratureConfig",
    "PairingCtx",
    "FibredKernel",
    "DiracAtom",
    "DensityAtom",
    "ConvolvedAtom",
    "PushedAtom",
    "TransposedAtom",
    "SupportBox",
    "PulledKernel",
    "dirac",
    "density",
    "convolve",
    "transpose",
    "pushforward",
    "pullback_base",
    "r_to_s_convert",
    "support_of",
    "gauss_nodes",
]

_OTHER = {"r": "s", "s": "r"}


@dataclass(frozen=True)
class QuadratureConfig:
    """Tensor Gauss-Legendre orders and the nesting budget for lazy atoms."""

    order: int = 32
    order_highdim: int = 12  # per-axis order for fibre dimension >= 2
    nesting_limit: int = 6

    def __post_init__(self):
        if self.order < 2 or self.order_highdim < 2:
            raise ValueError("quadrature order must be >= 2")

    def order_for(self, fibre_dim):
        return self.order if fibre_dim <= 1 else self.order_highdim


DEFAULT_QUAD = QuadratureConfig()


@dataclass
class PairingCtx:
    quad: QuadratureConfig = field(default_factory=lambda: DEFAULT_QUAD)
    flow: object = None  # FlowConfig or None for the default
    depth: int = 0
    diag: list = None  # optional sink for (out_rows, f_points) records

    def deeper(self):
        if self.depth + 1 > self.quad.nesting_limit:
            raise QuadratureFailure(
                f"convolution nesting exceeded {self.quad.nesting_limit}"
            )
        return PairingCtx(self.quad, self.flow, self.depth + 1, self.diag)


# Row budget for one quadrature batch; larger pairings are block-processed.
_BLOCK_ROWS = 600_000

_GL_CACHE = {}


def gauss_nodes(box, order):
    """Tensor-product Gauss-Legendre nodes and weights on a box."""
    box = np.atleast_2d(np.asarray(box, float))
    key = (box.tobytes(), int(order), box.shape[0])
    hit = _GL_CACHE.get(key)
    if hit is not None:
        return hit
    xs, ws = [], []
    for lo, hi in box:
        x, w = np.polynomial.legendre.leggauss(int(order))
        xs.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
        ws.append(0.5 * (hi - lo) * w)
    grids = np.meshgrid(*xs, indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    wgrids = np.meshgrid(*ws, indexing="ij")
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    _GL_CACHE[key] = (nodes, weights)
    return nodes, weights


def _in_box(points, box, tol=0.0):
    p = np.atleast_2d(points)
    return np.all((p >= box[:, 0] - tol) & (p <= box[:, 1] + tol), axis=1)


def _as_coeff_fn(c, box):
    """Wrap a ScalarExpr or callable into a box-masked coefficient."""
    if isinstance(c, ScalarExpr):
        expr = c

        def fn(x):
            vals = expr(x, check_finite=False)
            return np.where(_in_box(x, box), vals, 0.0)

        return fn
    raw = c

    def fn(x):
        vals = np.asarray(raw(x), float)
        return np.where(_in_box(x, box), vals, 0.0)

    return fn


def _as_dens_fn(a, fibre_dim, base_box):
    """Wrap a ScalarExpr over (xi, base) params into a masked density."""
    if isinstance(a, ScalarExpr):
        expr = a

        def fn(params, rbase, sbase):
            vals = expr(params, check_finite=False)
            under = params[:, fibre_dim:]
            return np.where(_in_box(under, base_box), vals, 0.0)

        return fn, False, False
    return a, False, False


def _scaled_fn(fn, factor, nargs):
    if nargs == 1:
        return lambda x: factor * fn(x)
    return lambda p, rb, sb: factor * fn(p, rb, sb)


# ---------------------------------------------------------------------------
# Atoms


class Atom:
    host = None

    def pair(self, side, bases, phi, ctx):
        """(atom, phi)(x) for each base row; NaN marks escaped points.

        ``phi(params, rows)`` receives parameter rows of the host together
        with the index of the base row each came from.
        """
        raise NotImplementedError

    def transposed(self):
        return TransposedAtom(self)

    def scaled(self, factor):
        raise NotImplementedError

    def image_box(self, out_side, kernel_side, ctx):
        """Conservative box of the out_side map over the atom's support."""
        raise NotImplementedError

    def bound_image(self, out_side, kernel_side, given_box, ctx):
        """Box of out_side values over support rows whose opposite-side
        image lies in given_box; None when empty."""
        raise NotImplementedError

    def node_count(self, ctx):
        return 1

    def has_dirac(self):
        return False


def _sample_box(box, rng, count):
    box = np.atleast_2d(box)
    pts = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((count, len(box)))
    corners = np.array(
        np.meshgrid(*[box[j] for j in range(len(box))], indexing="ij")
    ).reshape(len(box), -1).T
    return np.concatenate([pts, corners])


def _bbox(points, pad_frac=0.02, pad_abs=1e-7):
    if points is None or len(points) == 0:
        return None
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    pad = pad_frac * (hi - lo) + pad_abs
    return np.stack([lo - pad, hi + pad], axis=1)


def _intersect_boxes(a, b):
    if a is None or b is None:
        return None
    lo = np.maximum(a[:, 0], b[:, 0])
    hi = np.minimum(a[:, 1], b[:, 1])
    if np.any(lo > hi):
        return None
    return np.stack([lo, hi], axis=1)


def _boxes_disjoint(a, b):
    return _intersect_boxes(a, b) is None


class DiracAtom(Atom):
    """c * Delta_S: evaluate on the bisection, weight by the coefficient."""

    def __init__(self, bisection, coeff_fn, coeff_box):
        self.bisection = bisection
        self.host = bisection.host
        self.coeff_fn = coeff_fn
        self.coeff_box = np.asarray(coeff_box, float)

    def has_dirac(self):
        return True

    def pair(self, side, bases, phi, ctx):
        S = self.bisection
        bases = np.atleast_2d(np.asarray(bases, float))
        N = len(bases)
        out = np.zeros(N)
        if side == "s":
            valid = S.in_base(bases)
            under = bases
        else:
            under, ok = S.phi_inv(bases, ctx.flow, allow_escape=True)
            valid = np.zeros(N, dtype=bool)
            valid[ok] = S.in_base(under[ok])
            out[~ok] = np.nan
        coeff = np.zeros(N)
        coeff[valid] = self.coeff_fn(bases[valid])
        live = valid & (coeff != 0.0) & np.isfinite(coeff)
        out[valid & ~np.isfinite(coeff)] = np.nan
        if np.any(live):
            params = S.section(under[live])
            rows = np.flatnonzero(live)
            out[live] = coeff[live] * phi(params, rows)
        return out

    def scaled(self, factor):
        return DiracAtom(self.bisection, _scaled_fn(self.coeff_fn, factor, 1),
                         self.coeff_box)

    def _base_set(self, kernel_side, ctx):
        """Box of base points where the pairing can be nonzero."""
        S = self.bisection
        if kernel_side == "s":
            return _intersect_boxes(self.coeff_box, S.base_box)
        mapped = bis._sampled_image_box(
            lambda x: S.phi(x, ctx.flow, allow_escape=True), S.base_box
        )
        return _intersect_boxes(self.coeff_box, mapped)

    def image_box(self, out_side, kernel_side, ctx):
        A = self._base_set(kernel_side, ctx)
        if A is None:
            return None
        if out_side == kernel_side:
            return A
        S = self.bisection
        fwd = S.phi if kernel_side == "s" else S.phi_inv
        return bis._sampled_image_box(lambda x: fwd(x, ctx.flow, allow_escape=True), A)

    def bound_image(self, out_side, kernel_side, given_box, ctx):
        if given_box is None:
            return None
        A = self._base_set(kernel_side, ctx)
        if A is None:
            return None
        S = self.bisection
        rng = np.random.default_rng(7)
        pts = _sample_box(A, rng, 512)
        # opposite-side image of each candidate base point
        fwd = S.phi_inv if kernel_side == "r" else S.phi
        opp, ok = fwd(pts, ctx.flow, allow_escape=True)
        keep = ok & _in_box(opp, given_box, tol=1e-9)
        if out_side == kernel_side:
            return _bbox(pts[keep])
        return _bbox(opp[keep])


class DensityAtom(Atom):
    """Smooth fibred density against the canonical chart measure d(xi).

    ``r_hint``/``s_hint`` are optional conservative boxes for the r/s
    images, tighter than what parameter-box sampling alone can see (used
    when a translation rule folds a coefficient into the density).
    """

    def __init__(self, host, dens_fn, xi_box, base_box,
                 needs_rbase=False, needs_sbase=False, quad_order=None,
                 r_hint=None, s_hint=None):
        self.host = host
        self.dens_fn = dens_fn
        self.xi_box = np.atleast_2d(np.asarray(xi_box, float))
        self.base_box = np.atleast_2d(np.asarray(base_box, float))
        self.needs_rbase = needs_rbase
        self.needs_sbase = needs_sbase
        self.quad_order = quad_order
        self.r_hint = r_hint
        self.s_hint = s_hint
        if self.xi_box.shape[0] != host.fibre_dim:
            raise HostMismatch(
                f"xi box has {self.xi_box.shape[0]} axes, host fibre dim is "
                f"{host.fibre_dim}"
            )

    def _nodes(self, ctx):
        order = self.quad_order or ctx.quad.order_for(self.host.fibre_dim)
        return gauss_nodes(self.xi_box, order)

    def node_count(self, ctx):
        return len(self._nodes(ctx)[0])

    def pair(self, side, bases, phi, ctx):
        bases = np.atleast_2d(np.asarray(bases, float))
        Q = self.node_count(ctx)
        block = max(1, _BLOCK_ROWS // Q)
        if len(bases) > block:
            return np.concatenate(
                [
                    self._pair_block(side, bases[i : i + block], phi, ctx, i)
                    for i in range(0, len(bases), block)
                ]
            )
        return self._pair_block(side, bases, phi, ctx, 0)

    def _pair_block(self, side, bases, phi, ctx, row_offset):
        N = len(bases)
        nodes, weights = self._nodes(ctx)
        Q = len(nodes)
        xi_rep = np.tile(nodes, (N, 1))
        base_rep = np.repeat(bases, Q, axis=0)
        rows = np.repeat(np.arange(N) + row_offset, Q)
        params, ok = self.host.chart(side, xi_rep, base_rep, ctx.flow,
                                     allow_escape=True)
        k = self.host.fibre_dim
        dens = np.zeros(N * Q)
        if np.any(ok):
            rb = sb = None
            if self.needs_rbase:
                if side == "r":
                    rb = base_rep
                else:
                    rb, okr = self.host.r(params, ctx.flow, allow_escape=True)
                    ok = ok & okr
            if self.needs_sbase:
                if side == "s":
                    sb = base_rep
                else:
                    sb, oks = self.host.s(params, ctx.flow, allow_escape=True)
                    ok = ok & oks
            under = params[:, k:]
            inside = _in_box(under, self.base_box)
            live = ok & inside
            if np.any(live):
                vals = self.dens_fn(
                    params[live],
                    rb[live] if rb is not None else None,
                    sb[live] if sb is not None else None,
                )
                dens[live] = vals
        contrib = np.zeros(N * Q)
        contrib[~ok] = np.nan
        eval_rows = ok & (dens != 0.0) & np.isfinite(dens)
        contrib[ok & ~np.isfinite(dens)] = np.nan
        if np.any(eval_rows):
            pv = phi(params[eval_rows], rows[eval_rows])
            contrib[eval_rows] = weights[np.flatnonzero(eval_rows) % Q] \
                * dens[eval_rows] * pv
        return contrib.reshape(N, Q).sum(axis=1)

    def scaled(self, factor):
        return DensityAtom(self.host, _scaled_fn(self.dens_fn, factor, 3),
                           self.xi_box, self.base_box, self.needs_rbase,
                           self.needs_sbase, self.quad_order,
                           self.r_hint, self.s_hint)

    def _param_samples(self, ctx, count=512):
        rng = np.random.default_rng(11)
        xi = _sample_box(self.xi_box, rng, count)
        under = _sample_box(self.base_box, rng, count)
        k = min(len(xi), len(under))
        return np.concatenate([xi[:k], under[:k]], axis=1)

    def _hint(self, out_side):
        return self.r_hint if out_side == "r" else self.s_hint

    def image_box(self, out_side, kernel_side, ctx):
        params = self._param_samples(ctx)
        fn = self.host.r if out_side == "r" else self.host.s
        pts, ok = fn(params, ctx.flow, allow_escape=True)
        box = _bbox(pts[ok])
        hint = self._hint(out_side)
        return box if hint is None else _intersect_boxes(box, hint)

    def bound_image(self, out_side, kernel_side, given_box, ctx):
        if given_box is None:
            return None
        hint_opp = self._hint(_OTHER[out_side])
        if hint_opp is not None:
            given_box = _intersect_boxes(given_box, hint_opp)
            if given_box is None:
                return None
        params = self._param_samples(ctx, count=1024)
        opp, ok1 = getattr(self.host, _OTHER[out_side])(params, ctx.flow,
                                                        allow_escape=True)
        outv, ok2 = getattr(self.host, out_side)(params, ctx.flow,
                                                 allow_escape=True)
        keep = ok1 & ok2 & _in_box(opp, given_box, tol=1e-9)
        box = _bbox(outv[keep])
        hint = self._hint(out_side)
        return box if hint is None else _intersect_boxes(box, hint)


class ConvolvedAtom(Atom):
    """Lazy convolution: nested pairing over the composed host."""

    def __init__(self, left, right):
        self.left = left
        self.right = right
        self.host = bis.compose(left.host, right.host)

    def has_dirac(self):
        return self.left.has_dirac() or self.right.has_dirac()

    def node_count(self, ctx):
        return self.left.node_count(ctx) * self.right.node_count(ctx)

    def pair(self, side, bases, phi, ctx):
        inner_ctx = ctx.deeper()
        if side == "r":

            def phi_out(u_params, u_rows):
                mids, ok = self.left.host.s(u_params, ctx.flow, allow_escape=True)

                def phi_in(v_params, v_rows):
                    full = np.concatenate([u_params[v_rows], v_params], axis=1)
                    return phi(full, u_rows[v_rows])

                vals = self.right.pair("r", mids, phi_in, inner_ctx)
                vals = np.where(ok, vals, np.nan)
                return vals

            return self.left.pair("r", bases, phi_out, inner_ctx)

        def phi_out(v_params, v_rows):
            mids, ok = self.right.host.r(v_params, ctx.flow, allow_escape=True)

            def phi_in(u_params, u_rows):
                full = np.concatenate([u_params, v_params[u_rows]], axis=1)
                return phi(full, v_rows[u_rows])

            vals = self.left.pair("s", mids, phi_in, inner_ctx)
            vals = np.where(ok, vals, np.nan)
            return vals

        return self.right.pair("s", bases, phi_out, inner_ctx)

    def scaled(self, factor):
        return ConvolvedAtom(self.left.scaled(factor), self.right)

    def image_box(self, out_side, kernel_side, ctx):
        part = self.left if out_side == "r" else self.right
        return part.image_box(out_side, kernel_side, ctx)

    def bound_image(self, out_side, kernel_side, given_box, ctx):
        if out_side == "r":
            mid = self.right.bound_image("r", kernel_side, given_box, ctx)
            return self.left.bound_image("r", kernel_side, mid, ctx)
        mid = self.left.bound_image("s", kernel_side, given_box, ctx)
        return self.right.bound_image("s", kernel_side, mid, ctx)


class PushedAtom(Atom):
    """Image of an atom under a morphism of bisubmersions, kept lazy."""

    def __init__(self, morphism, inner):
        self.morphism = morphism
        self.inner = inner
        self.host = morphism.target

    def has_dirac(self):
        return self.inner.has_dirac()

    def node_count(self, ctx):
        return self.inner.node_count(ctx)

    def pair(self, side, bases, phi, ctx):
        def phi_pulled(params, rows):
            return phi(self.morphism.map(params), rows)

        return self.inner.pair(side, bases, phi_pulled, ctx)

    def scaled(self, factor):
        return PushedAtom(self.morphism, self.inner.scaled(factor))

    def image_box(self, out_side, kernel_side, ctx):
        return self.inner.image_box(out_side, kernel_side, ctx)

    def bound_image(self, out_side, kernel_side, given_box, ctx):
        return self.inner.bound_image(out_side, kernel_side, given_box, ctx)


class TransposedAtom(Atom):
    """The same pairing machine viewed over the inverse bisubmersion."""

    def __init__(self, inner):
        self.inner = inner
        self.host = bis.invert(inner.host)

    def has_dirac(self):
        return self.inner.has_dirac()

    def node_count(self, ctx):
        return self.inner.node_count(ctx)

    def pair(self, side, bases, phi, ctx):
        return self.inner.pair(_OTHER[side], bases, phi, ctx)

    def transposed(self):
        return self.inner

    def scaled(self, factor):
        return TransposedAtom(self.inner.scaled(factor))

    def image_box(self, out_side, kernel_side, ctx):
        return self.inner.image_box(_OTHER[out_side], _OTHER[kernel_side], ctx)

    def bound_image(self, out_side, kernel_side, given_box, ctx):
        return self.inner.bound_image(
            _OTHER[out_side], _OTHER[kernel_side], given_box, ctx
        )


# ---------------------------------------------------------------------------
# Kernels


class FibredKernel:
    """Finite sum of atoms fibred over one side, over one foliation."""

    def __init__(self, side, atoms, foliation=None):
        if side not in ("r", "s"):
            raise SideMismatch(f"side must be 'r' or 's', got {side!r}")
        self.side = side
        self.atoms = list(atoms)
        if foliation is None and self.atoms:
            foliation = self.atoms[0].host.foliation
        self.foliation = foliation
        for a in self.atoms:
            if a.host.foliation is not self.foliation:
                raise BaseMismatch("atoms hosted over different foliations")

    def is_zero(self):
        return not self.atoms

    def pairing(self, phi, bases, ctx=None):
        """Sum of atom pairings; phi(params, rows, atom) -> values."""
        ctx = ctx or PairingCtx()
        bases = np.atleast_2d(np.asarray(bases, float))
        total = np.zeros(len(bases))
        for atom in self.atoms:
            total = total + atom.pair(
                self.side, bases, lambda p, r, a=atom: phi(p, r, a), ctx
            )
        return total

    def __add__(self, other):
        if not isinstance(other, FibredKernel):
            return NotImplemented
        if other.side != self.side:
            raise SideMismatch("adding kernels fibred over different sides")
        if other.foliation is not self.foliation and other.atoms and self.atoms:
            raise BaseMismatch("adding kernels over different foliations")
        return FibredKernel(self.side, self.atoms + other.atoms,
                            self.foliation or other.foliation)

    def __mul__(self, factor):
        return FibredKernel(self.side, [a.scaled(float(factor)) for a in self.atoms],
                            self.foliation)

    __rmul__ = __mul__

    def has_dirac(self):
        return any(a.has_dirac() for a in self.atoms)

    def __repr__(self):
        kinds = ", ".join(type(a).__name__ for a in self.atoms)
        return f"FibredKernel(side={self.side}, atoms=[{kinds}])"


@dataclass
class SupportBox:
    """Conservative support bookkeeping: true support lies inside."""

    r_box: object  # (n, 2) array or None
    s_box: object
    atom_boxes: list


def _union_boxes(boxes):
    boxes = [b for b in boxes if b is not None]
    if not boxes:
        return None
    lo = np.min([b[:, 0] for b in boxes], axis=0)
    hi = np.max([b[:, 1] for b in boxes], axis=0)
    return np.stack([lo, hi], axis=1)


def support_of(kernel, ctx=None) -> SupportBox:
    """Union of per-atom r/s image boxes via interval sampling."""
    ctx = ctx or PairingCtx()
    per_atom = []
    for a in kernel.atoms:
        per_atom.append(
            {
                "r": a.image_box("r", kernel.side, ctx),
                "s": a.image_box("s", kernel.side, ctx),
            }
        )
    return SupportBox(
        r_box=_union_boxes([d["r"] for d in per_atom]),
        s_box=_union_boxes([d["s"] for d in per_atom]),
        atom_boxes=per_atom,
    )


# ---------------------------------------------------------------------------
# Factories


def dirac(S, c, side="r", coeff_box=None, ctx=None) -> FibredKernel:
    """Dirac kernel on a bisection with smooth coefficient ``c``.

    The coefficient must be supported inside the bisection's base image
    on the requested side; a sampled violation raises SupportViolation.
    """
    ctx = ctx or PairingCtx()
    n = S.host.base_dim
    if coeff_box is None:
        if side == "s":
            coeff_box = S.base_box
        else:
            coeff_box = bis._sampled_image_box(
                lambda x: S.phi(x, ctx.flow, allow_escape=True), S.base_box,
                pad=0.0,
            )
            if coeff_box is None:
                raise SupportViolation("bisection image could not be sampled")
    coeff_box = np.asarray(coeff_box, float)
    rng = np.random.default_rng(3)
    probe = _sample_box(coeff_box, rng, 128)
    if side == "s":
        good = S.in_base(probe)
    else:
        good, _ = S.in_range(probe, ctx.flow)
    if not np.all(good):
        raise SupportViolation(
            "coefficient support box leaves the bisection's base image"
        )
    fn = _as_coeff_fn(c, coeff_box)
    atom = DiracAtom(S, fn, coeff_box)
    return FibredKernel(side, [atom])


def density(U, a, xi_box=None, base_box=None, side="r", quad_order=None,
            needs_rbase=False, needs_sbase=False) -> FibredKernel:
    """Smooth fibred density on U against the chart measure d(xi).

    ``a`` is a ScalarExpr over the parameter space (fibre coordinates
    first, then base coordinates) or a callable
    ``a(params, rbase, sbase)``.  Support boxes are mandatory bookkeeping;
    the density should decay to negligible values at their edges.
    """
    if xi_box is None:
        xi_box = U.xi_box()
    if base_box is None:
        base_box = U.foliation.escape_box
    if isinstance(a, ScalarExpr):
        fn, nr, ns = _as_dens_fn(a, U.fibre_dim, np.atleast_2d(np.asarray(base_box, float)))
    else:
        fn, nr, ns = a, needs_rbase, needs_sbase
    atom = DensityAtom(U, fn, xi_box, base_box, nr, ns, quad_order)
    return FibredKernel(side, [atom])


# ---------------------------------------------------------------------------
# Convolution


def _convolve_atoms_r(A, B, ctx):
    SA = A.bisection if isinstance(A, DiracAtom) else None
    TB = B.bisection if isinstance(B, DiracAtom) else None

    if SA is not None and TB is not None:
        SC = bis.compose_bisections(SA, TB)
        ca, cb = A.coeff_fn, B.coeff_fn

        def coeff(x):
            va = ca(x)
            y, ok = SA.phi_inv(x, ctx.flow, allow_escape=True)
            out = np.where(va == 0.0, 0.0, np.nan)
            good = ok & (va != 0.0)
            if np.any(good):
                out[good] = va[good] * cb(y[good])
            out[va == 0.0] = 0.0
            return out

        mapped = bis._sampled_image_box(
            lambda x: SA.phi(x, ctx.flow, allow_escape=True), B.coeff_box
        )
        box = _intersect_boxes(A.coeff_box, mapped)
        if box is None:
            return None
        return DiracAtom(SC, coeff, box)

    if SA is not None and isinstance(B, DensityAtom):
        host = bis.TranslateLeft(B.host, SA)
        bfn, needs_rb = B.dens_fn, B.needs_rbase
        ca = A.coeff_fn

        def dens(params, rbase, sbase):
            va = ca(rbase)
            rb_inner = None
            if needs_rb:
                rb_inner, ok = SA.phi_inv(rbase, ctx.flow, allow_escape=True)
                va = np.where(ok, va, np.nan)
            vb = bfn(params, rb_inner, sbase)
            return va * vb

        return DensityAtom(host, dens, B.xi_box, B.base_box,
                           needs_rbase=True, needs_sbase=B.needs_sbase,
                           quad_order=B.quad_order,
                           r_hint=A.coeff_box, s_hint=B.s_hint)

    if isinstance(A, DensityAtom) and TB is not None:
        host = bis.TranslateRight(A.host, TB)
        inner_host = A.host
        afn, needs_sb = A.dens_fn, A.needs_sbase
        cb = B.coeff_fn

        def dens(params, rbase, sbase):
            s_inner, ok = inner_host.s(params, ctx.flow, allow_escape=True)
            va = afn(params, rbase, s_inner if needs_sb else None)
            vb = cb(s_inner)
            out = va * vb
            return np.where(ok, out, np.nan)

        s_hint = bis._sampled_image_box(
            lambda x: TB.phi_inv(x, ctx.flow, allow_escape=True), B.coeff_box
        )
        return DensityAtom(host, dens, A.xi_box, A.base_box,
                           needs_rbase=A.needs_rbase, needs_sbase=False,
                           quad_order=A.quad_order,
                           r_hint=A.r_hint, s_hint=s_hint)

    return ConvolvedAtom(A, B)


def convolve(a: FibredKernel, b: FibredKernel, ctx=None) -> FibredKernel:
    """Convolution product; structural where translation rules apply.

    Dirac*Dirac composes bisections, Dirac*density and density*Dirac
    translate the density's host, everything else stays a lazy nested
    atom.  Atom pairs with disjoint supports are dropped; if everything
    drops, the result is the zero kernel on the empty composition.
    """
    if a.side != b.side:
        raise SideMismatch(f"convolving side {a.side} with side {b.side}")
    if a.foliation is not None and b.foliation is not None \
            and a.foliation is not b.foliation:
        raise BaseMismatch("convolving kernels over different foliations")
    ctx = ctx or PairingCtx()
    atoms = []
    for A in a.atoms:
        sA = A.image_box("s", a.side, ctx)
        for B in b.atoms:
            rB = B.image_box("r", b.side, ctx)
            if sA is not None and rB is not None and _boxes_disjoint(sA, rB):
                continue
            if a.side == "r":
                atom = _convolve_atoms_r(A, B, ctx)
            else:
                atom = ConvolvedAtom(A, B)
            if atom is not None:
                atoms.append(atom)
    return FibredKernel(a.side, atoms, a.foliation or b.foliation)


def transpose(a: FibredKernel) -> FibredKernel:
    """Side flips, hosts invert, atom data is untouched."""
    return FibredKernel(_OTHER[a.side], [atom.transposed() for atom in a.atoms],
                        a.foliation)


# ---------------------------------------------------------------------------
# Pushforward / pullback


def _reduce_addition(pi, atom, ctx, quad_order):
    """Integrate a density*density atom along the addition morphism.

    On the composed host the fibre coordinates are (eta, xi); the change
    of variables zeta = eta + xi turns the pushforward into an explicit
    xi-convolution evaluated by quadrature, using that the generators
    commute.
    """
    U = pi.path_holonomy
    F = U.foliation
    m = F.num_generators
    A, B = atom.left, atom.right
    if not (isinstance(A, DensityAtom) and isinstance(B, DensityAtom)):
        return None
    if not (A.host.same_term(U) and B.host.same_term(U)):
        return None
    order = quad_order or ctx.quad.order_for(m)
    nodes, weights = gauss_nodes(B.xi_box, order)
    Q = len(nodes)
    afn, bfn = A.dens_fn, B.dens_fn
    a_needs_rb = A.needs_rbase

    def dens_block(params, rbase):
        K = len(params)
        zeta = params[:, :m]
        y = params[:, m:]
        xi = np.tile(nodes, (K, 1))
        y_rep = np.repeat(y, Q, axis=0)
        zeta_rep = np.repeat(zeta, Q, axis=0)
        mid, esc = _flow.exp_flow_batch(F, xi, y_rep, ctx.flow, allow_escape=True)
        pa = np.concatenate([zeta_rep - xi, mid], axis=1)
        pb = np.concatenate([xi, y_rep], axis=1)
        rb = np.repeat(rbase, Q, axis=0) if (a_needs_rb and rbase is not None) else None
        va = afn(pa, rb, mid)
        vb = bfn(pb, mid, y_rep)
        contrib = np.tile(weights, K) * va * vb
        contrib = np.where(esc, np.nan, contrib)
        return contrib.reshape(K, Q).sum(axis=1)

    def dens(params, rbase, sbase):
        block = max(1, _BLOCK_ROWS // Q)
        if len(params) <= block:
            return dens_block(params, rbase)
        return np.concatenate(
            [
                dens_block(
                    params[i : i + block],
                    rbase[i : i + block] if rbase is not None else None,
                )
                for i in range(0, len(params), block)
            ]
        )

    zeta_box = A.xi_box + B.xi_box  # Minkowski interval sum
    # Keep node density over the wider zeta box on par with the factors.
    zeta_order = None
    if quad_order is not None:
        w_zeta = np.max(zeta_box[:, 1] - zeta_box[:, 0])
        w_fac = np.max(
            np.maximum(A.xi_box[:, 1] - A.xi_box[:, 0],
                       B.xi_box[:, 1] - B.xi_box[:, 0])
        )
        zeta_order = int(np.ceil(order * max(1.0, w_zeta / w_fac)))
    return DensityAtom(U, dens, zeta_box, B.base_box,
                       needs_rbase=a_needs_rb, needs_sbase=False,
                       quad_order=zeta_order)


def pushforward(pi, a: FibredKernel, ctx=None, quad_order=None) -> FibredKernel:
    """Integration along the fibres of a morphism: (pi_* a, phi) = (a, pi^* phi).

    Addition morphisms reduce density*density atoms to explicit smooth
    densities; everything else is kept lazy through the pairing contract.
    """
    ctx = ctx or PairingCtx()
    out = []
    for atom in a.atoms:
        if not atom.host.same_term(pi.source):
            raise HostMismatch(
                f"atom hosted on {atom.host.describe()}, morphism source is "
                f"{pi.source.describe()}"
            )
        reduced = None
        if isinstance(pi, bis.AdditionMorphism) and isinstance(atom, ConvolvedAtom):
            reduced = _reduce_addition(pi, atom, ctx, quad_order)
        out.append(reduced if reduced is not None else PushedAtom(pi, atom))
    return FibredKernel(a.side, out, a.foliation)


class PulledKernel:
    """Kernel over a pullback submersion: fibres over y are fibres over p(y)."""

    def __init__(self, p_fn, inner):
        self.p_fn = p_fn
        self.inner = inner

    def pairing(self, phi, ys, ctx=None):
        ys = np.atleast_2d(np.asarray(ys, float))
        xs = np.atleast_2d(self.p_fn(ys))
        return self.inner.pairing(phi, xs, ctx)


def pullback_base(p, a) -> PulledKernel:
    """Pull a kernel back along a base map p: N -> M."""
    return PulledKernel(p, a)


# ---------------------------------------------------------------------------
# r <-> s conversion (transverse structure with mu = Lebesgue)


def r_to_s_convert(a: FibredKernel, mu_weight=None, ctx=None) -> FibredKernel:
    """Re-fibre a density kernel over the source map.

    The converted density multiplies by the |det| of the flow Jacobian
    relating the range-chart x base factorization of Lebesgue measure to
    the source-chart one; with a weighted measure mu = w * Lebesgue the
    factor picks up w(range)/w(source).  Dirac atoms are not transverse
    on positive-dimensional fibres and are rejected.
    """
    if a.side != "r":
        raise SideMismatch("r_to_s_convert expects a range-fibred kernel")
    ctx = ctx or PairingCtx()
    out = []
    for atom in a.atoms:
        if not isinstance(atom, DensityAtom):
            raise NotTransverse(
                f"{type(atom).__name__} cannot be re-fibred; only smooth "
                "densities are transverse here"
            )
        host = atom.host
        m = host.fibre_dim
        afn = atom.dens_fn
        needs_rb = atom.needs_rbase
        needs_sb = atom.needs_sbase

        def dens(params, rbase, sbase, host=host, afn=afn, needs_rb=needs_rb,
                 needs_sb=needs_sb, m=m):
            xi = params[:, :m]
            under = params[:, m:]
            det, ok = host.chart_jac_det(xi, under, ctx.flow, allow_escape=True)
            rb = None
            if needs_rb or mu_weight is not None:
                rb, okr = host.r(params, ctx.flow, allow_escape=True)
                ok = ok & okr
            vals = afn(params, rb if needs_rb else None,
                       under if needs_sb else None)
            out_vals = vals * det
            if mu_weight is not None:
                out_vals = out_vals * mu_weight(rb) / mu_weight(under)
            return np.where(ok, out_vals, np.nan)

        out.append(DensityAtom(host, dens, atom.xi_box, atom.base_box,
                               needs_rbase=False, needs_sbase=False,
                               quad_order=atom.quad_order))
    return FibredKernel("s", out, a.foliation)
