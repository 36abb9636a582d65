"""Bisubmersion terms: evaluable range/source maps and fibre charts.

A bisubmersion is kept as a lazy term (path-holonomy, inverse,
composition, restriction, translate); only its fibres are ever
discretized.  Parameters are flat float vectors.  For a path-holonomy
term over m generators on an n-dimensional chart, a parameter is
``(xi_1..xi_m, y_1..y_n)`` with source ``y`` and range the unit-time
flow of ``y`` along ``sum xi_i X_i``.

The canonical fibre charts are the load-bearing piece: the source fibre
over ``x`` is ``xi -> (xi, x)`` and the range fibre is
``xi -> (xi, back_flow(xi, x))``, which works because the time-1 flow of
a fixed field is inverted by the reversed flow.  Composite, inverse and
translated fibres are assembled from these recursively.
"""

from __future__ import annotations

import numpy as np

from . import flow as _flow
from .errors import (
    BaseMismatch,
    BracketNotZero,
    DimensionMismatch,
    DomainEscape,
    EmptyTranslate,
    NotABisection,
    NotTransverse,
)
from .expr import lie_bracket

__all__ = [
    "Bisubmersion",
    "PathHolonomy",
    "InverseBisubmersion",
    "Composition",
    "Restriction",
    "TranslateRight",
    "TranslateLeft",
    "Bisection",
    "Morphism",
    "AdditionMorphism",
    "FibreChart",
    "make_path_holonomy",
    "compose",
    "invert",
    "restrict",
    "translate",
    "fibre_param",
    "bisection_diffeo",
    "constant_bisection",
    "general_bisection",
    "compose_bisections",
    "transpose_bisection",
    "identity_bisection",
    "make_addition_morphism",
]

_OTHER = {"r": "s", "s": "r"}


def _raise_escape(ok, what):
    if not np.all(ok):
        raise DomainEscape(f"{what}: {int(np.sum(~ok))} parameter rows escaped")


class Bisubmersion:
    """Base class; subclasses fill in maps, charts and bookkeeping."""

    foliation = None
    param_len = 0
    dim = 0  # manifold dimension of the term

    @property
    def base_dim(self):
        return self.foliation.dim

    @property
    def fibre_dim(self):
        return self.dim - self.base_dim

    # --- maps -----------------------------------------------------------
    def r(self, params, cfg=None, allow_escape=False):
        raise NotImplementedError

    def s(self, params, cfg=None, allow_escape=False):
        raise NotImplementedError

    def chart(self, side, xi, bases, cfg=None, allow_escape=False):
        """Parameter rows of the ``side`` fibre over ``bases`` at fibre
        coordinates ``xi``; shapes (K, fibre_dim) and (K, n)."""
        raise NotImplementedError

    def xi_box(self):
        raise NotImplementedError

    def param_box(self):
        raise NotImplementedError

    def contains(self, params, tol=1e-7, cfg=None):
        """Sampled membership mask (fibred-product constraints)."""
        box = self.param_box()
        p = np.atleast_2d(params)
        return np.all((p >= box[:, 0] - tol) & (p <= box[:, 1] + tol), axis=1)

    def chart_jac_det(self, xi, under, cfg=None, allow_escape=False):
        """|det| of the base derivative of the range chart; defined where
        the term supports r<->s density conversion."""
        raise NotTransverse(f"{self.describe()} has no canonical chart Jacobian")

    # --- bookkeeping ----------------------------------------------------
    def key(self):
        raise NotImplementedError

    def same_term(self, other):
        return isinstance(other, Bisubmersion) and self.key() == other.key()

    def describe(self):
        raise NotImplementedError

    def sample_params(self, count, rng, cfg=None):
        """Valid parameter rows drawn via source-fibre charts."""
        bases = self.foliation.sample_points(count, rng)
        xib = self.xi_box()
        xi = xib[:, 0] + (xib[:, 1] - xib[:, 0]) * rng.random((count, self.fibre_dim))
        params, ok = self.chart("s", xi, bases, cfg=cfg, allow_escape=True)
        return params[ok]

    def __repr__(self):
        return self.describe()


class PathHolonomy(Bisubmersion):
    """U in R^m x M0 with s(xi, x) = x and r(xi, x) the unit-time flow."""

    def __init__(self, foliation):
        self.foliation = foliation
        self.param_len = foliation.num_generators + foliation.dim
        self.dim = self.param_len

    def _split(self, params):
        m = self.foliation.num_generators
        p = np.atleast_2d(np.asarray(params, float))
        return p[:, :m], p[:, m:]

    def r(self, params, cfg=None, allow_escape=False):
        xi, under = self._split(params)
        pts, escaped = _flow.exp_flow_batch(
            self.foliation, xi, under, cfg, allow_escape=True
        )
        if allow_escape:
            return pts, ~escaped
        _raise_escape(~escaped, "range map")
        return pts

    def s(self, params, cfg=None, allow_escape=False):
        _, under = self._split(params)
        if allow_escape:
            return under.copy(), np.ones(len(under), dtype=bool)
        return under.copy()

    def chart(self, side, xi, bases, cfg=None, allow_escape=False):
        xi = np.atleast_2d(np.asarray(xi, float))
        bases = np.atleast_2d(np.asarray(bases, float))
        if side == "s":
            params = np.concatenate([xi, bases], axis=1)
            ok = np.ones(len(params), dtype=bool)
        else:
            under, escaped = _flow.back_flow_batch(
                self.foliation, xi, bases, cfg, allow_escape=True
            )
            params = np.concatenate([xi, under], axis=1)
            ok = ~escaped
        if allow_escape:
            return params, ok
        _raise_escape(ok, f"{side}-fibre chart")
        return params

    def chart_jac_det(self, xi, under, cfg=None, allow_escape=False):
        _, J, escaped = _flow.flow_jacobian_batch(
            self.foliation, xi, under, cfg, allow_escape=True
        )
        det = np.abs(np.linalg.det(J))
        if allow_escape:
            return det, ~escaped
        _raise_escape(~escaped, "chart Jacobian")
        return det

    def contains(self, params, tol=1e-7, cfg=None):
        # Under-points may wander into the integration domain: compositions
        # produce intermediate basepoints outside the chart box.
        xi, under = self._split(params)
        xib = self.foliation.xi_box
        eb = self.foliation.escape_box
        ok_xi = np.all((xi >= xib[:, 0] - tol) & (xi <= xib[:, 1] + tol), axis=1)
        ok_under = np.all((under >= eb[:, 0]) & (under <= eb[:, 1]), axis=1)
        return ok_xi & ok_under

    def xi_box(self):
        return self.foliation.xi_box

    def param_box(self):
        return np.concatenate([self.foliation.xi_box, self.foliation.chart_box])

    def key(self):
        return ("path_holonomy", id(self.foliation))

    def describe(self):
        return f"path_holonomy({self.foliation})"


class InverseBisubmersion(Bisubmersion):
    """Same space, range and source swapped."""

    def __init__(self, inner):
        self.inner = inner
        self.foliation = inner.foliation
        self.param_len = inner.param_len
        self.dim = inner.dim

    def r(self, params, cfg=None, allow_escape=False):
        return self.inner.s(params, cfg, allow_escape)

    def s(self, params, cfg=None, allow_escape=False):
        return self.inner.r(params, cfg, allow_escape)

    def chart(self, side, xi, bases, cfg=None, allow_escape=False):
        return self.inner.chart(_OTHER[side], xi, bases, cfg, allow_escape)

    def xi_box(self):
        return self.inner.xi_box()

    def param_box(self):
        return self.inner.param_box()

    def contains(self, params, tol=1e-7, cfg=None):
        return self.inner.contains(params, tol, cfg)

    def key(self):
        return ("inverse", self.inner.key())

    def describe(self):
        return f"inverse({self.inner.describe()})"


class Composition(Bisubmersion):
    """U o V as the fibred product over s_U = r_V; parameters concatenate."""

    def __init__(self, left, right):
        if left.foliation is not right.foliation:
            raise BaseMismatch("composition of bisubmersions over different bases")
        self.left = left
        self.right = right
        self.foliation = left.foliation
        self.param_len = left.param_len + right.param_len
        self.dim = left.dim + right.dim - self.foliation.dim

    def split(self, params):
        p = np.atleast_2d(np.asarray(params, float))
        return p[:, : self.left.param_len], p[:, self.left.param_len :]

    def r(self, params, cfg=None, allow_escape=False):
        u, _ = self.split(params)
        return self.left.r(u, cfg, allow_escape)

    def s(self, params, cfg=None, allow_escape=False):
        _, v = self.split(params)
        return self.right.s(v, cfg, allow_escape)

    def chart(self, side, xi, bases, cfg=None, allow_escape=False):
        xi = np.atleast_2d(np.asarray(xi, float))
        bases = np.atleast_2d(np.asarray(bases, float))
        kl = self.left.fibre_dim
        xl, xr = xi[:, :kl], xi[:, kl:]
        if side == "s":
            v, ok1 = self.right.chart("s", xr, bases, cfg, allow_escape=True)
            mid, ok2 = self.right.r(v, cfg, allow_escape=True)
            u, ok3 = self.left.chart("s", xl, mid, cfg, allow_escape=True)
        else:
            u, ok1 = self.left.chart("r", xl, bases, cfg, allow_escape=True)
            mid, ok2 = self.left.s(u, cfg, allow_escape=True)
            v, ok3 = self.right.chart("r", xr, mid, cfg, allow_escape=True)
        params = np.concatenate([u, v], axis=1)
        ok = ok1 & ok2 & ok3
        if allow_escape:
            return params, ok
        _raise_escape(ok, f"{side}-fibre chart of composition")
        return params

    def contains(self, params, tol=1e-7, cfg=None):
        u, v = self.split(params)
        okl = self.left.contains(u, tol, cfg)
        okr = self.right.contains(v, tol, cfg)
        su, ok1 = self.left.s(u, cfg, allow_escape=True)
        rv, ok2 = self.right.r(v, cfg, allow_escape=True)
        glue = np.linalg.norm(su - rv, axis=1) <= tol
        return okl & okr & ok1 & ok2 & glue

    def xi_box(self):
        return np.concatenate([self.left.xi_box(), self.right.xi_box()])

    def param_box(self):
        return np.concatenate([self.left.param_box(), self.right.param_box()])

    def key(self):
        return ("composition", self.left.key(), self.right.key())

    def describe(self):
        return f"({self.left.describe()} o {self.right.describe()})"


class Restriction(Bisubmersion):
    """Open sub-bisubmersion cut out by a parameter box."""

    def __init__(self, inner, box):
        self.inner = inner
        self.box = np.asarray(box, float)
        if self.box.shape != (inner.param_len, 2):
            raise DimensionMismatch("restriction box must cover the parameter space")
        self.foliation = inner.foliation
        self.param_len = inner.param_len
        self.dim = inner.dim

    def r(self, params, cfg=None, allow_escape=False):
        return self.inner.r(params, cfg, allow_escape)

    def s(self, params, cfg=None, allow_escape=False):
        return self.inner.s(params, cfg, allow_escape)

    def chart(self, side, xi, bases, cfg=None, allow_escape=False):
        return self.inner.chart(side, xi, bases, cfg, allow_escape)

    def contains(self, params, tol=1e-7, cfg=None):
        p = np.atleast_2d(params)
        inside = np.all(
            (p >= self.box[:, 0] - tol) & (p <= self.box[:, 1] + tol), axis=1
        )
        return inside & self.inner.contains(params, tol, cfg)

    def chart_jac_det(self, xi, under, cfg=None, allow_escape=False):
        return self.inner.chart_jac_det(xi, under, cfg, allow_escape)

    def xi_box(self):
        m = self.inner.fibre_dim
        return self.box[:m]

    def param_box(self):
        return self.box

    def key(self):
        return ("restriction", self.inner.key(), self.box.tobytes())

    def describe(self):
        return f"restrict({self.inner.describe()})"


class TranslateRight(Bisubmersion):
    """U_S: range unchanged, source composed with Phi_S^{-1}."""

    def __init__(self, inner, bisection):
        self.inner = inner
        self.bisection = bisection
        self.foliation = inner.foliation
        self.param_len = inner.param_len
        self.dim = inner.dim

    def r(self, params, cfg=None, allow_escape=False):
        return self.inner.r(params, cfg, allow_escape)

    def s(self, params, cfg=None, allow_escape=False):
        pts, ok1 = self.inner.s(params, cfg, allow_escape=True)
        out, ok2 = self.bisection.phi_inv(pts, cfg, allow_escape=True)
        ok = ok1 & ok2
        if allow_escape:
            return out, ok
        _raise_escape(ok, "translated source map")
        return out

    def chart(self, side, xi, bases, cfg=None, allow_escape=False):
        bases = np.atleast_2d(np.asarray(bases, float))
        if side == "r":
            return self.inner.chart("r", xi, bases, cfg, allow_escape)
        mapped, ok0 = self.bisection.phi(bases, cfg, allow_escape=True)
        params, ok1 = self.inner.chart("s", xi, mapped, cfg, allow_escape=True)
        ok = ok0 & ok1
        if allow_escape:
            return params, ok
        _raise_escape(ok, "s-fibre chart of right translate")
        return params

    def xi_box(self):
        return self.inner.xi_box()

    def param_box(self):
        return self.inner.param_box()

    def contains(self, params, tol=1e-7, cfg=None):
        return self.inner.contains(params, tol, cfg)

    def key(self):
        return ("translate_right", self.inner.key(), id(self.bisection))

    def describe(self):
        return f"translate_right({self.inner.describe()})"


class TranslateLeft(Bisubmersion):
    """U^S: source unchanged, range composed with Phi_S."""

    def __init__(self, inner, bisection):
        self.inner = inner
        self.bisection = bisection
        self.foliation = inner.foliation
        self.param_len = inner.param_len
        self.dim = inner.dim

    def r(self, params, cfg=None, allow_escape=False):
        pts, ok1 = self.inner.r(params, cfg, allow_escape=True)
        out, ok2 = self.bisection.phi(pts, cfg, allow_escape=True)
        ok = ok1 & ok2
        if allow_escape:
            return out, ok
        _raise_escape(ok, "translated range map")
        return out

    def s(self, params, cfg=None, allow_escape=False):
        return self.inner.s(params, cfg, allow_escape)

    def chart(self, side, xi, bases, cfg=None, allow_escape=False):
        bases = np.atleast_2d(np.asarray(bases, float))
        if side == "s":
            return self.inner.chart("s", xi, bases, cfg, allow_escape)
        mapped, ok0 = self.bisection.phi_inv(bases, cfg, allow_escape=True)
        params, ok1 = self.inner.chart("r", xi, mapped, cfg, allow_escape=True)
        ok = ok0 & ok1
        if allow_escape:
            return params, ok
        _raise_escape(ok, "r-fibre chart of left translate")
        return params

    def xi_box(self):
        return self.inner.xi_box()

    def param_box(self):
        return self.inner.param_box()

    def contains(self, params, tol=1e-7, cfg=None):
        return self.inner.contains(params, tol, cfg)

    def key(self):
        return ("translate_left", self.inner.key(), id(self.bisection))

    def describe(self):
        return f"translate_left({self.inner.describe()})"


# ---------------------------------------------------------------------------
# Bisections


class Bisection:
    """A section of the source map on which both r and s are injective.

    Stored in graph form over the source: ``section(x)`` is the parameter
    point over ``x``, and the induced diffeomorphism is
    ``phi = r o section`` with an explicit or Newton inverse.
    """

    def __init__(self, host, base_box, section_fn, phi_fn, phi_inv_fn, label="",
                 valid_fn=None):
        self.host = host
        self.base_box = np.asarray(base_box, float)
        self._section = section_fn
        self._phi = phi_fn
        self._phi_inv = phi_inv_fn
        self._valid = valid_fn
        self.label = label

    def section(self, x):
        return self._section(np.atleast_2d(np.asarray(x, float)))

    def phi(self, x, cfg=None, allow_escape=False):
        out, ok = self._phi(np.atleast_2d(np.asarray(x, float)), cfg)
        if allow_escape:
            return out, ok
        _raise_escape(ok, "bisection diffeomorphism")
        return out

    def phi_inv(self, x, cfg=None, allow_escape=False):
        out, ok = self._phi_inv(np.atleast_2d(np.asarray(x, float)), cfg)
        if allow_escape:
            return out, ok
        _raise_escape(ok, "inverse bisection diffeomorphism")
        return out

    def in_base(self, x, tol=1e-9):
        p = np.atleast_2d(np.asarray(x, float))
        mask = np.all(
            (p >= self.base_box[:, 0] - tol) & (p <= self.base_box[:, 1] + tol), axis=1
        )
        if self._valid is not None:
            mask = mask & self._valid(p)
        return mask

    def in_range(self, x, cfg=None):
        """Mask for x in Phi_S(base_box), via the inverse map."""
        y, ok = self.phi_inv(x, cfg, allow_escape=True)
        inside = np.zeros(len(y), dtype=bool)
        inside[ok] = self.in_base(y[ok])
        return inside & ok, y

    def __repr__(self):
        return f"Bisection({self.label or self.host.describe()})"


def constant_bisection(host, xi0, base_box=None, label=""):
    """Constant-xi bisection of a path-holonomy term: x -> (xi0, x)."""
    if not isinstance(host, PathHolonomy):
        raise NotABisection("constant-xi bisections live on path-holonomy terms")
    F = host.foliation
    xi0 = np.atleast_1d(np.asarray(xi0, float))
    if base_box is None:
        base_box = F.chart_box

    def section(x):
        return np.concatenate([np.tile(xi0, (len(x), 1)), x], axis=1)

    def phi(x, cfg):
        pts, esc = _flow.exp_flow_batch(F, np.tile(xi0, (len(x), 1)), x, cfg, True)
        return pts, ~esc

    def phi_inv(x, cfg):
        pts, esc = _flow.back_flow_batch(F, np.tile(xi0, (len(x), 1)), x, cfg, True)
        return pts, ~esc

    return Bisection(host, base_box, section, phi, phi_inv,
                     label=label or f"xi0={xi0.tolist()}")


def identity_bisection(host, base_box=None):
    m = host.foliation.num_generators
    return constant_bisection(host, np.zeros(m), base_box, label="identity")


def general_bisection(host, section_fn, base_box, label="", newton_tol=1e-11):
    """Bisection from an arbitrary section map; inverse by damped Newton."""
    base_box = np.asarray(base_box, float)

    def section(x):
        return np.atleast_2d(section_fn(np.atleast_2d(np.asarray(x, float))))

    def phi(x, cfg):
        return host.r(section(x), cfg, allow_escape=True)

    def phi_inv(targets, cfg):
        # Damped Newton on g(y) = phi(y) - target with FD Jacobians.
        y = targets.copy()
        ok = np.ones(len(y), dtype=bool)
        n = targets.shape[1]
        h = 1e-6
        for _ in range(50):
            fy, okf = phi(y, cfg)
            res = fy - targets
            if np.max(np.linalg.norm(res[okf], axis=1), initial=0.0) < newton_tol:
                ok &= okf
                break
            J = np.empty((len(y), n, n))
            for j in range(n):
                dy = y.copy()
                dy[:, j] += h
                fj, okj = phi(dy, cfg)
                okf &= okj
                J[:, :, j] = (fj - fy) / h
            try:
                step = np.linalg.solve(J, res[..., None])[..., 0]
            except np.linalg.LinAlgError:
                raise NotABisection("Newton inversion hit a singular Jacobian")
            norm0 = np.linalg.norm(res, axis=1)
            damping = 1.0
            for _ in range(8):
                trial = y - damping * step
                ft, okt = phi(trial, cfg)
                better = np.linalg.norm(ft - targets, axis=1) <= norm0
                if np.all(better | ~okt):
                    y = np.where((better & okt)[:, None], trial, y)
                    break
                damping /= 2.0
            else:
                raise NotABisection("damped Newton failed to reduce the residual")
            ok &= okf
        else:
            raise NotABisection("Newton inversion did not converge in 50 iterations")
        return y, ok

    return Bisection(host, base_box, section, phi, phi_inv, label=label)


def transpose_bisection(S):
    """The same submanifold as a bisection of the inverse bisubmersion."""
    host = invert(S.host)

    def section(x):
        y, ok = S.phi_inv(x, allow_escape=True)
        if not np.all(ok):
            raise DomainEscape("transposed section escaped")
        return S.section(y)

    def phi(x, cfg):
        return S.phi_inv(x, cfg, allow_escape=True)

    def phi_inv(x, cfg):
        return S.phi(x, cfg, allow_escape=True)

    base_box = _sampled_image_box(lambda x: S.phi(x, allow_escape=True), S.base_box)

    def valid(x):
        mask, _ = S.in_range(x)
        return mask

    return Bisection(host, base_box, section, phi, phi_inv,
                     label=f"transpose({S.label})", valid_fn=valid)


def compose_bisections(S, T):
    """Bisection of host(S) o host(T) inducing Phi_S o Phi_T."""
    host = compose(S.host, T.host)

    def section(x):
        tx = T.section(x)
        mid, ok = T.phi(x, allow_escape=True)
        if not np.all(ok):
            raise DomainEscape("composed section escaped")
        return np.concatenate([S.section(mid), tx], axis=1)

    def phi(x, cfg):
        mid, ok1 = T.phi(x, cfg, allow_escape=True)
        out, ok2 = S.phi(mid, cfg, allow_escape=True)
        return out, ok1 & ok2

    def phi_inv(x, cfg):
        mid, ok1 = S.phi_inv(x, cfg, allow_escape=True)
        out, ok2 = T.phi_inv(mid, cfg, allow_escape=True)
        return out, ok1 & ok2

    def valid(x):
        mid, ok = T.phi(x, allow_escape=True)
        out = np.zeros(len(x), dtype=bool)
        out[ok] = S.in_base(mid[ok])
        return out & T.in_base(x)

    return Bisection(
        host,
        T.base_box,
        section,
        phi,
        phi_inv,
        label=f"{S.label} o {T.label}",
        valid_fn=valid,
    )


def _sampled_image_box(fn, box, count=256, pad=0.02):
    """Conservative bounding box of fn(box) from corner + grid samples."""
    box = np.asarray(box, float)
    n = len(box)
    rng = np.random.default_rng(12345)
    pts = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((count, n))
    corners = np.array(
        np.meshgrid(*[box[j] for j in range(n)], indexing="ij")
    ).reshape(n, -1).T
    pts = np.concatenate([pts, corners, box.mean(axis=1)[None, :]])
    vals, ok = fn(pts)
    vals = vals[ok]
    if len(vals) == 0:
        return None
    lo, hi = vals.min(axis=0), vals.max(axis=0)
    margin = pad * (hi - lo + 1.0)
    return np.stack([lo - margin, hi + margin], axis=1)


class LocalDiffeo:
    """Evaluable local diffeomorphism with inverse, from a bisection."""

    def __init__(self, bisection):
        self.bisection = bisection
        self.base_box = bisection.base_box

    def __call__(self, x, cfg=None):
        single = np.asarray(x, float).ndim == 1
        out = self.bisection.phi(np.atleast_2d(np.asarray(x, float)), cfg)
        return out[0] if single else out

    def inverse(self, x, cfg=None):
        single = np.asarray(x, float).ndim == 1
        out = self.bisection.phi_inv(np.atleast_2d(np.asarray(x, float)), cfg)
        return out[0] if single else out


def bisection_diffeo(S, samples=64, cfg=None, seed=0):
    """Validate S on sampled base points and return its diffeomorphism.

    Checks s o section = id, injectivity of Phi_S and the round trip
    Phi_S^{-1} o Phi_S = id; failure raises NotABisection.
    """
    rng = np.random.default_rng(seed)
    box = S.base_box
    pts = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((samples, len(box)))
    sec = S.section(pts)
    back, ok = S.host.s(sec, cfg, allow_escape=True)
    if not np.all(ok) or np.max(np.linalg.norm(back - pts, axis=1)) > 1e-9:
        raise NotABisection("section is not a section of the source map")
    vals, ok = S.phi(pts, cfg, allow_escape=True)
    good = ok
    v = vals[good]
    if len(v) >= 2:
        d2 = np.sum((v[:, None, :] - v[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        src = pts[good]
        s2 = np.sum((src[:, None, :] - src[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(s2, np.inf)
        collide = (d2 < 1e-20) & (s2 > 1e-12)
        if np.any(collide):
            raise NotABisection("induced map is not injective on sampled points")
    rt, ok2 = S.phi_inv(vals[good], cfg, allow_escape=True)
    if len(rt) and np.max(np.linalg.norm(rt[ok2] - pts[good][ok2], axis=1)) > 1e-7:
        raise NotABisection("inverse round trip exceeded tolerance")
    return LocalDiffeo(S)


# ---------------------------------------------------------------------------
# Term constructors


def make_path_holonomy(foliation) -> PathHolonomy:
    """Path-holonomy bisubmersion of the generating family."""
    return PathHolonomy(foliation)


def compose(U, V) -> Composition:
    """U o V with r(u,v) = r_U(u) and s(u,v) = s_V(v)."""
    return Composition(U, V)


def invert(U) -> Bisubmersion:
    if isinstance(U, InverseBisubmersion):
        return U.inner
    return InverseBisubmersion(U)


def restrict(U, box) -> Restriction:
    return Restriction(U, box)


def translate(U, S, side, probe=64, cfg=None, seed=0):
    """Right- or left-translate of U by the bisection S.

    Raises EmptyTranslate when no sampled parameter of U lands in the
    translate's domain.
    """
    if side not in ("left", "right"):
        raise ValueError("side must be 'left' or 'right'")
    rng = np.random.default_rng(seed)
    params = U.sample_params(probe, rng, cfg)
    if side == "right":
        pts, ok = U.s(params, cfg, allow_escape=True)
        mask, _ = S.in_range(pts[ok], cfg)
        if not np.any(mask):
            raise EmptyTranslate("source image misses the bisection's range")
        return TranslateRight(U, S)
    pts, ok = U.r(params, cfg, allow_escape=True)
    inside = S.in_base(pts[ok])
    if not np.any(inside):
        raise EmptyTranslate("range image misses the bisection's base")
    return TranslateLeft(U, S)


class FibreChart:
    """Parameterization of one fibre: a box, a chart map, a dimension."""

    def __init__(self, host, side, base_point, cfg=None):
        self.host = host
        self.side = side
        self.base_point = np.asarray(base_point, float)
        self.box = host.xi_box()
        self.dim = host.fibre_dim
        self._cfg = cfg

    def map(self, xi, allow_escape=False):
        xi = np.atleast_2d(np.asarray(xi, float))
        bases = np.tile(self.base_point, (len(xi), 1))
        return self.host.chart(self.side, xi, bases, self._cfg, allow_escape)


def fibre_param(U, side, x, cfg=None) -> FibreChart:
    """Canonical chart of the r- or s-fibre of U over x."""
    if side not in ("r", "s"):
        raise ValueError("side must be 'r' or 's'")
    return FibreChart(U, side, x, cfg)


# ---------------------------------------------------------------------------
# Morphisms


class Morphism:
    """Parameter map intertwining both range and source maps."""

    def __init__(self, source, target, map_fn, label="", check_samples=32,
                 check_tol=1e-6, cfg=None, seed=0):
        self.source = source
        self.target = target
        self._map = map_fn
        self.label = label
        if check_samples:
            res = self.compatibility_residual(check_samples, cfg=cfg, seed=seed)
            if res > check_tol:
                raise BaseMismatch(
                    f"morphism {label or ''} violates r/s compatibility: "
                    f"residual {res:.3e}"
                )

    def map(self, params):
        return self._map(np.atleast_2d(np.asarray(params, float)))

    def compatibility_residual(self, samples=100, cfg=None, seed=0):
        """Worst |r_V(map(p)) - r_U(p)| and s-analogue over sampled p."""
        rng = np.random.default_rng(seed)
        params = self.source.sample_params(samples, rng, cfg)
        if len(params) == 0:
            return 0.0
        mapped = self.map(params)
        worst = 0.0
        for side in ("r", "s"):
            a, oka = getattr(self.source, side)(params, cfg, allow_escape=True)
            b, okb = getattr(self.target, side)(mapped, cfg, allow_escape=True)
            ok = oka & okb
            if np.any(ok):
                worst = max(worst, float(np.max(np.linalg.norm(a[ok] - b[ok], axis=1))))
        return worst

    def __repr__(self):
        return f"Morphism({self.label or 'unnamed'})"


class AdditionMorphism(Morphism):
    """(eta, y, xi, x) -> (eta + xi, x) on U o U for commuting generators."""

    def __init__(self, U, cfg=None):
        self.path_holonomy = U
        m = U.foliation.num_generators
        n = U.foliation.dim

        def add_map(params):
            eta = params[:, :m]
            xi = params[:, U.param_len : U.param_len + m]
            x = params[:, U.param_len + m :]
            return np.concatenate([eta + xi, x], axis=1)

        super().__init__(compose(U, U), U, add_map, label="addition", cfg=cfg)


def make_addition_morphism(U, samples=64, tol=1e-9, cfg=None, seed=0):
    """Addition morphism U o U -> U; requires commuting generators."""
    if not isinstance(U, PathHolonomy):
        raise BaseMismatch("addition morphism is defined on path-holonomy terms")
    F = U.foliation
    rng = np.random.default_rng(seed)
    pts = F.sample_points(samples, rng)
    for i in range(F.num_generators):
        for j in range(i + 1, F.num_generators):
            br = lie_bracket(F.generators[i], F.generators[j])
            vals = br(pts)
            scale = 1.0 + np.max(np.linalg.norm(F.generator_matrix(pts), axis=(1, 2)))
            worst = float(np.max(np.linalg.norm(vals, axis=1)))
            if worst > tol * scale:
                raise BracketNotZero(
                    f"[X_{i + 1}, X_{j + 1}] has norm {worst:.3e} at sampled points"
                )
    return AdditionMorphism(U, cfg=cfg)
