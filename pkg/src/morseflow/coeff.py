"""Coefficient fields of the energy form and a small expression language.

Scalar fields evaluate vectorized on (n, dim) point arrays with dim 1 or 2.
The expression grammar (variables x, y, r; functions sin, cos, exp, sqrt):

    expr   := term (("+"|"-") term)*
    term   := factor (("*"|"/") factor)*
    factor := base ("^" number)?
    base   := number | "x" | "y" | "r" | func "(" expr ")" | "(" expr ")" | "-" base

In 1D the variable y evaluates to 0 and r to |x|.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ParseError

__all__ = [
    "ScalarField",
    "MatrixField",
    "VectorField",
    "CoefficientSet",
    "constant_field",
    "radial_polynomial",
    "monomial_field",
    "parse_field",
    "identity_matrix_field",
    "constant_matrix_field",
    "zero_vector_field",
    "constant_vector_field",
    "schrodinger_coefficients",
    "neumann_condition_margin",
]

_FD_STEP = 1e-5  # central-difference step for gradients of parsed fields


class ScalarField:
    """Scalar field with optional analytic gradient (finite differences otherwise)."""

    def __init__(self, eval_fn: Callable[[np.ndarray], np.ndarray],
                 grad_fn: Callable[[np.ndarray], np.ndarray] | None = None,
                 source: str | None = None):
        self._eval = eval_fn
        self._grad = grad_fn
        self.source = source

    @property
    def has_analytic_gradient(self) -> bool:
        return self._grad is not None

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.asarray(self._eval(pts), dtype=float) * np.ones(pts.shape[0])

    def gradient(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self._grad is not None:
            return np.asarray(self._grad(pts), dtype=float)
        grad = np.empty_like(pts)
        for j in range(pts.shape[1]):
            hi = pts.copy(); hi[:, j] += _FD_STEP
            lo = pts.copy(); lo[:, j] -= _FD_STEP
            grad[:, j] = (self(hi) - self(lo)) / (2 * _FD_STEP)
        return grad

    def minus_constant(self, c: float) -> "ScalarField":
        """The field shifted down by a constant; gradient is unchanged."""
        if c == 0:
            return self
        grad = self._grad
        src = f"({self.source}) - {c!r}" if self.source else None
        return ScalarField(lambda pts: self(pts) - c, grad, src)


def constant_field(c: float) -> ScalarField:
    c = float(c)
    return ScalarField(lambda pts: np.full(pts.shape[0], c),
                       lambda pts: np.zeros_like(pts),
                       source=repr(c))


def radial_polynomial(coeffs: Sequence[float]) -> ScalarField:
    """sum_k coeffs[k] * r^k with analytic gradient f'(r) x / r (0 at r=0)."""
    coeffs = [float(c) for c in coeffs]

    def _eval(pts):
        r = np.linalg.norm(pts, axis=1)
        return sum(c * r ** k for k, c in enumerate(coeffs))

    def _grad(pts):
        r = np.linalg.norm(pts, axis=1)
        df = sum(k * c * r ** (k - 1) for k, c in enumerate(coeffs) if k >= 1)
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = np.where(r > 0, df / np.where(r > 0, r, 1.0), 0.0)
        return pts * scale[:, None]

    return ScalarField(_eval, _grad)


def monomial_field(px: int, py: int = 0) -> ScalarField:
    """x^px * y^py with analytic gradient."""

    def _eval(pts):
        x = pts[:, 0]
        y = pts[:, 1] if pts.shape[1] > 1 else np.zeros_like(x)
        return x ** px * (y ** py if py else 1.0)

    def _grad(pts):
        x = pts[:, 0]
        y = pts[:, 1] if pts.shape[1] > 1 else np.zeros_like(x)
        g = np.zeros_like(pts)
        ypow = y ** py if py else np.ones_like(x)
        g[:, 0] = (px * x ** (px - 1) if px else 0.0) * ypow
        if pts.shape[1] > 1 and py:
            g[:, 1] = x ** px * py * y ** (py - 1)
        return g

    return ScalarField(_eval, _grad)


# ---------------------------------------------------------------------------
# expression parser (recursive descent)

_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt}


@dataclass(frozen=True)
class _Tok:
    kind: str  # num | name | op
    text: str
    pos: int


def _tokenize(src: str) -> list[_Tok]:
    toks = []
    i, n = 0, len(src)
    while i < n:
        ch = src[i]
        if ch.isspace():
            i += 1
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and src[i + 1].isdigit()):
            j = i
            while j < n and (src[j].isdigit() or src[j] == "."):
                j += 1
            if j < n and src[j] in "eE":
                k = j + 1
                if k < n and src[k] in "+-":
                    k += 1
                if k < n and src[k].isdigit():
                    j = k
                    while j < n and src[j].isdigit():
                        j += 1
            toks.append(_Tok("num", src[i:j], i))
            i = j
        elif ch.isalpha():
            j = i
            while j < n and src[j].isalpha():
                j += 1
            toks.append(_Tok("name", src[i:j], i))
            i = j
        elif ch in "+-*/^()":
            toks.append(_Tok("op", ch, i))
            i += 1
        else:
            raise ParseError(f"unexpected character {ch!r}", i)
    toks.append(_Tok("end", "", n))
    return toks


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.toks = _tokenize(src)
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect_op(self, text: str) -> None:
        tok = self.take()
        if tok.kind != "op" or tok.text != text:
            raise ParseError(f"expected {text!r}", tok.pos)

    def parse(self):
        node = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            raise ParseError(f"unexpected token {tok.text!r}", tok.pos)
        return node

    def expr(self):
        node = self.term()
        while self.peek().kind == "op" and self.peek().text in "+-":
            op = self.take().text
            node = ("bin", op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek().kind == "op" and self.peek().text in "*/":
            op = self.take().text
            node = ("bin", op, node, self.factor())
        return node

    def factor(self):
        node = self.base()
        if self.peek().kind == "op" and self.peek().text == "^":
            self.take()
            tok = self.take()
            neg = False
            if tok.kind == "op" and tok.text == "-":
                neg = True
                tok = self.take()
            if tok.kind != "num":
                raise ParseError("exponent must be a number", tok.pos)
            node = ("pow", node, -float(tok.text) if neg else float(tok.text))
        return node

    def base(self):
        tok = self.take()
        if tok.kind == "num":
            return ("num", float(tok.text))
        if tok.kind == "name":
            if tok.text in ("x", "y", "r"):
                return ("var", tok.text)
            if tok.text in _FUNCS:
                self.expect_op("(")
                arg = self.expr()
                self.expect_op(")")
                return ("call", tok.text, arg)
            raise ParseError(f"unknown identifier {tok.text!r}", tok.pos)
        if tok.kind == "op" and tok.text == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        if tok.kind == "op" and tok.text == "-":
            return ("neg", self.base())
        raise ParseError(f"unexpected token {tok.text or 'end of input'!r}", tok.pos)


def _ast_eval(node, x, y, r):
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind == "var":
        return {"x": x, "y": y, "r": r}[node[1]]
    if kind == "neg":
        return -_ast_eval(node[1], x, y, r)
    if kind == "pow":
        return _ast_eval(node[1], x, y, r) ** node[2]
    if kind == "bin":
        a = _ast_eval(node[2], x, y, r)
        b = _ast_eval(node[3], x, y, r)
        return {"+": np.add, "-": np.subtract, "*": np.multiply,
                "/": np.divide}[node[1]](a, b)
    if kind == "call":
        return _FUNCS[node[1]](_ast_eval(node[2], x, y, r))
    raise AssertionError(node)


def _ast_print(node) -> str:
    kind = node[0]
    if kind == "num":
        v = node[1]
        return repr(int(v)) if float(v).is_integer() and abs(v) < 1e15 else repr(v)
    if kind == "var":
        return node[1]
    if kind == "neg":
        return f"(-{_ast_print(node[1])})"
    if kind == "pow":
        e = node[2]
        etxt = repr(int(e)) if float(e).is_integer() else repr(e)
        return f"({_ast_print(node[1])})^{etxt}"
    if kind == "bin":
        return f"({_ast_print(node[2])} {node[1]} {_ast_print(node[3])})"
    if kind == "call":
        return f"{node[1]}({_ast_print(node[2])})"
    raise AssertionError(node)


def parse_field(source: str) -> ScalarField:
    """Parse an expression over x, y, r into a ScalarField (FD gradient)."""
    if not source or not source.strip():
        raise ParseError("empty expression", 0)
    ast = _Parser(source).parse()

    def _eval(pts):
        x = pts[:, 0]
        y = pts[:, 1] if pts.shape[1] > 1 else np.zeros_like(x)
        r = np.linalg.norm(pts, axis=1)
        return np.asarray(_ast_eval(ast, x, y, r), dtype=float) * np.ones_like(x)

    return ScalarField(_eval, None, source=_ast_print(ast))


# ---------------------------------------------------------------------------
# matrix / vector coefficient fields

class MatrixField:
    """Matrix-valued coefficient a^{ij}; evaluates to (n, dim, dim)."""

    def __init__(self, eval_fn: Callable[[np.ndarray], np.ndarray],
                 dim: int, constant: np.ndarray | None = None):
        self._eval = eval_fn
        self.dim = dim
        self.constant = constant  # set when the field is position-independent

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.asarray(self._eval(pts), dtype=float)

    @property
    def is_constant(self) -> bool:
        return self.constant is not None


class VectorField:
    """Vector-valued coefficient; evaluates to (n, dim)."""

    def __init__(self, eval_fn: Callable[[np.ndarray], np.ndarray],
                 dim: int, constant: np.ndarray | None = None):
        self._eval = eval_fn
        self.dim = dim
        self.constant = constant

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.asarray(self._eval(pts), dtype=float)

    @property
    def is_constant(self) -> bool:
        return self.constant is not None


def identity_matrix_field(dim: int) -> MatrixField:
    eye = np.eye(dim)
    return MatrixField(lambda pts: np.broadcast_to(eye, (pts.shape[0], dim, dim)).copy(),
                       dim, constant=eye)


def constant_matrix_field(matrix: np.ndarray) -> MatrixField:
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("coefficient matrix must be square")
    if np.max(np.abs(m - m.T)) > 1e-14 * max(1.0, np.max(np.abs(m))):
        raise ValueError("coefficient matrix a^{ij} must be symmetric")
    dim = m.shape[0]
    return MatrixField(lambda pts: np.broadcast_to(m, (pts.shape[0], dim, dim)).copy(),
                       dim, constant=m)


def zero_vector_field(dim: int) -> VectorField:
    z = np.zeros(dim)
    return VectorField(lambda pts: np.zeros((pts.shape[0], dim)), dim, constant=z)


def constant_vector_field(vec: np.ndarray) -> VectorField:
    v = np.asarray(vec, dtype=float)
    return VectorField(lambda pts: np.broadcast_to(v, (pts.shape[0], len(v))).copy(),
                       len(v), constant=v)


@dataclass(frozen=True)
class CoefficientSet:
    """Coefficients of the symmetric energy form.

    The form is  a^{ij} (d_i u)(d_j v) + b^i (d_i u) v + c^i u (d_j v) + d u v;
    assembly rejects b != c because the theory is for symmetric forms.
    """

    a: MatrixField
    b: VectorField
    c_vec: VectorField
    d: ScalarField
    dim: int

    def ellipticity_bound(self, pts: np.ndarray) -> float:
        """Smallest eigenvalue of a^{ij} over the sample points (lambda_0)."""
        A = self.a(pts)
        sym_err = np.max(np.abs(A - np.transpose(A, (0, 2, 1))))
        if sym_err > 1e-12 * max(1.0, np.max(np.abs(A))):
            raise ValueError("coefficient matrix a^{ij} is not symmetric pointwise")
        return float(np.min(np.linalg.eigvalsh(A)))


def schrodinger_coefficients(V: ScalarField, dim: int,
                             lam_shift: float = 0.0) -> CoefficientSet:
    """a = I, b = c = 0, d = V - lam_shift (the level-shifted potential form)."""
    return CoefficientSet(identity_matrix_field(dim), zero_vector_field(dim),
                          zero_vector_field(dim), V.minus_constant(lam_shift), dim)


def neumann_condition_margin(V: ScalarField, lam: float, pts: np.ndarray) -> float:
    """min over samples of  lam - V(x) - (1/2) x . grad V(x).

    A positive value certifies the expanding-domain monotonicity hypothesis
    for the level lam on the sampled set.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    vals = V(pts)
    grads = V.gradient(pts)
    return float(np.min(lam - vals - 0.5 * np.einsum("ni,ni->n", pts, grads)))
