"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

A ``Tape`` records primitive operations in execution order; ``Tape.backward``
replays them in exact reverse order, accumulating adjoints. The op set is
deliberately small: exactly what a 1-D convolutional embedding network and
distance-based losses need.

Conventions:
  * everything is float64, row-major;
  * NaN/Inf anywhere is an error, not a silent value;
  * no broadcasting except scalar-tensor, with one documented extension:
    ``add``/``sub`` accept a trailing-shape bias against a batched operand
    (e.g. [B, D] + [D]), so batched forward passes need no reshape ops;
  * a tape is confined to a single thread between construction and
    ``backward``; tensors detached from any tape are immutable shared data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to the op being recorded."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the contract requires finite data."""


class TapeError(RuntimeError):
    """Tape usage violates its contract (wrong tape, non-scalar loss, ...)."""


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _require_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value in {where}")


class Tensor:
    """Handle to one node on a tape: a forward value plus its recipe."""

    __slots__ = ("tape", "index", "value", "requires_grad", "_inputs", "_backward")

    def __init__(self, tape, index, value, requires_grad, inputs, backward):
        self.tape = tape
        self.index = index
        self.value = value
        self.requires_grad = requires_grad
        self._inputs = inputs          # tuple of Tensor
        self._backward = backward      # callable(upstream) -> tuple of grads, or None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, node={self.index})"


class Tape:
    """Ordered record of primitive ops supporting one reverse sweep.

    Leaves created with ``leaf`` are differentiable parameters; ``constant``
    marks fixed data (inputs, labels) that never receives a gradient.
    """

    def __init__(self, validate: bool = True):
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []
        self.validate = validate

    def _append(self, value, requires_grad, inputs, backward) -> Tensor:
        if self.validate:
            _require_finite(value, f"node {len(self.nodes)}")
        t = Tensor(self, len(self.nodes), value, requires_grad, inputs, backward)
        self.nodes.append(t)
        return t

    def leaf(self, value) -> Tensor:
        """Register a differentiable parameter tensor."""
        arr = _as_f64(value)
        _require_finite(arr, "leaf")
        t = self._append(arr, True, (), None)
        self.leaves.append(t)
        return t

    def constant(self, value) -> Tensor:
        """Register fixed input data; excluded from the gradient map."""
        arr = _as_f64(value)
        _require_finite(arr, "constant")
        return self._append(arr, False, (), None)

    def _own(self, t: Tensor) -> None:
        if t.tape is not self:
            raise TapeError("tensor belongs to a different tape")

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse sweep from a scalar loss node.

        Returns a gradient for every leaf on this tape; leaves the loss does
        not depend on get zeros of their own shape.
        """
        self._own(loss)
        if loss.value.shape != ():
            raise TapeError(f"loss must be scalar, got shape {loss.value.shape}")
        adjoint: dict[int, np.ndarray] = {loss.index: np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes[: loss.index + 1]):
            if node._backward is None:
                continue  # leaves and constants keep their accumulated adjoint
            up = adjoint.pop(node.index, None)
            if up is None:
                continue
            grads = node._backward(up)
            for inp, g in zip(node._inputs, grads):
                if g is None or not _needs_grad(inp):
                    continue
                acc = adjoint.get(inp.index)
                if acc is None:
                    # pass-through grads may alias the upstream buffer
                    if g is up or not g.flags.writeable:
                        g = g.copy()
                    adjoint[inp.index] = g
                else:
                    acc += g
        out = {}
        for lf in self.leaves:
            g = adjoint.get(lf.index)
            out[lf] = np.zeros_like(lf.value) if g is None else g
        return out


def _needs_grad(t: Tensor) -> bool:
    # interior nodes always carry adjoints; only constants are pruned
    return t.requires_grad or t._backward is not None


def _binary_shapes(kind: str, a: Tensor, b: Tensor) -> str:
    """Classify an add/sub operand pair: 'same', 'scalar_a/b', or 'bias_b'."""
    sa, sb = a.value.shape, b.value.shape
    if sa == sb:
        return "same"
    if sa == ():
        return "scalar_a"
    if sb == ():
        return "scalar_b"
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return "bias_b"
    raise ShapeError(f"{kind}: shapes {sa} and {sb} do not conform")


def _reduce_to(shape: tuple, g: np.ndarray) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = a.tape
    tape._own(a), tape._own(b)
    _binary_shapes("add", a, b)

    def backward(up):
        return (_reduce_to(a.value.shape, up), _reduce_to(b.value.shape, up))

    return tape._append(a.value + b.value, False, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = a.tape
    tape._own(a), tape._own(b)
    _binary_shapes("sub", a, b)

    def backward(up):
        return (_reduce_to(a.value.shape, up), _reduce_to(b.value.shape, -up))

    return tape._append(a.value - b.value, False, (a, b), backward)


def scale(a: Tensor, factor) -> Tensor:
    """Multiply by a constant scalar or a constant array of the same shape."""
    tape = a.tape
    tape._own(a)
    f = _as_f64(factor)
    _require_finite(f, "scale factor")
    if f.shape != () and f.shape != a.value.shape:
        raise ShapeError(f"scale: factor shape {f.shape} vs operand {a.value.shape}")

    def backward(up):
        return (up * f,)

    return tape._append(a.value * f, False, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product for 1-D and 2-D operands with equal inner dims."""
    tape = a.tape
    tape._own(a), tape._own(b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ShapeError(f"matmul: ranks must be 1 or 2, got {av.ndim} and {bv.ndim}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dims {av.shape[-1]} != {bv.shape[0]}")

    def backward(up):
        up = np.asarray(up)
        if av.ndim == 1 and bv.ndim == 1:        # dot -> scalar
            return (up * bv, up * av)
        if av.ndim == 2 and bv.ndim == 1:        # [m,k]@[k] -> [m]
            return (np.outer(up, bv), av.T @ up)
        if av.ndim == 1 and bv.ndim == 2:        # [k]@[k,n] -> [n]
            return (bv @ up, np.outer(av, up))
        return (up @ bv.T, av.T @ up)            # [m,k]@[k,n] -> [m,n]

    return tape._append(av @ bv, False, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    """Elementwise max(x, 0); subgradient at 0 is 0."""
    tape = a.tape
    tape._own(a)
    mask = a.value > 0.0

    def backward(up):
        return (up * mask,)

    return tape._append(np.where(mask, a.value, 0.0), False, (a,), backward)


def global_avg_pool(a: Tensor) -> Tensor:
    """Mean over the last axis: [..., L] -> [...]; a 1-D input yields a scalar."""
    tape = a.tape
    tape._own(a)
    if a.value.ndim < 1:
        raise ShapeError("global-average-pool: input must have at least 1 axis")
    n = a.value.shape[-1]

    def backward(up):
        return (np.broadcast_to(np.asarray(up)[..., None] / n, a.value.shape),)

    return tape._append(a.value.mean(axis=-1), False, (a,), backward)


def element_log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Elementwise natural log; values below ``floor`` are clamped first.

    With the default floor of 0 any non-positive input is a numeric error;
    a positive floor gives the clamped-log semantics used by the
    cross-entropy path (zero gradient in the clamped region).
    """
    tape = a.tape
    tape._own(a)
    if floor > 0.0:
        clamped = np.maximum(a.value, floor)
        live = a.value >= floor
    else:
        if np.any(a.value <= 0.0):
            raise NumericError("element-log: non-positive input without a floor")
        clamped = a.value
        live = True

    def backward(up):
        return (up * live / clamped,)

    return tape._append(np.log(clamped), False, (a,), backward)


def log_sum_exp(a: Tensor) -> Tensor:
    """Max-shifted log-sum-exp over the last axis: [C] -> scalar, [B, C] -> [B]."""
    tape = a.tape
    tape._own(a)
    if a.value.ndim not in (1, 2):
        raise ShapeError(f"log-sum-exp: rank must be 1 or 2, got {a.value.ndim}")
    m = a.value.max(axis=-1, keepdims=True)
    ex = np.exp(a.value - m)
    s = ex.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).reshape(a.value.shape[:-1])
    softmax = ex / s

    def backward(up):
        return (np.asarray(up)[..., None] * softmax,)

    return tape._append(out, False, (a,), backward)


def sq_euclidean(a: Tensor, b: Tensor, pairwise: bool = False) -> Tensor:
    """Squared Euclidean distance.

    Modes:
      * vectors [D], [D] -> scalar;
      * rowwise [B, D], [B, D] -> [B];
      * pairwise=True: [B, D], [C, D] -> [B, C].
    """
    tape = a.tape
    tape._own(a), tape._own(b)
    av, bv = a.value, b.value
    if pairwise:
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
            raise ShapeError(
                f"squared-euclidean-distance(pairwise): need [B,D],[C,D], got {av.shape}, {bv.shape}")
        diff = av[:, None, :] - bv[None, :, :]            # [B, C, D]
        out = np.einsum("bcd,bcd->bc", diff, diff)

        def backward(up):
            w = 2.0 * np.asarray(up)[:, :, None] * diff   # [B, C, D]
            return (w.sum(axis=1), -w.sum(axis=0))

        return tape._append(out, False, (a, b), backward)

    if av.shape != bv.shape or av.ndim not in (1, 2):
        raise ShapeError(
            f"squared-euclidean-distance: need matching vectors or [B,D] pairs, got {av.shape}, {bv.shape}")
    diff = av - bv
    out = np.asarray((diff * diff).sum(axis=-1))

    def backward(up):
        w = 2.0 * np.asarray(up)[..., None] * diff if av.ndim == 2 else 2.0 * up * diff
        return (w, -w)

    return tape._append(out, False, (a, b), backward)


def _pad_amount(padding, kernel: int) -> int:
    if padding == "same":
        return (kernel - 1) // 2
    if padding == "valid":
        return 0
    p = int(padding)
    if p < 0:
        raise ShapeError(f"conv1d: negative padding {p}")
    return p


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding="valid") -> Tensor:
    """Cross-correlation along the last axis (no kernel flip).

    ``x`` is [C_in, L] or [B, C_in, L]; ``w`` is [C_out, C_in, K]; optional
    ``bias`` is [C_out], added per output channel. Output length is
    (L + 2*pad - K)//stride + 1; ``padding`` may be "valid", "same"
    (left-biased for even kernels), or an explicit integer.
    """
    tape = x.tape
    tape._own(x), tape._own(w)
    xv, wv = x.value, w.value
    single = xv.ndim == 2
    if single:
        xv = xv[None]
    if xv.ndim != 3 or wv.ndim != 3:
        raise ShapeError(f"conv1d: need x [B,C,L] and w [Co,Ci,K], got {x.value.shape}, {wv.shape}")
    bsz, cin, length = xv.shape
    cout, cin_w, k = wv.shape
    if cin != cin_w:
        raise ShapeError(f"conv1d: input channels {cin} != kernel channels {cin_w}")
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be >= 1, got {stride}")
    pad = _pad_amount(padding, k)
    if k > length + 2 * pad:
        raise ShapeError(f"conv1d: kernel length {k} exceeds padded signal length {length + 2 * pad}")
    if bias is not None:
        tape._own(bias)
        if bias.value.shape != (cout,):
            raise ShapeError(f"conv1d: bias shape {bias.value.shape} != ({cout},)")

    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad))) if pad else xv
    lout = (length + 2 * pad - k) // stride + 1
    sb, sc, sl = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(bsz, cin, k, lout), strides=(sb, sc, sl, sl * stride))
    # one big GEMM: [Co, Ci*K] @ [Ci*K, B*Lout]
    cols = windows.transpose(1, 2, 0, 3).reshape(cin * k, bsz * lout)
    y = (wv.reshape(cout, cin * k) @ cols).reshape(cout, bsz, lout).transpose(1, 0, 2)
    if bias is not None:
        y += bias.value[None, :, None]
    if single:
        y = y[0]

    def backward(up):
        g = np.asarray(up)
        if single:
            g = g[None]
        g_mat = g.transpose(1, 0, 2).reshape(cout, bsz * lout)
        grad_w = (g_mat @ cols.T).reshape(cout, cin, k)
        # dL/dx: scatter w^T @ g back through the strided windows
        t = (wv.reshape(cout, cin * k).T @ g_mat).reshape(cin, k, bsz, lout)
        gxp = np.zeros_like(xp)
        span = stride * (lout - 1) + 1
        for j in range(k):
            gxp[:, :, j:j + span:stride] += t[:, j].transpose(1, 0, 2)
        grad_x = gxp[:, :, pad:pad + length] if pad else gxp
        if single:
            grad_x = grad_x[0]
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    inputs = (x, w) if bias is None else (x, w, bias)
    return tape._append(y, False, inputs, backward)


@dataclass
class GradCheckReport:
    """Per-coordinate comparison of tape gradients against central differences."""
    passed: bool
    max_rel_err: float
    worst_param: int
    worst_coord: int
    rel_errs: list = field(repr=False, default_factory=list)


def grad_check(build, params: list[np.ndarray], step: float = 1e-5,
               tol: float = 1e-4, atol: float = 1e-7) -> GradCheckReport:
    """Check tape gradients of ``build`` against central finite differences.

    ``build(tape, leaves)`` must record a scalar loss from the given leaf
    tensors. Relative error uses a floor of ``atol/tol`` so near-zero
    gradients are judged absolutely.
    """
    if step <= 0.0:
        raise ValueError("grad_check: step must be positive")
    params = [_as_f64(p).copy() for p in params]

    tape = Tape()
    leaves = [tape.leaf(p) for p in params]
    loss = build(tape, leaves)
    if loss.value.shape != ():
        raise TapeError("grad_check: build must produce a scalar loss")
    grads = tape.backward(loss)
    analytic = [grads[lf] for lf in leaves]

    def eval_at(perturbed) -> float:
        t = Tape()
        ls = [t.leaf(p) for p in perturbed]
        out = build(t, ls)
        val = float(out.value)
        if not np.isfinite(val):
            raise NumericError("grad_check: non-finite loss near theta0")
        return val

    floor = atol / tol
    rel_errs = []
    max_err, worst_param, worst_coord = 0.0, -1, -1
    for i, p in enumerate(params):
        errs = np.zeros(p.size)
        flat = p.reshape(-1)
        for j in range(p.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = eval_at(params)
            flat[j] = orig - step
            f_minus = eval_at(params)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[i].reshape(-1)[j]
            errs[j] = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if errs[j] > max_err:
                max_err, worst_param, worst_coord = errs[j], i, j
        rel_errs.append(errs.reshape(p.shape))
    return GradCheckReport(passed=max_err <= tol, max_rel_err=max_err,
                           worst_param=worst_param, worst_coord=worst_coord,
                           rel_errs=rel_errs)
