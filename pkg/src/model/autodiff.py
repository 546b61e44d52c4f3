"""
최소 reverse-mode 자동미분 엔진.

- Tape: append-only 노드 목록(op kind, 입력 인덱스, local vjp)과 forward 값
- Var: Tape 위 노드 핸들 (값은 float64 ndarray, 스칼라는 0-d)
- 노드는 생성 순서가 곧 위상 순서 → backward 는 인덱스 역순으로 한 번씩 방문
- 고계 미분 없음. 디코더 Jacobian 의 파라미터 미분은 Jacobian 을 tape 연산으로 직접 쌓아서 얻는다
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from src.utils.errors import DomainError, ValidationError

Vjp = Callable[[np.ndarray], tuple]


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_finite(kind: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise DomainError(f"[Autodiff] {kind}: 비유한 결과(NaN/inf)")
    return value


class Tape:
    def __init__(self):
        self.kinds: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self._vjps: list[Vjp | None] = []
        self.leaves: list[int] = []

    def __len__(self) -> int:
        return len(self.values)

    def _push(self, kind: str, value: np.ndarray, parents: tuple[int, ...], vjp: Vjp | None) -> "Var":
        self.kinds.append(kind)
        self.parents.append(parents)
        self.values.append(value)
        self._vjps.append(vjp)
        return Var(self, len(self.values) - 1)

    def variable(self, value) -> "Var":
        """미분 대상 leaf"""
        v = self._push("leaf", _as_array(value), (), None)
        self.leaves.append(v.index)
        return v

    def constant(self, value) -> "Var":
        return self._push("const", _as_array(value), (), None)

    def lift(self, value) -> "Var":
        if isinstance(value, Var):
            if value.tape is not self:
                raise ValidationError("[Autodiff] 서로 다른 tape 의 값은 섞을 수 없습니다")
            return value
        return self.constant(value)

    def gradient(self, output: "Var", wrt: Sequence["Var"] | None = None) -> list[np.ndarray]:
        """
        스칼라 output 의 reverse 누적.
        wrt 미지정 시 모든 leaf (생성 순서) 에 대한 gradient 목록.
        """
        if output.tape is not self:
            raise ValidationError("[Autodiff] output 이 이 tape 의 노드가 아닙니다")
        if self.values[output.index].size != 1:
            raise ValidationError(f"[Autodiff] 스칼라 output 만 허용: shape={self.values[output.index].shape}")

        adj: list[np.ndarray | None] = [None] * (output.index + 1)
        adj[output.index] = np.ones_like(self.values[output.index])
        for i in range(output.index, -1, -1):
            g = adj[i]
            vjp = self._vjps[i]
            if g is None or vjp is None:
                continue
            grads = vjp(g)
            for p, gp in zip(self.parents[i], grads):
                if gp is None:
                    continue
                if adj[p] is None:
                    adj[p] = np.array(gp, dtype=np.float64)
                else:
                    adj[p] = adj[p] + gp

        targets = [v.index for v in wrt] if wrt is not None else list(self.leaves)
        out = []
        for idx in targets:
            g = adj[idx] if idx < len(adj) else None
            out.append(np.zeros_like(self.values[idx]) if g is None else g)
        return out


class Var:
    """Tape 노드 핸들 (DualValue)"""

    __slots__ = ("tape", "index")

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(kind={self.tape.kinds[self.index]}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise ValidationError("[Autodiff] 최소 하나의 입력은 Var 여야 합니다")


def _pair(a, b) -> tuple[Var, Var]:
    tape = _tape_of(a, b)
    return tape.lift(a), tape.lift(b)


def add(a, b) -> Var:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return a.tape._push("add", a.value + b.value, (a.index, b.index),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return a.tape._push("sub", a.value - b.value, (a.index, b.index),
                        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Var:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    return a.tape._push("mul", av * bv, (a.index, b.index),
                        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Var:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise DomainError("[Autodiff] div: 0 으로 나눔")
    out = _check_finite("div", av / bv)
    return a.tape._push("div", out, (a.index, b.index),
                        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / (bv * bv), bv.shape)))


def neg(x: Var) -> Var:
    return x.tape._push("neg", -x.value, (x.index,), lambda g: (-g,))


def exp(x: Var) -> Var:
    with np.errstate(over="ignore"):
        y = np.exp(x.value)
    _check_finite("exp", y)
    return x.tape._push("exp", y, (x.index,), lambda g: (g * y,))


def log(x: Var) -> Var:
    xv = x.value
    if np.any(xv <= 0):
        raise DomainError("[Autodiff] log: 정의역(x>0) 위반")
    return x.tape._push("log", np.log(xv), (x.index,), lambda g: (g / xv,))


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return x.tape._push("tanh", y, (x.index,), lambda g: (g * (1.0 - y * y),))


def square(x: Var) -> Var:
    xv = x.value
    return x.tape._push("square", xv * xv, (x.index,), lambda g: (2.0 * g * xv,))


def abs_(x: Var) -> Var:
    xv = x.value
    # 0 에서의 subgradient 는 0
    return x.tape._push("abs", np.abs(xv), (x.index,), lambda g: (g * np.sign(xv),))


def matmul(a, b) -> Var:
    a, b = _pair(a, b)
    A, B = a.value, b.value

    def vjp(g):
        if A.ndim == 1 and B.ndim == 1:
            return g * B, g * A
        if B.ndim == 1:
            return np.outer(g, B), A.T @ g
        if A.ndim == 1:
            return B @ g, np.outer(A, g)
        return g @ B.T, A.T @ g

    return a.tape._push("matmul", A @ B, (a.index, b.index), vjp)


def affine(x: Var, W, b) -> Var:
    """x @ W + b (한 노드)"""
    tape = _tape_of(x, W, b)
    x, W, b = tape.lift(x), tape.lift(W), tape.lift(b)
    X, Wv, bv = x.value, W.value, b.value

    def vjp(g):
        if X.ndim == 1:
            return Wv @ g, np.outer(X, g), _unbroadcast(g, bv.shape)
        return g @ Wv.T, X.T @ g, _unbroadcast(g, bv.shape)

    return tape._push("affine", X @ Wv + bv, (x.index, W.index, b.index), vjp)


def sum_(x: Var, axis: int | None = None, keepdims: bool = False) -> Var:
    xv = x.value
    shape = xv.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape._push("sum", np.sum(xv, axis=axis, keepdims=keepdims), (x.index,), vjp)


def mean(x: Var, axis: int | None = None, keepdims: bool = False) -> Var:
    count = x.value.size if axis is None else x.value.shape[axis]
    return sum_(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def take(x: Var, idx, axis: int = 0) -> Var:
    """np.take (반복 인덱스 허용, backward 는 add.at)"""
    xv = x.value
    index = np.asarray(idx) if not isinstance(idx, (int, np.integer)) else int(idx)

    def vjp(g):
        z = np.zeros_like(xv)
        sl = [slice(None)] * xv.ndim
        sl[axis] = index
        np.add.at(z, tuple(sl), g)
        return (z,)

    return x.tape._push("take", np.take(xv, index, axis=axis), (x.index,), vjp)


def concat(xs: Sequence[Var], axis: int = 0) -> Var:
    tape = _tape_of(*xs)
    xs = [tape.lift(x) for x in xs]
    sizes = [x.value.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._push("concat", np.concatenate([x.value for x in xs], axis=axis),
                      tuple(x.index for x in xs), vjp)


def elementwise(x: Var, fn: Callable[[np.ndarray], np.ndarray], dfn: Callable[[np.ndarray], np.ndarray],
                kind: str = "elementwise") -> Var:
    """값/도함수를 직접 주는 원소별 연산 (penalty 등)"""
    xv = x.value
    y = _check_finite(kind, np.asarray(fn(xv), dtype=np.float64))
    return x.tape._push(kind, y, (x.index,), lambda g: (g * dfn(xv),))


_PRIMITIVES: dict[str, Callable[..., Var]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "square": square,
    "abs": abs_,
    "matmul": matmul,
    "affine": affine,
    "sum": sum_,
    "mean": mean,
    "take": take,
    "concat": concat,
}


def primitive_eval(kind: str, *inputs, **kwargs) -> Var:
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise ValidationError(f"[Autodiff] 알 수 없는 primitive: {kind}")
    return fn(*inputs, **kwargs)


def gradient(tape: Tape, output: Var, wrt: Sequence[Var] | None = None) -> list[np.ndarray]:
    return tape.gradient(output, wrt)


def jacobian(vector_fn: Callable[[Var], Var], point) -> np.ndarray:
    """출력 r 마다 backward 1회 → (출력 수 × 입력 수)"""
    x0 = _as_array(point).reshape(-1)
    tape = Tape()
    x = tape.variable(x0)
    y = vector_fn(x)
    if not isinstance(y, Var):
        y = tape.lift(y)
    if y.value.ndim > 1:
        raise ValidationError(f"[Autodiff] jacobian: 1차원 출력만 허용: shape={y.shape}")
    if y.value.ndim == 0:
        return tape.gradient(y, wrt=[x])[0].reshape(1, -1)
    k = int(y.value.size)
    J = np.zeros((k, x0.size))
    for r in range(k):
        J[r] = tape.gradient(take(y, r, axis=0), wrt=[x])[0]
    return J


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    nondifferentiable: bool
    kink_coordinates: tuple[int, ...]


def _scalar_eval(fn: Callable[[Var], Var], x: np.ndarray) -> float:
    tape = Tape()
    out = fn(tape.variable(x))
    return float(np.asarray(out.value).reshape(-1)[0])


def gradient_check(fn: Callable[[Var], Var], point, h: float = 1e-5, floor: float = 1e-3,
                   kink_tol: float = 1e-2) -> GradCheckResult:
    """
    reverse-mode gradient 와 중앙차분 비교.
    - 상대오차 = |g − fd| / max(|g|, |fd|, floor)
    - 한쪽 차분(전진/후진)이 크게 다르면 미분불가 점(kink)으로 표시
    """
    if h <= 0:
        raise ValidationError(f"[Autodiff] h 는 양수여야 합니다: {h}")
    x0 = _as_array(point)
    tape = Tape()
    xv = tape.variable(x0)
    out = fn(xv)
    g = tape.gradient(out, wrt=[xv])[0].reshape(-1)

    flat = x0.reshape(-1)
    f0 = _scalar_eval(fn, x0)
    fd = np.zeros_like(flat)
    kinks = []
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = _scalar_eval(fn, xp.reshape(x0.shape))
        fm = _scalar_eval(fn, xm.reshape(x0.shape))
        fd[i] = (fp - fm) / (2.0 * h)
        forward = (fp - f0) / h
        backward = (f0 - fm) / h
        if abs(forward - backward) > kink_tol * max(1.0, abs(fd[i])):
            kinks.append(i)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)
    rel = np.abs(g - fd) / denom
    return GradCheckResult(
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        analytic=g,
        numeric=fd,
        nondifferentiable=bool(kinks),
        kink_coordinates=tuple(kinks),
    )
