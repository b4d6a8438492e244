"""Controller structures: monotone proportional-integral control and baselines.

The main controller pairs a per-bus monotone piecewise-linear proportional
term with a shared-gain consensus integral term.  Monotonicity is built
into the parameterization rather than projected after the fact: raw
unconstrained arrays map through softplus to partial weight sums that are
floored at EPS_W and to non-increasing biases, so every materialized
network is feasible and gradient steps cannot leave the feasible set.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ModelError, PoolError
from .grid import GridModel

EPS_W = 1e-6  # floor on partial weight sums (minimum slope of each branch)
EPS_K = 1e-6  # floor on the integral gain
SLOPE_SCALE = 1.1  # per-unit weight gain; sets the slope range Adam can reach

KIND_MONOTONE_PI = "monotone_pi"
KIND_MONOTONE_NN = "monotone_nn"
KIND_LINEAR_DROOP = "linear_droop"
KIND_LINEAR_PI = "linear_pi"
KIND_MLP_PI = "mlp_pi"

# integer codes handed to the numeric kernels
KIND_CODES = {
    KIND_MONOTONE_PI: 0,
    KIND_MONOTONE_NN: 1,
    KIND_LINEAR_DROOP: 2,
    KIND_LINEAR_PI: 3,
    KIND_MLP_PI: 4,
}


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def inv_softplus(y):
    """Inverse of softplus for y > 0 (used only for initialization)."""
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def materialize_branch(raw_w: np.ndarray, raw_gap: np.ndarray):
    """Raw arrays -> (weights, biases, partial sums) for one stacked branch.

    Each weight is a softplus-floored increment
    w_l = SLOPE_SCALE * softplus(raw) + EPS_W, so every partial sum is at
    least EPS_W and the slope of the branch can grow with the number of
    active units.  Biases start at zero and decrease by softplus(raw_gap)
    per unit, so the active set at any input is a prefix of the units.
    """
    w = SLOPE_SCALE * softplus(raw_w) + EPS_W
    S = np.cumsum(w, axis=-1)
    gaps = softplus(raw_gap)
    b = np.zeros(raw_w.shape)
    b[..., 1:] = -np.cumsum(gaps, axis=-1)
    return w, b, S


def branch_raw_grad(raw_w, raw_gap, grad_w, grad_b, negative: bool):
    """Chain rule from materialized (w, b) grads back to raw arrays."""
    sign = -SLOPE_SCALE if negative else SLOPE_SCALE
    g_raw_w = sign * grad_w * sigmoid(raw_w)
    # b_l = -sum of gaps up to l-1  ->  d/d gap_j = -sum_{l > j} grad_b_l
    tail = np.cumsum(grad_b[..., ::-1], axis=-1)[..., ::-1]
    g_raw_gap = -tail[..., 1:] * sigmoid(raw_gap)
    return g_raw_w, g_raw_gap


class MonotoneStack:
    """n independent scalar monotone functions built from stacked ReLU pairs.

    f_i(x) = sum_l w+_{il} relu(x + b+_{il}) + sum_l w-_{il} relu(-x + b-_{il})

    The positive branch is active only for x > 0 and the negative branch
    only for x < 0, both with strictly positive slope, so f_i(0) = 0
    exactly and f_i is non-decreasing everywhere.
    """

    def __init__(self, raw_wpos, raw_gpos, raw_wneg, raw_gneg, shared: bool = False):
        self.raw_wpos = np.atleast_2d(np.asarray(raw_wpos, dtype=float)).copy()
        self.raw_gpos = np.atleast_2d(np.asarray(raw_gpos, dtype=float)).copy()
        self.raw_wneg = np.atleast_2d(np.asarray(raw_wneg, dtype=float)).copy()
        self.raw_gneg = np.atleast_2d(np.asarray(raw_gneg, dtype=float)).copy()
        self.shared = shared
        d = self.raw_wpos.shape[1]
        if self.raw_gpos.shape[1] != d - 1 or self.raw_gneg.shape[1] != d - 1:
            raise ModelError("stack: gap arrays must have d-1 columns")
        self._mat = None

    @classmethod
    def from_materialized(cls, wpos, bpos, wneg, bneg):
        """Build directly from feasible (w, b) pairs, validating the invariants.

        Used for hand-constructed cases in tests; training always goes
        through the raw parameterization, which represents positive
        per-unit weight increments only.
        """
        wpos = np.atleast_2d(np.asarray(wpos, dtype=float))
        bpos = np.atleast_2d(np.asarray(bpos, dtype=float))
        wneg = np.atleast_2d(np.asarray(wneg, dtype=float))
        bneg = np.atleast_2d(np.asarray(bneg, dtype=float))
        Spos = np.cumsum(wpos, axis=1)
        Sneg = np.cumsum(wneg, axis=1)
        if np.any(Spos <= 0) or np.any(Sneg >= 0):
            raise ModelError("stack: partial weight sums must be positive (+) / negative (-)")
        for b in (bpos, bneg):
            if np.any(b[:, 0] != 0.0) or np.any(np.diff(b, axis=1) > 0):
                raise ModelError("stack: biases must start at 0 and be non-increasing")
        obj = cls.__new__(cls)
        obj.raw_wpos = inv_softplus(np.maximum(wpos - EPS_W, 1e-12) / SLOPE_SCALE)
        obj.raw_gpos = inv_softplus(np.maximum(-np.diff(bpos, axis=1), 1e-300))
        obj.raw_wneg = inv_softplus(np.maximum(-wneg - EPS_W, 1e-12) / SLOPE_SCALE)
        obj.raw_gneg = inv_softplus(np.maximum(-np.diff(bneg, axis=1), 1e-300))
        obj.shared = False
        obj._mat = (wpos, bpos, wneg, bneg)
        return obj

    @property
    def n(self) -> int:
        return self.raw_wpos.shape[0]

    @property
    def d(self) -> int:
        return self.raw_wpos.shape[1]

    def materialized(self):
        """(wpos, bpos, wneg, bneg), each (n, d)."""
        if self._mat is None:
            wpos, bpos, _ = materialize_branch(self.raw_wpos, self.raw_gpos)
            wneg_mag, bneg, _ = materialize_branch(self.raw_wneg, self.raw_gneg)
            self._mat = (wpos, bpos, -wneg_mag, bneg)
        return self._mat

    def invalidate(self):
        self._mat = None

    def __call__(self, x) -> np.ndarray:
        """Evaluate f_i(x_i) for a per-bus input vector (or scalar if n == 1)."""
        wpos, bpos, wneg, bneg = self.materialized()
        x = np.atleast_1d(np.asarray(x, dtype=float))
        zp = np.maximum(x[:, None] + bpos, 0.0)
        zn = np.maximum(-x[:, None] + bneg, 0.0)
        return np.sum(wpos * zp, axis=1) + np.sum(wneg * zn, axis=1)

    def slope(self, x) -> np.ndarray:
        """Local slope of each f_i at x_i (right-derivative at kinks)."""
        wpos, bpos, wneg, bneg = self.materialized()
        x = np.atleast_1d(np.asarray(x, dtype=float))
        ap = (x[:, None] + bpos) > 0
        an = (-x[:, None] + bneg) > 0
        return np.sum(wpos * ap, axis=1) - np.sum(wneg * an, axis=1)

    def max_slope(self) -> np.ndarray:
        """Per-bus upper bound on the slope: largest partial sum of either branch."""
        wpos, _, wneg, _ = self.materialized()
        sp = np.cumsum(wpos, axis=1).max(axis=1)
        sn = (-np.cumsum(wneg, axis=1)).max(axis=1)
        return np.maximum(sp, sn)

    def check_invariants(self):
        wpos, bpos, wneg, bneg = self.materialized()
        Spos = np.cumsum(wpos, axis=1)
        Sneg = np.cumsum(wneg, axis=1)
        assert np.all(Spos > 0), "positive branch partial sums must stay positive"
        assert np.all(Sneg < 0), "negative branch partial sums must stay negative"
        for b in (bpos, bneg):
            assert np.all(b[:, 0] == 0.0)
            assert np.all(np.diff(b, axis=1) <= 0)
        assert np.all(self(np.zeros(self.n)) == 0.0), "f(0) must be exactly zero"


def eval_monotone(stack: MonotoneStack, x: float) -> float:
    """Scalar convenience wrapper for a single-function stack."""
    if stack.n != 1:
        raise ModelError("eval_monotone expects a single-function stack")
    return float(stack(np.array([x]))[0])


def init_stack(n: int, d: int, rng: np.random.Generator, shared: bool = False,
               slope: float = 2.0, knot_gap: float = 0.01, noise: float = 0.2) -> MonotoneStack:
    """Small random start: per-unit increments near slope/d, knots near 0."""
    rows = 1 if shared else n
    w0 = float(inv_softplus(max(slope / d, 1e-4) / SLOPE_SCALE))
    g0 = float(inv_softplus(knot_gap))
    return MonotoneStack(
        w0 + noise * rng.standard_normal((rows, d)),
        g0 + noise * rng.standard_normal((rows, d - 1)),
        w0 + noise * rng.standard_normal((rows, d)),
        g0 + noise * rng.standard_normal((rows, d - 1)),
        shared=shared,
    )


class Controller:
    """Common interface: u = clamp(-g(omega) + k*s) with optional integral."""

    kind: str = ""
    has_integral: bool = False
    trained_mode: int | None = None

    @property
    def k(self) -> float:
        if not self.has_integral:
            return 0.0
        return float(softplus(self.raw_k) + EPS_K)

    def prop(self, omega: np.ndarray) -> np.ndarray:
        """The proportional part g(omega), one output per bus."""
        raise NotImplementedError

    def prop_slope(self, omega: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def act(self, omega: np.ndarray, s: np.ndarray, model: GridModel) -> np.ndarray:
        u = -self.prop(omega)
        if self.has_integral:
            u = u + self.k * np.asarray(s, dtype=float)
        return np.clip(u, model.u_min, model.u_max)

    def raw_parameters(self) -> dict[str, np.ndarray]:
        """Unconstrained parameter arrays, keyed by name (training surface)."""
        raise NotImplementedError

    def set_raw_parameters(self, params: dict[str, np.ndarray]):
        raise NotImplementedError

    def kernel_args(self) -> tuple:
        """(kind_code, stack arrays..., lin gain, mlp arrays..., k, integral flag)."""
        raise NotImplementedError

    def copy(self) -> "Controller":
        cls = type(self)
        obj = cls.__new__(cls)
        obj.__dict__.update(self.__dict__)
        obj.set_raw_parameters({k: v.copy() for k, v in self.raw_parameters().items()})
        return obj


_EMPTY2 = np.zeros((0, 0))
_EMPTY1 = np.zeros(0)


class MonotonePIController(Controller):
    """Per-bus monotone proportional term plus shared-gain consensus integral."""

    kind = KIND_MONOTONE_PI
    has_integral = True

    def __init__(self, stack: MonotoneStack, raw_k: float, trained_mode: int | None = None):
        self.stack = stack
        self.raw_k = float(raw_k)
        self.trained_mode = trained_mode

    @classmethod
    def init(cls, n: int, d: int = 20, seed=0, k: float = 1.0, shared: bool = False,
             trained_mode: int | None = None) -> "MonotonePIController":
        rng = np.random.default_rng(seed)
        return cls(init_stack(n, d, rng, shared=shared), float(inv_softplus(k - EPS_K)), trained_mode)

    def prop(self, omega):
        omega = np.asarray(omega, dtype=float)
        if self.stack.shared and self.stack.n == 1:
            wpos, bpos, wneg, bneg = self.stack.materialized()
            zp = np.maximum(omega[:, None] + bpos, 0.0)
            zn = np.maximum(-omega[:, None] + bneg, 0.0)
            return np.sum(wpos * zp, axis=1) + np.sum(wneg * zn, axis=1)
        return self.stack(omega)

    def prop_slope(self, omega):
        if self.stack.shared and self.stack.n == 1:
            wpos, bpos, wneg, bneg = self.stack.materialized()
            omega = np.atleast_1d(np.asarray(omega, dtype=float))
            ap = (omega[:, None] + bpos) > 0
            an = (-omega[:, None] + bneg) > 0
            return np.sum(wpos * ap, axis=1) - np.sum(wneg * an, axis=1)
        return self.stack.slope(omega)

    def max_slope(self) -> np.ndarray:
        return self.stack.max_slope()

    def raw_parameters(self):
        return {
            "wpos": self.stack.raw_wpos,
            "gpos": self.stack.raw_gpos,
            "wneg": self.stack.raw_wneg,
            "gneg": self.stack.raw_gneg,
            "k": np.array([self.raw_k]),
        }

    def set_raw_parameters(self, params):
        self.stack = MonotoneStack(
            params["wpos"], params["gpos"], params["wneg"], params["gneg"],
            shared=self.stack.shared,
        )
        self.raw_k = float(params["k"][0])

    def materialized_for_kernel(self, n: int):
        wpos, bpos, wneg, bneg = self.stack.materialized()
        if self.stack.shared and wpos.shape[0] == 1:
            wpos, bpos, wneg, bneg = (np.repeat(a, n, axis=0) for a in (wpos, bpos, wneg, bneg))
        return wpos, bpos, wneg, bneg

    def kernel_args(self):
        wpos, bpos, wneg, bneg = self.stack.materialized()
        return (KIND_CODES[self.kind], wpos, bpos, wneg, bneg, _EMPTY1,
                _EMPTY2, _EMPTY2, _EMPTY2, self.k, True)


class MonotoneNNController(MonotonePIController):
    """Monotone proportional control only: no integral state, no gain."""

    kind = KIND_MONOTONE_NN
    has_integral = False

    def __init__(self, stack: MonotoneStack, trained_mode: int | None = None):
        self.stack = stack
        self.raw_k = -np.inf
        self.trained_mode = trained_mode

    @classmethod
    def init(cls, n, d=20, seed=0, shared=False, trained_mode=None):
        rng = np.random.default_rng(seed)
        return cls(init_stack(n, d, rng, shared=shared), trained_mode)

    def raw_parameters(self):
        return {
            "wpos": self.stack.raw_wpos,
            "gpos": self.stack.raw_gpos,
            "wneg": self.stack.raw_wneg,
            "gneg": self.stack.raw_gneg,
        }

    def set_raw_parameters(self, params):
        self.stack = MonotoneStack(
            params["wpos"], params["gpos"], params["wneg"], params["gneg"],
            shared=self.stack.shared,
        )

    def kernel_args(self):
        wpos, bpos, wneg, bneg = self.stack.materialized()
        return (KIND_CODES[self.kind], wpos, bpos, wneg, bneg, _EMPTY1,
                _EMPTY2, _EMPTY2, _EMPTY2, 0.0, False)


class LinearDroopController(Controller):
    """u = -K omega with per-bus non-negative droop gains."""

    kind = KIND_LINEAR_DROOP
    has_integral = False

    def __init__(self, raw_gain: np.ndarray, trained_mode: int | None = None):
        self.raw_gain = np.asarray(raw_gain, dtype=float).copy()
        self.trained_mode = trained_mode

    @classmethod
    def init(cls, n, seed=0, gain: float = 1.0, trained_mode=None):
        rng = np.random.default_rng(seed)
        raw = float(inv_softplus(gain)) + 0.05 * rng.standard_normal(n)
        return cls(raw, trained_mode)

    @classmethod
    def from_gains(cls, gains, trained_mode=None):
        gains = np.asarray(gains, dtype=float)
        if np.any(gains <= 0):
            raise ModelError("droop gains must be positive")
        return cls(inv_softplus(gains), trained_mode)

    @property
    def gain(self) -> np.ndarray:
        return softplus(self.raw_gain)

    def prop(self, omega):
        return self.gain * np.asarray(omega, dtype=float)

    def prop_slope(self, omega):
        return self.gain * np.ones_like(np.asarray(omega, dtype=float))

    def raw_parameters(self):
        return {"gain": self.raw_gain}

    def set_raw_parameters(self, params):
        self.raw_gain = params["gain"]

    def kernel_args(self):
        return (KIND_CODES[self.kind], _EMPTY2, _EMPTY2, _EMPTY2, _EMPTY2,
                self.gain, _EMPTY2, _EMPTY2, _EMPTY2, 0.0, False)


class LinearPIController(Controller):
    """u = -Kp omega + k s with the same consensus integral dynamics."""

    kind = KIND_LINEAR_PI
    has_integral = True

    def __init__(self, raw_gain: np.ndarray, raw_k: float, trained_mode: int | None = None):
        self.raw_gain = np.asarray(raw_gain, dtype=float).copy()
        self.raw_k = float(raw_k)
        self.trained_mode = trained_mode

    @classmethod
    def init(cls, n, seed=0, gain: float = 1.0, k: float = 1.0, trained_mode=None):
        rng = np.random.default_rng(seed)
        raw = float(inv_softplus(gain)) + 0.05 * rng.standard_normal(n)
        return cls(raw, float(inv_softplus(k - EPS_K)), trained_mode)

    @property
    def gain(self) -> np.ndarray:
        return softplus(self.raw_gain)

    def prop(self, omega):
        return self.gain * np.asarray(omega, dtype=float)

    def prop_slope(self, omega):
        return self.gain * np.ones_like(np.asarray(omega, dtype=float))

    def raw_parameters(self):
        return {"gain": self.raw_gain, "k": np.array([self.raw_k])}

    def set_raw_parameters(self, params):
        self.raw_gain = params["gain"]
        self.raw_k = float(params["k"][0])

    def kernel_args(self):
        return (KIND_CODES[self.kind], _EMPTY2, _EMPTY2, _EMPTY2, _EMPTY2,
                self.gain, _EMPTY2, _EMPTY2, _EMPTY2, self.k, True)


class MLPPIController(Controller):
    """Unconstrained per-bus tanh network plus linear integral.

    No structural constraint on the proportional part; the network output
    at zero is subtracted so g(0) = 0.
    """

    kind = KIND_MLP_PI
    has_integral = True

    def __init__(self, w1, b1, w2, raw_k: float, trained_mode: int | None = None):
        self.w1 = np.asarray(w1, dtype=float).copy()
        self.b1 = np.asarray(b1, dtype=float).copy()
        self.w2 = np.asarray(w2, dtype=float).copy()
        self.raw_k = float(raw_k)
        self.trained_mode = trained_mode

    @classmethod
    def init(cls, n, d=20, seed=0, k: float = 1.0, scale: float = 0.3, trained_mode=None):
        rng = np.random.default_rng(seed)
        return cls(
            scale * rng.standard_normal((n, d)),
            scale * rng.standard_normal((n, d)),
            scale * rng.standard_normal((n, d)),
            float(inv_softplus(k - EPS_K)),
            trained_mode,
        )

    def prop(self, omega):
        omega = np.asarray(omega, dtype=float)
        th = np.tanh(self.w1 * omega[:, None] + self.b1)
        th0 = np.tanh(self.b1)
        return np.sum(self.w2 * (th - th0), axis=1)

    def prop_slope(self, omega):
        omega = np.asarray(omega, dtype=float)
        th = np.tanh(self.w1 * omega[:, None] + self.b1)
        return np.sum(self.w2 * self.w1 * (1.0 - th * th), axis=1)

    def raw_parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "k": np.array([self.raw_k])}

    def set_raw_parameters(self, params):
        self.w1, self.b1, self.w2 = params["w1"], params["b1"], params["w2"]
        self.raw_k = float(params["k"][0])

    def kernel_args(self):
        return (KIND_CODES[self.kind], _EMPTY2, _EMPTY2, _EMPTY2, _EMPTY2,
                _EMPTY1, self.w1, self.b1, self.w2, self.k, True)


class ControllerPool:
    """Ordered set of controllers available to a switching policy.

    All members that carry an integral term must share the same gain k;
    otherwise the pooled system would not have a common equilibrium and
    the switched integral state would be meaningless.
    """

    def __init__(self, controllers):
        self.controllers = list(controllers)
        if not self.controllers:
            raise PoolError("empty controller pool")
        ks = [c.k for c in self.controllers if c.has_integral]
        if ks and any(abs(k - ks[0]) > 1e-12 for k in ks):
            raise PoolError("pool members must share the same integral gain k")
        self.k = ks[0] if ks else 0.0

    def __len__(self):
        return len(self.controllers)

    def __getitem__(self, i):
        return self.controllers[i]

    def index_for_mode(self, mode: int) -> int:
        for i, c in enumerate(self.controllers):
            if c.trained_mode == mode:
                return i
        raise PoolError(f"no pool member trained for mode {mode}")


_KIND_TO_CLS = {
    KIND_MONOTONE_PI: MonotonePIController,
    KIND_MONOTONE_NN: MonotoneNNController,
    KIND_LINEAR_DROOP: LinearDroopController,
    KIND_LINEAR_PI: LinearPIController,
    KIND_MLP_PI: MLPPIController,
}

_FORMAT_VERSION = 1


def _fmt_array(a: np.ndarray) -> list[str]:
    a = np.atleast_2d(a)
    return [" ".join(repr(float(x)) for x in row) for row in a]


def save_controller(ctrl: Controller, path):
    """Versioned text serialization of the raw parameters plus a content hash."""
    lines = [f"version = {_FORMAT_VERSION}", f"kind = {ctrl.kind}"]
    tm = ctrl.trained_mode
    lines.append(f"trained_mode = {'none' if tm is None else int(tm)}")
    if isinstance(ctrl, MonotonePIController):
        lines.append(f"shared = {int(ctrl.stack.shared)}")
    for name, arr in sorted(ctrl.raw_parameters().items()):
        lines.append(f"[{name}]")
        lines.extend(_fmt_array(arr))
    payload = "\n".join(lines)
    digest = hashlib.sha256(payload.encode()).hexdigest()
    with open(path, "w") as fh:
        fh.write(payload + f"\nhash = {digest}\n")


def load_controller(path) -> Controller:
    with open(path) as fh:
        text = fh.read()
    body, _, tail = text.rstrip("\n").rpartition("\n")
    if not tail.startswith("hash = "):
        raise ModelError("controller file: missing content hash")
    if hashlib.sha256(body.encode()).hexdigest() != tail.split("=", 1)[1].strip():
        raise ModelError("controller file: content hash mismatch")

    fields: dict[str, str] = {}
    arrays: dict[str, list[list[float]]] = {}
    current = None
    for line in body.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            arrays[current] = []
        elif current is not None and "=" not in line:
            arrays[current].append([float(x) for x in line.split()])
        else:
            key, _, val = line.partition("=")
            fields[key.strip()] = val.strip()
            current = None

    if int(fields.get("version", -1)) != _FORMAT_VERSION:
        raise ModelError("controller file: unsupported version")
    kind = fields["kind"]
    if kind not in _KIND_TO_CLS:
        raise ModelError(f"controller file: unknown kind {kind!r}")
    tm = fields.get("trained_mode", "none")
    trained_mode = None if tm == "none" else int(tm)
    raw = {name: np.array(rows) for name, rows in arrays.items()}

    if kind in (KIND_MONOTONE_PI, KIND_MONOTONE_NN):
        stack = MonotoneStack(raw["wpos"], raw["gpos"], raw["wneg"], raw["gneg"],
                              shared=bool(int(fields.get("shared", "0"))))
        stack.check_invariants()
        if kind == KIND_MONOTONE_PI:
            return MonotonePIController(stack, float(raw["k"][0, 0]), trained_mode)
        return MonotoneNNController(stack, trained_mode)
    if kind == KIND_LINEAR_DROOP:
        return LinearDroopController(raw["gain"][0], trained_mode)
    if kind == KIND_LINEAR_PI:
        return LinearPIController(raw["gain"][0], float(raw["k"][0, 0]), trained_mode)
    return MLPPIController(raw["w1"], raw["b1"], raw["w2"], float(raw["k"][0, 0]), trained_mode)
