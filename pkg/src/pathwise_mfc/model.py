"""Control problem definition, benchmark instances and assumption probes.

Coefficients are vectorised callables.  The particle engine calls them with

* ``t``: scalar or array broadcastable against ``x[..., 0]``,
* ``x``: states, shape ``(..., M, n)``,
* ``mu``: a :class:`ParticleCloud` (possibly batched over the leading axes),
* ``u``: controls, shape ``(..., M, l)``; ``z``: marks, shape ``(..., 1, m)``.

``drift`` returns ``(..., M, n)``, ``diffusion`` ``(..., M, n, d)``, ``jump``
``(..., M, n)`` and ``running_cost`` ``(..., M)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np

from .measures import ParticleCloud, wasserstein2
from .rng import substream

Coefficient = Callable[..., np.ndarray]


class CoefficientError(ValueError):
    """A coefficient produced a non-finite value."""


def check_finite(name: str, value: np.ndarray, **inputs: Any) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        bad = np.argwhere(~np.isfinite(np.asarray(value)))
        where = tuple(int(i) for i in bad[0]) if bad.size else ()
        detail = ", ".join(f"{k}={_short(v)}" for k, v in inputs.items())
        raise CoefficientError(f"{name} returned a non-finite value at index {where} ({detail})")
    return value


def _short(v: Any) -> str:
    if isinstance(v, ParticleCloud):
        return f"cloud(N={v.n_particles}, mean={np.round(v.mean().ravel()[:3], 4).tolist()})"
    arr = np.asarray(v)
    if arr.size <= 4:
        return np.array2string(arr, precision=6)
    return f"array{arr.shape}"


@dataclass(frozen=True)
class ControlSet:
    """An axis-aligned box or a finite list of points in R^l."""

    lows: np.ndarray | None = None
    highs: np.ndarray | None = None
    points: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.points is not None:
            pts = np.atleast_2d(np.asarray(self.points, dtype=float))
            if pts.shape[0] == 0:
                raise ValueError("control set is empty")
            if not np.all(np.isfinite(pts)):
                raise ValueError("control set must be bounded")
            object.__setattr__(self, "points", pts)
        else:
            lo = np.atleast_1d(np.asarray(self.lows, dtype=float))
            hi = np.atleast_1d(np.asarray(self.highs, dtype=float))
            if lo.shape != hi.shape or np.any(lo > hi):
                raise ValueError("control box must satisfy lows <= highs")
            if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
                raise ValueError("control set must be bounded")
            object.__setattr__(self, "lows", lo)
            object.__setattr__(self, "highs", hi)

    @classmethod
    def box(cls, lows, highs) -> ControlSet:
        return cls(lows=lows, highs=highs)

    @classmethod
    def finite(cls, points) -> ControlSet:
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        return cls(points=pts)

    @property
    def dim(self) -> int:
        return self.points.shape[1] if self.points is not None else self.lows.size

    @property
    def is_finite(self) -> bool:
        return self.points is not None

    def contains(self, u: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if self.points is not None:
            d = np.abs(u[:, None, :] - self.points[None]).max(axis=-1)
            return d.min(axis=1) <= tol
        return np.all((u >= self.lows - tol) & (u <= self.highs + tol), axis=1)

    def sample(self, rng: np.random.Generator, k: int) -> np.ndarray:
        if self.points is not None:
            return self.points[rng.integers(0, self.points.shape[0], size=k)]
        return rng.uniform(self.lows, self.highs, size=(k, self.lows.size))

    def grid(self, per_axis: int, lows=None, highs=None) -> np.ndarray:
        """Tensor grid with ``per_axis`` points per axis inside the (sub)box."""
        if self.points is not None:
            return self.points.copy()
        lo = self.lows if lows is None else np.maximum(np.atleast_1d(lows), self.lows)
        hi = self.highs if highs is None else np.minimum(np.atleast_1d(highs), self.highs)
        axes = [np.linspace(l, h, per_axis) for l, h in zip(lo, hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True)
class IntensitySpec:
    """Finite intensity nu = total_rate * (mark distribution).

    Marks are either a finite list ``marks`` with probabilities ``mark_probs``
    or uniform on the box ``[mark_low, mark_high]``.
    """

    total_rate: float
    marks: np.ndarray | None = None
    mark_probs: np.ndarray | None = None
    mark_low: np.ndarray | None = None
    mark_high: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not (self.total_rate >= 0 and np.isfinite(self.total_rate)):
            raise ValueError("total_rate must be finite and nonnegative")
        if self.mark_low is not None:
            lo = np.atleast_1d(np.asarray(self.mark_low, dtype=float))
            hi = np.atleast_1d(np.asarray(self.mark_high, dtype=float))
            if lo.shape != hi.shape or np.any(lo > hi):
                raise ValueError("mark box must satisfy low <= high")
            object.__setattr__(self, "mark_low", lo)
            object.__setattr__(self, "mark_high", hi)
            return
        marks = np.array([[1.0]]) if self.marks is None else np.asarray(self.marks, dtype=float)
        if marks.ndim == 1:
            marks = marks[:, None]
        probs = (
            np.full(marks.shape[0], 1.0 / marks.shape[0])
            if self.mark_probs is None
            else np.asarray(self.mark_probs, dtype=float)
        )
        if probs.shape != (marks.shape[0],) or np.any(probs < 0):
            raise ValueError("one nonnegative probability per mark required")
        if self.total_rate > 0 and abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("mark distribution must sum to 1")
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "mark_probs", probs)

    @classmethod
    def constant_mark(cls, rate: float, mark: float = 1.0) -> IntensitySpec:
        return cls(total_rate=rate, marks=np.array([[mark]]), mark_probs=np.array([1.0]))

    @property
    def mark_dim(self) -> int:
        return self.mark_low.size if self.mark_low is not None else self.marks.shape[1]

    def sample_marks(self, rng: np.random.Generator, k: int) -> np.ndarray:
        if self.mark_low is not None:
            return rng.uniform(self.mark_low, self.mark_high, size=(k, self.mark_low.size))
        idx = rng.choice(self.marks.shape[0], size=k, p=self.mark_probs)
        return self.marks[idx]

    def to_dict(self) -> dict:
        if self.mark_low is not None:
            return {"total_rate": self.total_rate, "mark_low": self.mark_low.tolist(), "mark_high": self.mark_high.tolist()}
        return {"total_rate": self.total_rate, "marks": self.marks.tolist(), "mark_probs": self.mark_probs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> IntensitySpec:
        return cls(**{k: (np.asarray(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass(frozen=True)
class GaussianLaw:
    """Product Gaussian initial law; ``std == 0`` gives a Dirac mass."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "std", np.atleast_1d(np.asarray(self.std, dtype=float)) * np.ones_like(self.mean))
        if np.any(self.std < 0):
            raise ValueError("std must be nonnegative")

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        return self.mean + self.std * z

    def shifted(self, delta) -> GaussianLaw:
        return GaussianLaw(self.mean + np.asarray(delta, dtype=float), self.std)

    def moment(self, order: int = 2) -> float:
        """E|X|^p for 1-D laws (used by the moment probes); p must be 2 or 4."""
        m, s = float(self.mean[0]), float(self.std[0])
        if order == 2:
            return m * m + s * s
        if order == 4:
            return m**4 + 6 * m * m * s * s + 3 * s**4
        raise ValueError("only orders 2 and 4 are tabulated")


@dataclass(frozen=True)
class Problem:
    """Model data (b, sigma, gamma, f, U, Z, nu, lambda, T, p, M)."""

    dim_state: int
    dim_noise: int
    horizon: float
    drift: Coefficient
    diffusion: Coefficient
    jump: Coefficient
    running_cost: Coefficient
    control_set: ControlSet
    intensity: IntensitySpec
    initial_law: GaussianLaw
    declared_lipschitz: float
    moment_order: float = 4.0
    # False promises that b, sigma, gamma, f ignore mu; the engine then treats particles as independent
    mean_field_dependent: bool = True
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not self.moment_order > 2:
            raise ValueError("moment order must exceed 2")
        if self.dim_state < 1 or self.dim_noise < 1:
            raise ValueError("dimensions must be positive")
        if not self.declared_lipschitz > 0:
            raise ValueError("declared Lipschitz constant must be positive")
        if self.initial_law.dim != self.dim_state:
            raise ValueError("initial law dimension must match the state dimension")

    @property
    def dim_control(self) -> int:
        return self.control_set.dim

    def with_initial_law(self, law: GaussianLaw) -> Problem:
        return replace(self, initial_law=law)

    def with_intensity(self, intensity: IntensitySpec) -> Problem:
        return replace(self, intensity=intensity)


@dataclass(frozen=True)
class LqParams:
    """dX = (a X + b_gain u) dt + sigma dW + c X_- dN,  f = cost_q x^2 + cost_r u^2."""

    a: float = 0.5
    b_gain: float = 1.0
    sigma: float = 0.2
    jump_scale: float = 0.1
    cost_q: float = 1.0
    cost_r: float = 1.0

    def __post_init__(self) -> None:
        if not self.cost_r > 0:
            raise ValueError("cost_r must be positive")
        if self.cost_q < 0:
            raise ValueError("cost_q must be nonnegative")


def lq_control_bound(initial_mean: float) -> float:
    return 10.0 * (1.0 + abs(initial_mean))


@dataclass(frozen=True)
class _LqDrift:
    a: float
    b_gain: float

    def __call__(self, t, x, mu, u):
        return self.a * x + self.b_gain * u


@dataclass(frozen=True)
class _ConstDiffusion:
    value: float

    def __call__(self, t, x, mu, u):
        return np.full(x.shape + (1,), self.value)


@dataclass(frozen=True)
class _LinearJump:
    c: float

    def __call__(self, t, x, mu, z):
        return self.c * x


@dataclass(frozen=True)
class _LqCost:
    """q (x - s mean(mu))^2 + r u^2; s = 0 gives the plain regulator."""

    q: float
    r: float
    s: float = 0.0

    def __call__(self, t, x, mu, u):
        if self.s == 0.0:
            dev = x[..., 0]
        else:
            dev = x[..., 0] - self.s * mu.mean()[..., 0]
        return self.q * dev**2 + self.r * u[..., 0] ** 2


@dataclass(frozen=True)
class _ConstField:
    value: float

    def __call__(self, t, x, mu, last):
        return np.full(x.shape, self.value)


@dataclass(frozen=True)
class _ZeroCost:
    def __call__(self, t, x, mu, u):
        return np.zeros(x.shape[:-1])


def make_lq_problem(
    params: LqParams,
    intensity: IntensitySpec,
    initial_mean: float = 1.0,
    initial_std: float = 0.5,
    horizon: float = 1.0,
    coupling: float = 0.0,
) -> Problem:
    """The scalar linear-quadratic benchmark.

    ``coupling`` s > 0 replaces the state cost by ``q (x - s mean(mu))^2``,
    which makes the problem mean-field dependent (the "lq1d-meanfield" game).
    """
    a, bg, sg, c = params.a, params.b_gain, params.sigma, params.jump_scale
    bound = lq_control_bound(initial_mean)
    return Problem(
        dim_state=1,
        dim_noise=1,
        horizon=horizon,
        drift=_LqDrift(a, bg),
        diffusion=_ConstDiffusion(sg),
        jump=_LinearJump(c),
        running_cost=_LqCost(params.cost_q, params.cost_r, coupling),
        control_set=ControlSet.box([-bound], [bound]),
        intensity=intensity,
        initial_law=GaussianLaw(initial_mean, initial_std),
        declared_lipschitz=max(abs(a), abs(bg), abs(sg), abs(c), 1e-12),
        mean_field_dependent=coupling != 0.0,
        name="lq1d" if coupling == 0.0 else "lq1d-meanfield",
        params={
            "a": a, "b_gain": bg, "sigma": sg, "jump_scale": c, "cost_q": params.cost_q,
            "cost_r": params.cost_r, "coupling": coupling, "initial_mean": initial_mean,
            "initial_std": initial_std, "horizon": horizon,
        },
    )


def lq_params_of(problem: Problem) -> LqParams:
    p = problem.params
    return LqParams(p["a"], p["b_gain"], p["sigma"], p["jump_scale"], p["cost_q"], p["cost_r"])


# benchmark defaults used throughout the acceptance suite
LQ_DEFAULTS = {"a": 0.5, "b_gain": 1.0, "sigma": 0.2, "jump_scale": 0.1, "cost_q": 1.0, "cost_r": 1.0}


def constant_problem(
    drift: float = 0.0, diffusion: float = 0.0, jump: float = 0.0, cost: Coefficient | None = None, **kw
) -> Problem:
    """1-D problem with constant b, sigma, gamma (and zero cost unless given)."""
    return Problem(
        dim_state=1,
        dim_noise=1,
        horizon=kw.pop("horizon", 1.0),
        drift=_ConstField(drift),
        diffusion=_ConstDiffusion(diffusion),
        jump=_ConstField(jump),
        running_cost=cost or _ZeroCost(),
        control_set=kw.pop("control_set", ControlSet.box([-1.0], [1.0])),
        intensity=kw.pop("intensity", IntensitySpec.constant_mark(0.0)),
        initial_law=kw.pop("initial_law", GaussianLaw(0.0, 1.0)),
        declared_lipschitz=kw.pop("declared_lipschitz", 1.0),
        mean_field_dependent=kw.pop("mean_field_dependent", False),
        name=kw.pop("name", "constant"),
        **kw,
    )


def build_problem(name: str, overrides: dict | None = None) -> Problem:
    """Registry of built-in problems addressable by name."""
    ov = dict(overrides or {})
    rate = float(ov.pop("rate", 1.0))
    mean = float(ov.pop("initial_mean", 1.0))
    std = float(ov.pop("initial_std", 0.5))
    horizon = float(ov.pop("horizon", 1.0))
    coupling = float(ov.pop("coupling", 0.1 if name == "lq1d-meanfield" else 0.0))
    if name in ("lq1d", "lq1d-meanfield"):
        lq = {**LQ_DEFAULTS, **{k: float(v) for k, v in ov.items() if k in LQ_DEFAULTS}}
        unknown = set(ov) - set(LQ_DEFAULTS)
        if unknown:
            raise KeyError(f"unknown parameter(s) for {name}: {sorted(unknown)}")
        return make_lq_problem(LqParams(**lq), IntensitySpec.constant_mark(rate), mean, std, horizon, coupling)
    if ov:
        raise KeyError(f"unknown parameter(s) for {name}: {sorted(ov)}")
    if name == "frozen":
        return constant_problem(intensity=IntensitySpec.constant_mark(rate), horizon=horizon, name=name,
                                initial_law=GaussianLaw(mean, std))
    if name == "unit-drift":
        return constant_problem(1.0, intensity=IntensitySpec.constant_mark(rate), horizon=horizon, name=name,
                                initial_law=GaussianLaw(mean, std))
    raise KeyError(f"unknown problem {name!r}; known: lq1d, lq1d-meanfield, frozen, unit-drift")


@dataclass(frozen=True)
class QuadraticTestFunction:
    """phi(x) = x^T A x + b^T x + c."""

    A: np.ndarray
    b: np.ndarray
    c: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "A", np.atleast_2d(np.asarray(self.A, dtype=float)))
        object.__setattr__(self, "b", np.atleast_1d(np.asarray(self.b, dtype=float)))

    @classmethod
    def linear(cls, n: int = 1, k: int = 0) -> QuadraticTestFunction:
        e = np.zeros(n)
        e[k] = 1.0
        return cls(np.zeros((n, n)), e)

    @classmethod
    def square(cls, n: int = 1) -> QuadraticTestFunction:
        return cls(np.eye(n), np.zeros(n))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.einsum("...i,ij,...j->...", x, self.A, x) + x @ self.b + self.c

    def grad(self, x: np.ndarray) -> np.ndarray:
        return x @ (self.A + self.A.T) + self.b

    @property
    def hessian(self) -> np.ndarray:
        return self.A + self.A.T

    def scaled_sum(self, alpha: float, other: QuadraticTestFunction, beta: float) -> QuadraticTestFunction:
        return QuadraticTestFunction(alpha * self.A + beta * other.A, alpha * self.b + beta * other.b, alpha * self.c + beta * other.c)


def generator_values(problem: Problem, phi: QuadraticTestFunction, t, x, mu, u) -> np.ndarray:
    """L phi = b . grad phi + 1/2 tr(sigma sigma^T Hess phi), vectorised over ``(..., M)``."""
    b = check_finite("drift", problem.drift(t, x, mu, u), t=t, x=x, u=u)
    s = check_finite("diffusion", problem.diffusion(t, x, mu, u), t=t, x=x, u=u)
    h = phi.hessian
    first = np.einsum("...i,...i->...", b, phi.grad(x))
    second = 0.5 * np.einsum("...id,ij,...jd->...", s, h, s)
    return first + second


def eval_generator(problem: Problem, phi: QuadraticTestFunction, t: float, x, mu: ParticleCloud, u) -> float:
    x = np.asarray(x, dtype=float).reshape(1, problem.dim_state)
    u = np.asarray(u, dtype=float).reshape(1, problem.dim_control)
    return float(generator_values(problem, phi, t, x, mu, u)[0])


@dataclass
class ValidationReport:
    lipschitz: dict[str, float]
    growth_ratio: float
    mean_field_sensitivity: float
    declared_lipschitz: float
    flags: list[str]

    @property
    def ok(self) -> bool:
        return not self.flags


def validate_problem(
    problem: Problem,
    probe_budget: int,
    seed: int,
    state_box: float = 5.0,
    cloud_size: int = 16,
) -> ValidationReport:
    """Probe the Lipschitz (A2) and growth (A4) assumptions with random pairs.

    Reports the largest finite-difference ratio per coefficient and argument
    (x, mu, and u for b and sigma) and flags any ratio above 1.01 times the
    declared constant.
    """
    if probe_budget < 1:
        raise ValueError("probe_budget must be >= 1")
    rng = substream(seed, "validate")
    n, T = problem.dim_state, problem.horizon
    M = problem.declared_lipschitz
    ratios: dict[str, float] = {}
    growth = 0.0
    sensitivity = 0.0

    def rec(key: str, value: float) -> None:
        ratios[key] = max(ratios.get(key, 0.0), value)

    for _ in range(probe_budget):
        t = float(rng.uniform(0, T))
        x = rng.uniform(-state_box, state_box, size=(1, n))
        x2 = rng.uniform(-state_box, state_box, size=(1, n))
        mu = ParticleCloud(rng.uniform(-state_box, state_box, size=(cloud_size, n)))
        mu2 = ParticleCloud(rng.uniform(-state_box, state_box, size=(cloud_size, n)))
        u = problem.control_set.sample(rng, 1)
        u2 = problem.control_set.sample(rng, 1)
        z = problem.intensity.sample_marks(rng, 1)
        dx = float(np.linalg.norm(x - x2))
        dmu = wasserstein2(mu, mu2)
        du = float(np.linalg.norm(u - u2))

        for name, fn, last in (("drift", problem.drift, u), ("diffusion", problem.diffusion, u), ("jump", problem.jump, z)):
            base = check_finite(name, fn(t, x, mu, last), t=t, x=x, mu=mu)
            vx = check_finite(name, fn(t, x2, mu, last), t=t, x=x2, mu=mu)
            vm = check_finite(name, fn(t, x, mu2, last), t=t, x=x, mu=mu2)
            if dx > 0:
                rec(f"{name}:x", float(np.linalg.norm(vx - base)) / dx)
            if dmu > 0:
                rec(f"{name}:mu", float(np.linalg.norm(vm - base)) / dmu)
            sensitivity = max(sensitivity, float(np.linalg.norm(vm - base)))
            if name != "jump":
                vu = check_finite(name, fn(t, x, mu, u2), t=t, x=x, u=u2)
                if du > 0:
                    rec(f"{name}:u", float(np.linalg.norm(vu - base)) / du)
            else:
                scale = 1.0 + float(np.linalg.norm(x)) + float(mu.m2[0])
                growth = max(growth, float(np.linalg.norm(base)) / scale)
        fc = check_finite("running_cost", problem.running_cost(t, x, mu, u), t=t, x=x, u=u)
        fm = check_finite("running_cost", problem.running_cost(t, x, mu2, u), t=t, x=x, u=u)
        sensitivity = max(sensitivity, float(np.abs(fm - fc).max()))

    flags = [f"{k} ratio {v:.6g} exceeds declared {M:.6g}" for k, v in sorted(ratios.items()) if v > 1.01 * M]
    if growth > 1.01 * M:
        flags.append(f"jump growth ratio {growth:.6g} exceeds declared {M:.6g}")
    if not problem.mean_field_dependent and sensitivity > 1e-12:
        flags.append(f"coefficients depend on mu (change {sensitivity:.3g}) but the problem declares otherwise")
    return ValidationReport(ratios, growth, sensitivity, M, flags)
