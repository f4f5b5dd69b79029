"""Closed-form conditional noise predictors ε(x, t, c).

Four families are provided:

* ``gaussian``: exact Bayes predictor for data ``N(m_c, s_c² I)``.
* ``gmm``: exact Bayes predictor for an isotropic Gaussian mixture per condition.
* ``linear_random``: ``A_t x + g(c)`` with seeded random matrices.
* ``additive``: ``tanh(A_t x) + g(c)``, a nonlinear map with an additive condition offset.

All predictors accept states of shape ``(..., dim)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from . import noise
from .errors import BoundsError, ConfigurationError, ShapeError, UnknownConditionError
from .schedule import NoiseSchedule

NULL_ID = 0


@dataclass(frozen=True)
class Condition:
    """Abstract conditioning signal. ``is_null`` marks the unconditional branch φ."""

    id: int
    embedding: tuple[float, ...] | None = None
    is_null: bool = False

    def __post_init__(self) -> None:
        if self.embedding is not None:
            object.__setattr__(self, "embedding", tuple(float(v) for v in self.embedding))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def content_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


class Denoiser:
    """Base class. Subclasses implement :meth:`_eps` and :meth:`_params`."""

    variant: str = ""

    def __init__(self, schedule: NoiseSchedule, dim: int, condition_ids, null_id: int = NULL_ID):
        if dim < 1:
            raise ConfigurationError(f"dim must be >= 1, got {dim}")
        ids = sorted(int(i) for i in condition_ids)
        if null_id not in ids:
            raise ConfigurationError(f"null condition {null_id} missing from {ids}")
        self.schedule = schedule
        self.dim = int(dim)
        self.condition_ids = tuple(ids)
        self.null_id = int(null_id)

    # -- conditions -------------------------------------------------------

    def condition(self, cid: int) -> Condition:
        self._check_condition(cid)
        return Condition(cid, is_null=(cid == self.null_id))

    @property
    def null(self) -> Condition:
        return self.condition(self.null_id)

    def _check_condition(self, c) -> int:
        if isinstance(c, Condition):
            if c.embedding is not None and len(c.embedding) != self.dim:
                raise ShapeError(f"embedding dim {len(c.embedding)} != denoiser dim {self.dim}")
            cid = c.id
        else:
            cid = int(c)
        if cid not in self.condition_ids:
            raise UnknownConditionError(f"condition {cid} not in {list(self.condition_ids)}")
        return cid

    # -- predictions ------------------------------------------------------

    def eps(self, x, t: int, c) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0 or x.shape[-1] != self.dim:
            raise ShapeError(f"state shape {x.shape} does not end in dim {self.dim}")
        if not 0 <= t <= self.schedule.max_timestep:
            raise BoundsError(f"timestep {t} outside [0, {self.schedule.max_timestep}]")
        return self._eps(x, int(t), self._check_condition(c))

    def x0_pred(self, x, t: int, c) -> np.ndarray:
        """Tweedie estimate (x - √(1-ᾱ_t) ε) / √ᾱ_t."""
        ab = self.schedule.alpha_bar(t)
        x = np.asarray(x, dtype=np.float64)
        return (x - math.sqrt(1.0 - ab) * self.eps(x, t, c)) / math.sqrt(ab)

    def _eps(self, x: np.ndarray, t: int, cid: int) -> np.ndarray:
        raise NotImplementedError

    # -- serialization ----------------------------------------------------

    def _params(self) -> dict:
        raise NotImplementedError

    def to_config(self) -> dict:
        return {"variant": self.variant, "dim": self.dim, "null_id": self.null_id, **self._params()}

    def content_hash(self) -> str:
        return content_hash(self.to_config())

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dim={self.dim}, conditions={list(self.condition_ids)})"


def _vec_table(table: dict, dim: int, what: str) -> dict[int, np.ndarray]:
    out = {}
    for k, v in table.items():
        arr = np.array(v, dtype=np.float64)
        if arr.shape != (dim,):
            raise ShapeError(f"{what} for condition {k} has shape {arr.shape}, expected ({dim},)")
        arr.setflags(write=False)
        out[int(k)] = arr
    return out


class GaussianDenoiser(Denoiser):
    """Bayes-optimal ε for x0 ~ N(m_c, s_c² I)."""

    variant = "gaussian"

    def __init__(self, schedule, means: dict, scales: dict, null_id: int = NULL_ID):
        dim = len(next(iter(means.values())))
        super().__init__(schedule, dim, means.keys(), null_id)
        self.means = _vec_table(means, dim, "mean")
        self.scales = {int(k): float(v) for k, v in scales.items()}
        if set(self.scales) != set(self.means):
            raise ConfigurationError("means and scales must cover the same conditions")
        if any(s <= 0 for s in self.scales.values()):
            raise ConfigurationError("gaussian scales must be strictly positive")

    def _eps(self, x, t, cid):
        ab = self.schedule.alpha_bar(t)
        s2 = self.scales[cid] ** 2
        return math.sqrt(1.0 - ab) * (x - math.sqrt(ab) * self.means[cid]) / (ab * s2 + 1.0 - ab)

    def posterior_mean(self, x, t: int, c) -> np.ndarray:
        """E[x0 | x_t] computed directly from Gaussian conjugacy."""
        cid = self._check_condition(c)
        ab = self.schedule.alpha_bar(t)
        s2 = self.scales[cid] ** 2
        m = self.means[cid]
        return (math.sqrt(ab) * s2 * np.asarray(x) + (1.0 - ab) * m) / (ab * s2 + 1.0 - ab)

    def log_density(self, x, c) -> np.ndarray:
        cid = self._check_condition(c)
        s2 = self.scales[cid] ** 2
        r2 = np.sum((np.asarray(x) - self.means[cid]) ** 2, axis=-1)
        return -0.5 * r2 / s2 - 0.5 * self.dim * math.log(2 * math.pi * s2)

    def sample(self, c, seed: int, n: int) -> np.ndarray:
        cid = self._check_condition(c)
        z = noise.gaussian(seed, noise.Stream.DATA, cid, (n, self.dim))
        return self.means[cid] + self.scales[cid] * z

    def _params(self):
        return {
            "means": {str(k): v.tolist() for k, v in self.means.items()},
            "scales": {str(k): v for k, v in self.scales.items()},
        }


class GMMDenoiser(Denoiser):
    """Bayes-optimal ε for an isotropic Gaussian mixture per condition."""

    variant = "gmm"

    def __init__(self, schedule, components: dict, null_id: int = NULL_ID):
        tables = {}
        dim = None
        for k, comp in components.items():
            w = np.array(comp["weights"], dtype=np.float64)
            m = np.array(comp["means"], dtype=np.float64)
            s = np.array(comp["scales"], dtype=np.float64)
            if m.ndim != 2 or w.shape != (m.shape[0],) or s.shape != w.shape:
                raise ShapeError(f"inconsistent mixture shapes for condition {k}")
            dim = m.shape[1] if dim is None else dim
            if m.shape[1] != dim:
                raise ShapeError(f"mixture for condition {k} has dim {m.shape[1]}, expected {dim}")
            if np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=0, abs_tol=1e-12):
                raise ConfigurationError(f"weights for condition {k} must be >= 0 and sum to 1")
            if np.any(s <= 0):
                raise ConfigurationError(f"scales for condition {k} must be strictly positive")
            for arr in (w, m, s):
                arr.setflags(write=False)
            tables[int(k)] = (w, m, s)
        super().__init__(schedule, dim, tables.keys(), null_id)
        self.components = tables

    def _responsibilities(self, x, ab, cid):
        w, m, s = self.components[cid]
        var = ab * s**2 + 1.0 - ab
        diff = x[..., None, :] - math.sqrt(ab) * m
        logp = (
            np.log(np.where(w > 0, w, 1.0)) + np.where(w > 0, 0.0, -np.inf)
            - 0.5 * self.dim * np.log(var)
            - 0.5 * np.sum(diff**2, axis=-1) / var
        )
        resp = np.exp(logp - logsumexp(logp, axis=-1, keepdims=True))
        return resp, diff, var

    def _eps(self, x, t, cid):
        ab = self.schedule.alpha_bar(t)
        resp, diff, var = self._responsibilities(x, ab, cid)
        per_component = math.sqrt(1.0 - ab) * diff / var[:, None]
        return np.sum(resp[..., None] * per_component, axis=-2)

    def component_posterior_means(self, x, t: int, c) -> np.ndarray:
        cid = self._check_condition(c)
        ab = self.schedule.alpha_bar(t)
        _, m, s = self.components[cid]
        s2 = (s**2)[:, None]
        x = np.asarray(x, dtype=np.float64)[..., None, :]
        return (math.sqrt(ab) * s2 * x + (1.0 - ab) * m) / (ab * s2 + 1.0 - ab)

    def responsibilities(self, x, t: int, c) -> np.ndarray:
        cid = self._check_condition(c)
        return self._responsibilities(np.asarray(x, dtype=np.float64), self.schedule.alpha_bar(t), cid)[0]

    def log_density(self, x, c) -> np.ndarray:
        cid = self._check_condition(c)
        w, m, s = self.components[cid]
        diff = np.asarray(x, dtype=np.float64)[..., None, :] - m
        with np.errstate(divide="ignore"):
            logp = (
                np.log(w)
                - 0.5 * self.dim * np.log(2 * math.pi * s**2)
                - 0.5 * np.sum(diff**2, axis=-1) / s**2
            )
        return logsumexp(logp, axis=-1)

    def sample(self, c, seed: int, n: int) -> np.ndarray:
        cid = self._check_condition(c)
        w, m, s = self.components[cid]
        rng = noise.generator(seed, noise.Stream.DATA, cid)
        k = rng.choice(len(w), size=n, p=w)
        return m[k] + s[k, None] * rng.standard_normal((n, self.dim))

    def sample_mode(self, c, mode: int, seed: int, n: int) -> np.ndarray:
        """Draws from a single mixture component of condition ``c``."""
        cid = self._check_condition(c)
        _, m, s = self.components[cid]
        z = noise.gaussian(seed, noise.Stream.DATA, 1000 + mode, (n, self.dim))
        return m[mode] + s[mode] * z

    def _params(self):
        return {
            "components": {
                str(k): {"weights": w.tolist(), "means": m.tolist(), "scales": s.tolist()}
                for k, (w, m, s) in self.components.items()
            }
        }


@lru_cache(maxsize=4096)
def _seeded_matrix(seed: int, dim: int, t: int) -> np.ndarray:
    mat = noise.gaussian(seed, noise.Stream.PARAMS, t, (dim, dim)) / math.sqrt(dim)
    mat.setflags(write=False)
    return mat


class LinearRandomDenoiser(Denoiser):
    """ε = A_t x + g(c) with A_t i.i.d. N(0, 1/dim) entries drawn from ``seed``."""

    variant = "linear_random"

    def __init__(self, schedule, seed: int, offsets: dict, null_id: int = NULL_ID):
        dim = len(next(iter(offsets.values())))
        super().__init__(schedule, dim, offsets.keys(), null_id)
        self.seed = int(seed)
        self.offsets = _vec_table(offsets, dim, "offset")

    def matrix(self, t: int) -> np.ndarray:
        return _seeded_matrix(self.seed, self.dim, int(t))

    def state_map(self, x, t: int) -> np.ndarray:
        return np.asarray(x) @ self.matrix(t).T

    def _eps(self, x, t, cid):
        return self.state_map(x, t) + self.offsets[cid]

    def _params(self):
        return {
            "seed": self.seed,
            "T": self.schedule.T,
            "offsets": {str(k): v.tolist() for k, v in self.offsets.items()},
        }


class AdditiveDenoiser(LinearRandomDenoiser):
    """ε = tanh(A_t x) + g(c): nonlinear in x, condition enters only as an offset."""

    variant = "additive"

    def state_map(self, x, t: int) -> np.ndarray:
        return np.tanh(np.asarray(x) @ self.matrix(t).T)


_VARIANTS = {
    cls.variant: cls
    for cls in (GaussianDenoiser, GMMDenoiser, LinearRandomDenoiser, AdditiveDenoiser)
}


def eps_predict(denoiser: Denoiser, x, t: int, c) -> np.ndarray:
    return denoiser.eps(x, t, c)


def posterior_x0(denoiser: Denoiser, x, t: int, c) -> np.ndarray:
    return denoiser.x0_pred(x, t, c)


def from_config(schedule: NoiseSchedule, config: dict) -> Denoiser:
    variant = config.get("variant")
    if variant not in _VARIANTS:
        raise ConfigurationError(f"unknown denoiser variant {variant!r}")
    null_id = int(config.get("null_id", NULL_ID))
    try:
        if variant == "gaussian":
            den = GaussianDenoiser(schedule, config["means"], config["scales"], null_id)
        elif variant == "gmm":
            den = GMMDenoiser(schedule, config["components"], null_id)
        else:
            if int(config.get("T", schedule.T)) != schedule.T:
                raise ConfigurationError("denoiser T does not match schedule T")
            den = _VARIANTS[variant](schedule, config["seed"], config["offsets"], null_id)
    except KeyError as exc:
        raise ConfigurationError(f"denoiser config missing field {exc.args[0]!r}") from None
    if "dim" in config and int(config["dim"]) != den.dim:
        raise ShapeError(f"declared dim {config['dim']} != parameter dim {den.dim}")
    return den


class CallCounter:
    """Wraps a denoiser and counts ε evaluations (one per state per call)."""

    def __init__(self, denoiser: Denoiser):
        self._inner = denoiser
        self.calls = 0

    def __getattr__(self, name):
        return getattr(self._inner, name)

    def eps(self, x, t, c):
        x = np.asarray(x, dtype=np.float64)
        self.calls += int(np.prod(x.shape[:-1], dtype=int)) if x.ndim > 1 else 1
        return self._inner.eps(x, t, c)


# -- toy factories ---------------------------------------------------------


def matched_gaussian(schedule, dim: int = 8, mean: float = 0.0, scale: float = 1.0,
                     target_mean: float | None = None) -> GaussianDenoiser:
    """Conditions 0 (null) and 1 share ``N(mean, scale²)``; optional condition 2 at ``target_mean``."""
    means = {0: np.full(dim, mean), 1: np.full(dim, mean)}
    scales = {0: scale, 1: scale}
    if target_mean is not None:
        means[2] = np.full(dim, target_mean)
        scales[2] = scale
    return GaussianDenoiser(schedule, means, scales)


def toy_gmm(schedule, dim: int = 8, separation: float = 2.0, scale: float = 0.5,
            purity: float = 0.95) -> GMMDenoiser:
    """Two modes at ±separation/2 along the first axis.

    Condition 1 (source) puts weight ``purity`` on mode A, condition 2
    (target) on mode B, and the null condition mixes both equally.
    """
    axis = np.zeros(dim)
    axis[0] = separation / 2.0
    means = [(-axis).tolist(), axis.tolist()]
    scales = [scale, scale]
    return GMMDenoiser(schedule, {
        0: {"weights": [0.5, 0.5], "means": means, "scales": scales},
        1: {"weights": [purity, 1 - purity], "means": means, "scales": scales},
        2: {"weights": [1 - purity, purity], "means": means, "scales": scales},
    })


def random_offsets(seed: int, dim: int, n_conditions: int = 3, scale: float = 1.0) -> dict:
    rng = noise.generator(seed, noise.Stream.PARAMS, 0xFFFFFFFF)
    return {k: scale * rng.standard_normal(dim) for k in range(n_conditions)}


def random_linear(schedule, dim: int, seed: int, n_conditions: int = 3) -> LinearRandomDenoiser:
    return LinearRandomDenoiser(schedule, seed, random_offsets(seed, dim, n_conditions))


def random_additive(schedule, dim: int, seed: int, n_conditions: int = 3) -> AdditiveDenoiser:
    return AdditiveDenoiser(schedule, seed, random_offsets(seed, dim, n_conditions))


def condition_responsibility(denoiser: Denoiser, x, target) -> np.ndarray:
    """P(target | x) at t = 0 under a uniform prior over the non-null conditions.

    Only defined for the density-backed variants (gaussian, gmm).
    """
    if not hasattr(denoiser, "log_density"):
        raise ConfigurationError(f"{denoiser.variant} denoiser has no data density")
    tid = denoiser._check_condition(target)
    ids = [i for i in denoiser.condition_ids if i != denoiser.null_id]
    logp = np.stack([denoiser.log_density(x, i) for i in ids], axis=-1)
    resp = np.exp(logp - logsumexp(logp, axis=-1, keepdims=True))
    return resp[..., ids.index(tid)]


def draw_sources(denoiser: Denoiser, c, seed: int, n: int = 1) -> np.ndarray:
    """Clean samples that the source condition describes, shape (n, dim).

    For a mixture this is its dominant mode, so a condition switch is a real
    change of mode; variants without a density draw N(0, I).
    """
    if isinstance(denoiser, GMMDenoiser):
        cid = denoiser._check_condition(c)
        return denoiser.sample_mode(cid, int(np.argmax(denoiser.components[cid][0])), seed, n)
    if isinstance(denoiser, GaussianDenoiser):
        return denoiser.sample(c, seed, n)
    return noise.gaussian(seed, noise.Stream.DATA, 0, (n, denoiser.dim))
