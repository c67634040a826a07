"""DDPM machinery over interaction grids with analytic template-mixture denoisers.

Timesteps are 1-based: ``i`` runs from 1 to ``T`` and ``alpha_bar[0] == 1``.
Denoisers predict the clean state x0 directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import EmptyDataset, IoFailure, ShapeMismatch, UnknownCondition
from .geometry.grid import read_hopg, write_hopg

U_B_MAX = 0.75
U_B_MIN = 0.25
S_MIN = -0.2
S_MAX = -0.01


@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    weights: tuple | None = None  # per-step w_i for i = 1..T; default all ones

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        betas = np.concatenate([[0.0], np.linspace(self.beta_start, self.beta_end, self.T)])
        alphas = 1.0 - betas
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bar", np.cumprod(alphas))
        w = np.ones(self.T + 1) if self.weights is None else np.concatenate([[0.0], self.weights])
        if len(w) != self.T + 1:
            raise ValueError(f"weights need {self.T} entries")
        object.__setattr__(self, "w", np.asarray(w, dtype=float))

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end,
                "weights": None if self.weights is None else list(self.weights)}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        d = dict(d)
        if d.get("weights") is not None:
            d["weights"] = tuple(d["weights"])
        return cls(**d)


def forward_noise(x0: np.ndarray, i: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"noise shape {eps.shape} differs from state shape {x0.shape}")
    ab = schedule.alpha_bar[i]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


# --------------------------------------------------------------------------
# template bank and denoisers
# --------------------------------------------------------------------------

@dataclass
class TemplateBank:
    """Mixture prior: x0 ~ sum_k pi_k N(mu_k, sigma0^2 I) within each condition."""

    templates: Sequence[np.ndarray]
    weights: np.ndarray
    labels: list
    sigma0: float = 0.0
    half_extent: float = 0.15

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.labels = list(self.labels)
        if len(self.templates) == 0:
            raise EmptyDataset("template bank needs at least one template")
        if not (len(self.templates) == len(self.weights) == len(self.labels)):
            raise ShapeMismatch("templates, weights and labels must have equal length")
        if np.any(self.weights <= 0):
            raise ValueError("template weights must be positive")
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be >= 0")
        for lab in set(self.labels):
            idx = self.indices(lab)
            self.weights[idx] = self.weights[idx] / self.weights[idx].sum()

    @property
    def shape(self) -> tuple:
        return np.shape(self.templates[0])

    @property
    def conditions(self) -> list:
        return sorted(set(self.labels), key=str)

    def indices(self, condition) -> np.ndarray:
        if condition is None:
            return np.arange(len(self.labels))
        idx = np.array([k for k, lab in enumerate(self.labels) if lab == condition], dtype=int)
        if len(idx) == 0:
            raise UnknownCondition(f"no templates for condition {condition!r}")
        return idx

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        for k, (mu, w, lab) in enumerate(zip(self.templates, self.weights, self.labels)):
            name = f"template_{k:03d}.hopg"
            write_hopg(d / name, np.asarray(mu), self.half_extent)
            entries.append({"file": name, "weight": float(w), "label": lab})
        manifest = {"format": "hoiprior-bank", "version": 1, "sigma0": float(self.sigma0),
                    "half_extent": self.half_extent, "templates": entries}
        path = d / "bank.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "TemplateBank":
        p = Path(path)
        if p.is_dir():
            p = p / "bank.json"
        try:
            manifest = json.loads(p.read_text())
        except (OSError, ValueError) as exc:
            raise IoFailure(f"cannot read bank manifest {p}: {exc}") from exc
        templates, weights, labels = [], [], []
        for e in manifest["templates"]:
            data, _ = read_hopg(p.parent / e["file"])
            templates.append(data)
            weights.append(e["weight"])
            labels.append(e["label"])
        return cls(templates, np.array(weights), labels, manifest["sigma0"],
                   manifest.get("half_extent", 0.15))


class Denoiser(Protocol):
    schedule: NoiseSchedule
    shape: tuple

    def __call__(self, x: np.ndarray, i: int, condition) -> np.ndarray: ...


class MixtureDenoiser:
    """Exact posterior mean E[x0 | x_i] under a template-mixture prior."""

    def __init__(self, bank: TemplateBank, schedule: NoiseSchedule | None = None):
        self.bank = bank
        self.schedule = schedule or NoiseSchedule()
        self.shape = bank.shape
        self._stacks: dict = {}

    def _stack(self, condition):
        key = ("__all__",) if condition is None else condition
        if key not in self._stacks:
            idx = self.bank.indices(condition)
            mus = np.stack([np.asarray(self.bank.templates[k], dtype=float).ravel() for k in idx])
            w = self.bank.weights[idx]
            self._stacks[key] = (mus, np.log(w / w.sum()), np.einsum("kd,kd->k", mus, mus))
        return self._stacks[key]

    def responsibilities(self, x: np.ndarray, i: int, condition) -> np.ndarray:
        mus, logw, musq = self._stack(condition)
        ab = self.schedule.alpha_bar[i]
        var = ab * self.bank.sigma0**2 + 1.0 - ab
        xf = np.asarray(x, dtype=float).ravel()
        d2 = xf @ xf - 2.0 * math.sqrt(ab) * (mus @ xf) + ab * musq
        logits = logw - d2 / (2.0 * var)
        return np.exp(logits - logsumexp(logits))

    def __call__(self, x: np.ndarray, i: int, condition=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != self.shape:
            raise ShapeMismatch(f"state {x.shape} does not match bank {self.shape}")
        mus, _, _ = self._stack(condition)
        r = self.responsibilities(x, i, condition)
        ab = self.schedule.alpha_bar[i]
        s2 = self.bank.sigma0**2
        var = ab * s2 + 1.0 - ab
        mean = r @ mus
        # m_k = mu_k + sqrt(ab) s0^2 (x - sqrt(ab) mu_k) / var, written so s0 = 0 returns mu exactly
        if s2 > 0:
            mean = mean + math.sqrt(ab) * s2 * (x.ravel() - math.sqrt(ab) * mean) / var
        return mean.reshape(self.shape)


def fit_empirical_bank(grids, labels, k, seed: int = 0, half_extent: float = 0.15) -> TemplateBank:
    """k-means per condition; weights from cluster sizes, sigma0 from within-cluster spread.

    ``k`` is an int or a mapping label -> int.  sigma0 is the mean over samples of
    the per-entry RMS deviation from the assigned centroid.
    """
    from sklearn.cluster import KMeans

    grids = [np.asarray(g, dtype=float) for g in grids]
    labels = list(labels)
    if not grids:
        raise EmptyDataset("cannot fit a bank to an empty dataset")
    if len(grids) != len(labels):
        raise ShapeMismatch("grids and labels differ in length")
    shape = grids[0].shape
    data = np.stack([g.ravel() for g in grids])
    templates, weights, out_labels, devs = [], [], [], []
    for lab in sorted(set(labels), key=str):
        kk = k[lab] if isinstance(k, dict) else int(k)
        rows = data[[n for n, l in enumerate(labels) if l == lab]]
        if kk < 1 or kk > len(rows):
            raise EmptyDataset(f"condition {lab!r}: need 1 <= k <= {len(rows)} samples, got k={kk}")
        if kk == 1:
            centers = rows.mean(axis=0, keepdims=True)
            assign = np.zeros(len(rows), dtype=int)
        else:
            km = KMeans(n_clusters=kk, n_init=10, random_state=seed).fit(rows)
            assign = km.labels_
            centers = np.stack([rows[assign == c].mean(axis=0) for c in range(kk)])
        for c in range(kk):
            members = rows[assign == c]
            templates.append(centers[c].reshape(shape))
            weights.append(len(members))
            out_labels.append(lab)
        devs.extend(np.sqrt(((rows - centers[assign]) ** 2).mean(axis=1)))
    return TemplateBank(templates, np.array(weights, float), out_labels, float(np.mean(devs)), half_extent)


# --------------------------------------------------------------------------
# sampling and guidance
# --------------------------------------------------------------------------

def ancestral_sample(denoiser: Denoiser, condition=None, seed=0, schedule: NoiseSchedule | None = None,
                     shape: tuple | None = None) -> np.ndarray:
    """Reverse DDPM chain using the x0-parameterized posterior mean."""
    sch = schedule or denoiser.schedule
    shp = tuple(shape or denoiser.shape)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shp)
    ab = sch.alpha_bar
    for i in range(sch.T, 0, -1):
        x0 = denoiser(x, i, condition)
        c0 = math.sqrt(ab[i - 1]) * sch.betas[i] / (1.0 - ab[i])
        ct = math.sqrt(sch.alphas[i]) * (1.0 - ab[i - 1]) / (1.0 - ab[i])
        x = c0 * x0 + ct * x
        if i > 1:
            var = sch.betas[i] * (1.0 - ab[i - 1]) / (1.0 - ab[i])
            x = x + math.sqrt(var) * rng.standard_normal(shp)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("ancestral sample became non-finite")
    return x


def timestep_range(noise_range, T: int) -> tuple[int, int]:
    ua, ub = noise_range
    if not 0 < ua <= ub <= 1:
        raise ValueError(f"noise range must satisfy 0 < U_a <= U_b <= 1, got {noise_range}")
    lo = max(1, math.ceil(ua * T))
    hi = min(T, math.floor(ub * T))
    if hi < lo:
        hi = lo
    return lo, hi


def sds_gradient(x: np.ndarray, denoiser: Denoiser, condition=None, noise_range=(0.02, 0.98),
                 n_samples: int = 1, seed=0, schedule: NoiseSchedule | None = None,
                 return_loss: bool = False):
    """Monte-Carlo estimate of E_{eps,i}[w_i (x - x0_hat(x_i, i))]."""
    sch = schedule or denoiser.schedule
    rng = np.random.default_rng(seed)
    lo, hi = timestep_range(noise_range, sch.T)
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    loss = 0.0
    for _ in range(n_samples):
        i = int(rng.integers(lo, hi + 1))
        eps = rng.standard_normal(x.shape)
        resid = x - denoiser(forward_noise(x, i, eps, sch), i, condition)
        grad += sch.w[i] * resid
        loss += sch.w[i] * float(np.sum(resid * resid))
    grad /= n_samples
    if return_loss:
        return grad, loss / n_samples
    return grad


def stratified_timesteps(T: int, strata: int = 20, lo: float = 0.02, hi: float = 0.98) -> np.ndarray:
    edges = np.linspace(lo * T, hi * T, strata + 1)
    return np.clip(np.round(0.5 * (edges[:-1] + edges[1:])).astype(int), 1, T)


def rank_score(x: np.ndarray, denoiser: Denoiser, condition=None, seed=0,
               schedule: NoiseSchedule | None = None, strata: int = 20, repeats: int = 4) -> float:
    """s = -sum_i w_i |x - x0_hat_i(eps)|^2 over stratified timesteps, averaged over sub-seeds."""
    sch = schedule or denoiser.schedule
    x = np.asarray(x, dtype=float)
    steps = stratified_timesteps(sch.T, strata)
    total = 0.0
    for r in range(repeats):
        rng = np.random.default_rng([int(seed), r])
        for i in steps:
            eps = rng.standard_normal(x.shape)
            resid = x - denoiser(forward_noise(x, int(i), eps, sch), int(i), condition)
            total -= sch.w[i] * float(np.sum(resid * resid))
    return total / repeats


def adaptive_noise_bound(grid) -> float:
    """Upper noise fraction from the deepest interior SDF value.

    Thick objects (very negative minimum) get the largest bound ``U_B_MAX``;
    thin ones get ``U_B_MIN``.
    """
    values = getattr(grid, "values", grid)
    s = float(np.clip(np.min(values), S_MIN, S_MAX))
    t = (s - S_MIN) / (S_MAX - S_MIN)
    return U_B_MAX - t * (U_B_MAX - U_B_MIN)
