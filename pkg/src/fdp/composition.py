"""Composition of diffusion components: observation-conditioned routing,
weighted score aggregation, product-of-experts reverse sampling, and the
joint training loss.

Weights live on the simplex (softmax with temperature). Sampling evaluates
the router once per inference call and aggregates per-step noise predictions
as sum_i w_i eps_i; components are always reduced in index order so
floating-point sums are reproducible. Training composes the same weighted sum
inside the noise-prediction MSE, so gradients reach every component, the
router, and the observation encoder in one pass with no hard selection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, reverse_mean
from .numerics import FeedForwardNet, Rng, as_f64

SIMPLEX_TOL = 1e-6


class CompositionError(ValueError):
    """Component/weight bookkeeping violation; names the offending index."""


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise stable softmax of logits / temperature."""
    z = as_f64(logits, "logits") / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class RouterCache:
    net_cache: object
    weights: np.ndarray


@dataclass
class Router:
    """Observation-conditioned weight head: MLP to N logits, softmax simplex."""

    net: FeedForwardNet
    temperature: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ValueError("router temperature must be positive")

    @property
    def n_components(self) -> int:
        return self.net.out_dim

    def route(self, obs_embedding: np.ndarray) -> np.ndarray:
        """Simplex weights for one embedding (or a batch of them)."""
        return self.route_with_cache(obs_embedding)[0]

    def route_with_cache(self, obs_embedding: np.ndarray):
        logits, net_cache = self.net.forward(obs_embedding)
        w = softmax(logits, self.temperature)
        return w, RouterCache(net_cache, w)

    def backward(self, cache: RouterCache, grad_weights: np.ndarray):
        """Gradients through softmax and the routing net.

        Returns (param grads, gradient wrt the observation embedding).
        """
        w = cache.weights
        g = as_f64(grad_weights, "grad_weights")
        inner = (g * w).sum(axis=-1, keepdims=True)
        dlogits = w * (g - inner) / self.temperature
        return self.net.backward(cache.net_cache, dlogits)

    def to_json(self) -> dict:
        return {"temperature": self.temperature, "net": self.net.to_json()}

    @classmethod
    def from_json(cls, obj: dict) -> "Router":
        return cls(FeedForwardNet.from_json(obj["net"]), float(obj["temperature"]))


def check_simplex(w: np.ndarray, tol: float = SIMPLEX_TOL) -> np.ndarray:
    w = as_f64(w, "weights")
    if np.any(w < -tol) or abs(float(w.sum()) - 1.0) > tol:
        raise CompositionError(f"weights not on the simplex: {w}")
    return w


@dataclass
class ComposedScore:
    """Weighted aggregate of per-component noise predictions."""

    per_component: list
    weights: np.ndarray
    aggregate: np.ndarray


def composed_score(
    components, weights, values: np.ndarray, obs_embedding, k
) -> ComposedScore:
    """aggregate = sum_i w_i eps_i(values, obs, k), components kept for analysis."""
    if len(components) != len(weights):
        raise CompositionError(
            f"{len(components)} components but {len(weights)} weights"
        )
    preds = []
    agg = None
    for i, comp in enumerate(components):
        eps_i, _ = comp.predict(values, obs_embedding, k)
        eps_i = np.asarray(eps_i, dtype=np.float64)
        if eps_i.shape != np.shape(values):
            raise CompositionError(
                f"component {i} output shape {eps_i.shape} != window shape "
                f"{np.shape(values)}"
            )
        preds.append(eps_i)
        agg = weights[i] * eps_i if agg is None else agg + weights[i] * eps_i
    return ComposedScore(preds, np.asarray(weights, dtype=np.float64), agg)


def select_top_k(weights: np.ndarray, top_k: int):
    """Indices of the top_k largest weights (ties to the lower index) and the
    renormalized simplex restricted to them. Indices are returned ascending."""
    w = check_simplex(weights)
    n = w.shape[-1]
    if not 1 <= top_k <= n:
        raise CompositionError(f"top_k={top_k} outside [1, {n}]")
    # stable sort on (-w, index): equal weights resolve to the lower index
    order = np.lexsort((np.arange(n), -w))
    idx = np.sort(order[:top_k])
    sub = w[idx]
    return idx, sub / sub.sum()


@dataclass
class SampleInfo:
    """Bookkeeping from one compositional inference call."""

    weights: np.ndarray  # full router output (length N)
    active: np.ndarray  # component indices actually evaluated
    denoiser_evals: int  # total per-component forward passes


def sample_values(
    components,
    weights: np.ndarray,
    obs_embedding,
    schedule: NoiseSchedule,
    dim: int,
    rng: Rng,
    top_k: int | None = None,
    x0_clip: float | None = None,
) -> tuple[np.ndarray, SampleInfo]:
    """Reverse-sample one flattened action window under the composed score.

    The weights are fixed for the whole call (router runs once per inference).
    With top_k set, only the top_k components by weight are evaluated and their
    weights are renormalized on the simplex.

    x0_clip bounds the implied clean-sample estimate each step before the
    posterior mean is formed; identical to the plain update whenever the
    estimate is already in range, and it keeps learned models on the data
    manifold (normalized actions live in [-1, 1]). Leave None for unbounded
    targets such as analytic Gaussian scores.
    """
    w = check_simplex(weights)
    if len(components) != w.shape[-1]:
        raise CompositionError(
            f"{len(components)} components but {w.shape[-1]} weights"
        )
    if top_k is not None and top_k != len(components):
        idx, w_used = select_top_k(w, top_k)
        active = [components[i] for i in idx]
    else:
        idx = np.arange(len(components))
        w_used = w
        active = list(components)
    values = rng.gaussian(dim)
    evals = 0
    for k in range(schedule.K, 0, -1):
        # condition on the schedule's step id (equals k for native schedules,
        # the original training index for stride-subsampled ones)
        score = composed_score(
            active, w_used, values, obs_embedding, int(schedule.step_ids[k - 1])
        )
        evals += len(active)
        if x0_clip is None:
            values = reverse_mean(schedule, values, score.aggregate, k)
        else:
            ab_k = schedule.alpha_bar[k]
            ab_prev = schedule.alpha_bar[k - 1]
            beta = schedule.betas[k - 1]
            x0 = (values - np.sqrt(1.0 - ab_k) * score.aggregate) / np.sqrt(ab_k)
            x0 = np.clip(x0, -x0_clip, x0_clip)
            values = (
                np.sqrt(ab_prev) * beta * x0
                + np.sqrt(1.0 - beta) * (1.0 - ab_prev) * values
            ) / (1.0 - ab_k)
        if k > 1:
            values = values + schedule.sigma[k - 1] * rng.gaussian(dim)
    return values, SampleInfo(w, idx, evals)


@dataclass
class JointGrads:
    """Gradients from one joint loss evaluation, keyed by parameter group."""

    encoder: dict[str, np.ndarray]
    router: dict[str, np.ndarray]
    components: list = field(default_factory=list)


def joint_loss(
    components,
    router: Router,
    obs_encoder: FeedForwardNet,
    batch: tuple[np.ndarray, np.ndarray],
    schedule: NoiseSchedule,
    rng: Rng,
) -> tuple[float, JointGrads]:
    """Composed noise-prediction MSE over a batch of (clean window, obs) pairs.

    Per sample: draw k uniform on [1, K] and eps ~ N(0, I), corrupt the window,
    and penalize || eps - sum_i w_i eps_i ||^2 with w = router(encoder(obs)).
    The loss is the mean over batch and coordinates; gradients flow through the
    weighted sum into every component, the router, and the encoder at once.
    """
    windows, obs = batch
    windows = as_f64(windows, "windows")
    obs = as_f64(obs, "obs")
    if windows.ndim != 2 or obs.ndim != 2 or windows.shape[0] != obs.shape[0]:
        raise ValueError("batch must be (B, window_dim) and (B, obs_dim)")
    b, dim = windows.shape
    n = len(components)

    emb, enc_cache = obs_encoder.forward(obs)
    w, router_cache = router.route_with_cache(emb)

    ks = rng.integers(1, schedule.K + 1, b)
    eps = rng.gaussian(b * dim).reshape(b, dim)
    ab = schedule.alpha_bar[ks][:, None]
    noisy = np.sqrt(ab) * windows + np.sqrt(1.0 - ab) * eps

    preds, caches = [], []
    for comp in components:
        p, c = comp.predict(noisy, emb, ks)
        preds.append(p)
        caches.append(c)
    agg = np.zeros_like(eps)
    for i in range(n):
        agg += w[:, i : i + 1] * preds[i]

    resid = agg - eps
    loss = float(np.mean(resid * resid))
    if not np.isfinite(loss):
        raise ValueError("joint loss is non-finite")

    dagg = 2.0 * resid / resid.size
    demb = np.zeros_like(emb)
    comp_grads = []
    for i in range(n):
        pg, _, de = components[i].backward(caches[i], w[:, i : i + 1] * dagg)
        comp_grads.append(pg)
        demb += de
    dw = np.stack([np.sum(dagg * preds[i], axis=1) for i in range(n)], axis=1)
    router_pg, demb_router = router.backward(router_cache, dw)
    demb += demb_router
    enc_pg, _ = obs_encoder.backward(enc_cache, demb)
    return loss, JointGrads(enc_pg, router_pg, comp_grads)
