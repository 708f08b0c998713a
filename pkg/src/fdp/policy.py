"""The factorized policy aggregate: observation encoding, joint training of
components + router + encoder, compositional inference, receding-horizon
rollout, and checkpoint I/O.

The policy follows the estimator convention: construct with hyperparameters,
``fit(dataset)`` trains in place and returns self (log under
``training_log_``), ``predict``/``act`` sample an action window for one
observation. A single-component policy with its (constant) softmax weight of
1.0 is exactly the monolithic diffusion-policy baseline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .composition import Router, SampleInfo, check_simplex, sample_values
from .diffusion import NoiseSchedule, make_schedule
from .numerics import Adam, DimensionMismatchError, FeedForwardNet, Rng, as_f64

CHECKPOINT_FORMAT = "fdp-checkpoint"
CHECKPOINT_VERSION = 1
NORMALIZED_CLAMP = 1.05  # post-sampling clamp on normalized action entries


def sinusoidal_step_embedding(k, dim: int = 16) -> np.ndarray:
    """Fixed sin/cos features of the diffusion step index.

    dim must be even; frequencies follow the usual geometric ladder
    10000^(-2j/dim). Accepts a scalar step or a batch of steps.
    """
    if dim % 2 != 0:
        raise ValueError("step embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ks = np.asarray(k, dtype=np.float64)
    ang = ks[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class DenoiserComponent:
    """One noise-prediction network over [noisy window | obs embedding | step features]."""

    def __init__(self, net: FeedForwardNet, window_dim: int, step_dim: int = 16):
        expected = window_dim + (net.in_dim - window_dim - step_dim) + step_dim
        if net.in_dim != expected or net.out_dim != window_dim:
            raise DimensionMismatchError(
                f"denoiser net must map window+emb+step -> window "
                f"({net.in_dim} -> {net.out_dim}, window_dim={window_dim})"
            )
        self.net = net
        self.window_dim = window_dim
        self.step_dim = step_dim
        self.emb_dim = net.in_dim - window_dim - step_dim

    @classmethod
    def init(
        cls,
        window_dim: int,
        emb_dim: int,
        hidden: list[int],
        rng: Rng,
        step_dim: int = 16,
        activation: str = "tanh",
    ) -> "DenoiserComponent":
        widths = [window_dim + emb_dim + step_dim, *hidden, window_dim]
        acts = [activation] * len(hidden) + ["identity"]
        return cls(FeedForwardNet.init(widths, acts, rng), window_dim, step_dim)

    def predict(self, values, obs_embedding, k):
        """Noise estimate for a window (or batch of windows) at step(s) k."""
        values = as_f64(values, "values")
        emb = as_f64(obs_embedding, "obs_embedding")
        step = sinusoidal_step_embedding(k, self.step_dim)
        if values.ndim == 2 and step.ndim == 1:
            step = np.broadcast_to(step, (values.shape[0], self.step_dim))
        if values.ndim == 2 and emb.ndim == 1:
            emb = np.broadcast_to(emb, (values.shape[0], self.emb_dim))
        x = np.concatenate([values, emb, step], axis=-1)
        return self.net.forward(x)

    def backward(self, cache, grad_out):
        """(param grads, grad wrt window values, grad wrt obs embedding)."""
        grads, gx = self.net.backward(cache, grad_out)
        d, e = self.window_dim, self.emb_dim
        return grads, gx[..., :d], gx[..., d : d + e]

    def copy(self) -> "DenoiserComponent":
        return DenoiserComponent(self.net.copy(), self.window_dim, self.step_dim)

    def checksum(self) -> str:
        return self.net.checksum()

    def to_json(self) -> dict:
        return {
            "window_dim": self.window_dim,
            "step_dim": self.step_dim,
            "net": self.net.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DenoiserComponent":
        return cls(
            FeedForwardNet.from_json(obj["net"]),
            int(obj["window_dim"]),
            int(obj["step_dim"]),
        )


class ActionNormalizer:
    """Per-dimension affine map between env action units and [-1, 1]."""

    def __init__(self, lo, hi):
        self.lo = as_f64(lo, "lo")
        self.hi = as_f64(hi, "hi")
        if self.lo.shape != self.hi.shape or np.any(self.hi < self.lo):
            raise ValueError("normalizer needs hi >= lo per dimension")
        self.span = self.hi - self.lo

    @classmethod
    def from_actions(cls, actions: np.ndarray) -> "ActionNormalizer":
        a = as_f64(actions, "actions").reshape(-1, actions.shape[-1])
        return cls(a.min(axis=0), a.max(axis=0))

    def normalize(self, a: np.ndarray) -> np.ndarray:
        a = as_f64(a, "actions")
        out = np.zeros_like(a)
        ok = self.span > 0.0
        out[..., ok] = 2.0 * (a[..., ok] - self.lo[ok]) / self.span[ok] - 1.0
        return out

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        x = as_f64(x, "normalized actions")
        out = np.broadcast_to(self.lo, x.shape).copy()
        ok = self.span > 0.0
        out[..., ok] = (x[..., ok] + 1.0) * 0.5 * self.span[ok] + self.lo[ok]
        return out

    def to_json(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ActionNormalizer":
        return cls(np.asarray(obj["lo"]), np.asarray(obj["hi"]))


@dataclass
class ActionWindow:
    """Normalized predicted trajectory: (T_pred, action_dim) in [-1, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = as_f64(self.values, "action window")
        if self.values.ndim != 2:
            raise ValueError("action window must be (T_pred, action_dim)")


@dataclass
class PolicyConfig:
    """Hyperparameters of the factorized policy (estimator params)."""

    n_components: int = 4
    diffusion_steps: int = 100
    schedule_kind: str = "cosine"
    t_pred: int = 16
    t_exec: int = 8
    h_obs: int = 2
    obs_embed_dim: int = 64
    encoder_hidden: tuple = ()
    denoiser_hidden: tuple = (256, 256)
    router_hidden: tuple = (64,)
    step_embed_dim: int = 16
    activation: str = "tanh"
    router_temperature: float = 1.0
    learning_rate: float = 1e-3
    router_lr_scale: float = 1.0
    append_task_id: bool = False
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("need at least one component")
        if not 1 <= self.t_exec <= self.t_pred:
            raise ValueError("t_exec must lie in [1, t_pred]")
        if self.h_obs < 1:
            raise ValueError("h_obs must be >= 1")
        self.encoder_hidden = tuple(int(w) for w in self.encoder_hidden)
        self.denoiser_hidden = tuple(int(w) for w in self.denoiser_hidden)
        self.router_hidden = tuple(int(w) for w in self.router_hidden)


def matched_hidden_width(
    n_components: int, base_hidden: int, in_dim: int, out_dim: int
) -> int:
    """Hidden width for a single two-hidden-layer net whose parameter count
    matches n_components nets of width base_hidden (same in/out dims)."""

    def count(h):
        return in_dim * h + h + h * h + h + h * out_dim + out_dim

    target = n_components * count(base_hidden)
    b = in_dim + out_dim + 2
    h = (-b + math.sqrt(b * b + 4.0 * (target - out_dim))) / 2.0
    return max(1, round(h))


@dataclass
class TrainingLog:
    """Per-epoch train / held-out validation MSE plus run metadata."""

    entries: list = field(default_factory=list)
    n_train_windows: int = 0
    n_val_windows: int = 0
    trainable: tuple = ()

    def epochs(self) -> list[int]:
        return [e["epoch"] for e in self.entries]

    def val_mse(self) -> list[float]:
        return [e["val_mse"] for e in self.entries]

    def to_json(self) -> dict:
        return {
            "entries": self.entries,
            "n_train_windows": self.n_train_windows,
            "n_val_windows": self.n_val_windows,
            "trainable": list(self.trainable),
        }


@dataclass
class RolloutResult:
    success: bool
    trajectory: list  # (observation, executed action) pairs, in env units
    weight_trace: list  # router weights at each inference call


class FactorizedPolicy:
    """Product-of-experts diffusion policy with an observation-conditioned router.

    Parameters are grouped as 'encoder', 'router', 'component:i'; training and
    adaptation select groups through a trainable mask, and groups outside the
    mask are never written (bit-identical before/after).
    """

    def __init__(
        self,
        obs_dim: int,
        action_dim: int,
        config: PolicyConfig | None = None,
        normalizer: ActionNormalizer | None = None,
        seed: int = 0,
    ):
        self.obs_dim = int(obs_dim)
        self.action_dim = int(action_dim)
        self.config = config or PolicyConfig()
        self.normalizer = normalizer
        self.seed = int(seed)
        self.training_log_ = None
        self._build()

    # -- construction ----------------------------------------------------

    def _build(self):
        cfg = self.config
        rng = Rng(self.seed).child(0xB11D)
        stacked = self.stacked_obs_dim
        enc_widths = [stacked, *cfg.encoder_hidden, cfg.obs_embed_dim]
        enc_acts = [cfg.activation] * (len(enc_widths) - 1)
        self.obs_encoder = FeedForwardNet.init(enc_widths, enc_acts, rng.child(0))
        self.schedule = make_schedule(cfg.diffusion_steps, cfg.schedule_kind)
        self.components = [
            DenoiserComponent.init(
                self.window_dim,
                cfg.obs_embed_dim,
                list(cfg.denoiser_hidden),
                rng.child(10 + i),
                cfg.step_embed_dim,
                cfg.activation,
            )
            for i in range(cfg.n_components)
        ]
        router_widths = [cfg.obs_embed_dim, *cfg.router_hidden, cfg.n_components]
        router_acts = [cfg.activation] * len(cfg.router_hidden) + ["identity"]
        self.router = Router(
            FeedForwardNet.init(router_widths, router_acts, rng.child(1)),
            cfg.router_temperature,
        )

    @property
    def window_dim(self) -> int:
        return self.config.t_pred * self.action_dim

    @property
    def stacked_obs_dim(self) -> int:
        return self.obs_dim * self.config.h_obs + (1 if self.config.append_task_id else 0)

    @property
    def n_components(self) -> int:
        return len(self.components)

    # -- estimator surface -------------------------------------------------

    def get_params(self, deep: bool = True) -> dict:
        out = asdict(self.config)
        out["seed"] = self.seed
        return out

    def set_params(self, **params) -> "FactorizedPolicy":
        """Update hyperparameters and re-initialize networks (pre-fit use)."""
        if "seed" in params:
            self.seed = int(params.pop("seed"))
        cfg = asdict(self.config)
        for key, val in params.items():
            if key not in cfg:
                raise ValueError(f"unknown parameter '{key}'")
            cfg[key] = val
        self.config = PolicyConfig(**cfg)
        self._build()
        return self

    # -- parameter bookkeeping ----------------------------------------------

    def group_names(self) -> list[str]:
        return ["encoder", "router"] + [f"component:{i}" for i in range(self.n_components)]

    def _group_net(self, group: str) -> FeedForwardNet:
        if group == "encoder":
            return self.obs_encoder
        if group == "router":
            return self.router.net
        if group.startswith("component:"):
            return self.components[int(group.split(":", 1)[1])].net
        raise KeyError(f"unknown parameter group '{group}'")

    def param_groups(self, groups=None) -> dict[str, dict[str, np.ndarray]]:
        groups = list(groups) if groups is not None else self.group_names()
        return {g: self._group_net(g).params() for g in groups}

    def n_parameters(self, groups=None) -> int:
        return sum(
            self._group_net(g).param_count()
            for g in (groups if groups is not None else self.group_names())
        )

    def group_checksums(self) -> dict[str, str]:
        return {g: self._group_net(g).checksum() for g in self.group_names()}

    # -- inference -----------------------------------------------------------

    def _check_fitted(self):
        if self.normalizer is None:
            raise RuntimeError("policy has no action normalizer; fit it first")

    def validate_observation(self, obs: np.ndarray) -> np.ndarray:
        obs = as_f64(obs, "observation")
        if obs.shape[-1] != self.stacked_obs_dim:
            raise DimensionMismatchError(
                f"observation width {obs.shape[-1]} != expected "
                f"{self.stacked_obs_dim} (obs_dim {self.obs_dim} x h_obs "
                f"{self.config.h_obs}"
                + (" + task id)" if self.config.append_task_id else ")")
            )
        return obs

    def encode_observation(self, obs: np.ndarray) -> np.ndarray:
        """Deterministic fixed-size embedding of a stacked observation."""
        return self.obs_encoder(self.validate_observation(obs))

    def stack_history(self, history: list[np.ndarray], task_id=None) -> np.ndarray:
        """Stack the last h_obs raw observations (first frame repeated at the
        start of an episode), optionally appending a task index."""
        h = self.config.h_obs
        frames = ([history[0]] * (h - len(history)) + list(history))[-h:]
        stacked = np.concatenate([as_f64(f, "observation frame") for f in frames])
        if self.config.append_task_id:
            stacked = np.concatenate([stacked, [float(task_id or 0)]])
        return stacked

    def sample_window(
        self,
        obs: np.ndarray,
        rng: Rng,
        top_k: int | None = None,
        weights_override: np.ndarray | None = None,
    ) -> tuple[ActionWindow, SampleInfo]:
        """Compositional reverse sampling of one normalized action window.

        The router runs once per call; with weights_override the router is
        bypassed entirely (solo-component analysis).
        """
        emb = self.encode_observation(obs)
        if weights_override is not None:
            w = check_simplex(weights_override)
        else:
            w = self.router.route(emb)
        values, info = sample_values(
            self.components,
            w,
            emb,
            self.schedule,
            self.window_dim,
            rng,
            top_k,
            x0_clip=NORMALIZED_CLAMP,
        )
        values = np.clip(values, -NORMALIZED_CLAMP, NORMALIZED_CLAMP)
        return ActionWindow(values.reshape(self.config.t_pred, self.action_dim)), info

    def act(
        self,
        obs: np.ndarray,
        rng: Rng,
        top_k: int | None = None,
        weights_override: np.ndarray | None = None,
    ) -> np.ndarray:
        """Sample and denormalize one action window for a stacked observation."""
        self._check_fitted()
        window, _ = self.sample_window(obs, rng, top_k, weights_override)
        return self.normalizer.denormalize(window.values)

    # estimator alias
    predict = act

    def episode_controller(self, env, rng: Rng, top_k=None, weights_override=None):
        return _PolicyController(self, env, rng, top_k, weights_override)

    # -- training --------------------------------------------------------------

    def build_training_arrays(self, episodes) -> tuple[np.ndarray, np.ndarray]:
        """Flatten episodes into (normalized windows, stacked observations)."""
        self._check_fitted()
        t_pred = self.config.t_pred
        windows, stacked = [], []
        for ep in episodes:
            obs = as_f64(ep.observations, "episode observations")
            acts = self.normalizer.normalize(as_f64(ep.actions, "episode actions"))
            n = len(acts)
            history: list[np.ndarray] = []
            for t in range(n):
                history.append(obs[t])
                win = acts[t : t + t_pred]
                if len(win) < t_pred:
                    pad = np.repeat(win[-1:], t_pred - len(win), axis=0)
                    win = np.concatenate([win, pad], axis=0)
                windows.append(win.reshape(-1))
                stacked.append(self.stack_history(history, getattr(ep, "task_id", None)))
        return np.asarray(windows), np.asarray(stacked)

    def fit(
        self,
        dataset,
        epochs: int = 30,
        batch_size: int = 64,
        seed: int = 0,
        trainable=None,
    ) -> "FactorizedPolicy":
        """Joint imitation training; see TrainingLog for the per-epoch record.

        trainable selects parameter groups ('encoder', 'router', 'component:i');
        None means all groups. Deterministic given the seed: data order, drawn
        steps, and noise all come from child streams of it.
        """
        from .composition import joint_loss

        episodes = list(dataset.episodes)
        if not episodes:
            raise ValueError("dataset has no episodes")
        if self.normalizer is None:
            self.normalizer = ActionNormalizer.from_json(dataset.normalizer_json())
        groups = self.group_names() if trainable is None else sorted(trainable)
        for g in groups:
            self._group_net(g)  # validates names early

        rng = Rng(seed)
        n_val = (
            max(1, int(round(self.config.validation_fraction * len(episodes))))
            if len(episodes) > 1
            else 0
        )
        order = rng.child(1).permutation(len(episodes))
        val_eps = [episodes[i] for i in order[:n_val]]
        train_eps = [episodes[i] for i in order[n_val:]]

        w_train, o_train = self.build_training_arrays(train_eps)
        if n_val:
            w_val, o_val = self.build_training_arrays(val_eps)
            val_rng = rng.child(2)
            val_ks = val_rng.integers(1, self.schedule.K + 1, len(w_val))
            val_eps_noise = val_rng.gaussian(w_val.size).reshape(w_val.shape)

        opts = {
            g: Adam(
                lr=self.config.learning_rate
                * (self.config.router_lr_scale if g == "router" else 1.0)
            )
            for g in groups
        }
        log = TrainingLog(
            n_train_windows=len(w_train),
            n_val_windows=int(n_val and len(w_val)),
            trainable=tuple(groups),
        )
        epoch_rng = rng.child(3)
        for epoch in range(epochs):
            perm = epoch_rng.permutation(len(w_train))
            losses = []
            for start in range(0, len(perm), batch_size):
                sel = perm[start : start + batch_size]
                loss, grads = joint_loss(
                    self.components,
                    self.router,
                    self.obs_encoder,
                    (w_train[sel], o_train[sel]),
                    self.schedule,
                    epoch_rng,
                )
                losses.append(loss)
                self._apply_grads(opts, grads, groups)
            entry = {"epoch": epoch, "train_mse": float(np.mean(losses))}
            entry["val_mse"] = (
                self._mse_on(w_val, o_val, val_ks, val_eps_noise)
                if n_val
                else entry["train_mse"]
            )
            log.entries.append(entry)
        self.training_log_ = log
        return self

    def _apply_grads(self, opts: dict, grads, groups):
        for g in groups:
            net = self._group_net(g)
            if g == "encoder":
                src = grads.encoder
            elif g == "router":
                src = grads.router
            else:
                src = grads.components[int(g.split(":", 1)[1])]
            net.load_params(opts[g].step(net.params(), src))

    def _mse_on(self, windows, obs, ks, eps) -> float:
        """Composed noise-prediction MSE with frozen (k, eps) draws."""
        emb = self.obs_encoder(obs)
        w = self.router.route(emb)
        ab = self.schedule.alpha_bar[ks][:, None]
        noisy = np.sqrt(ab) * windows + np.sqrt(1.0 - ab) * eps
        agg = np.zeros_like(eps)
        for i, comp in enumerate(self.components):
            agg += w[:, i : i + 1] * comp.predict(noisy, emb, ks)[0]
        resid = agg - eps
        return float(np.mean(resid * resid))

    # -- checkpointing -----------------------------------------------------------

    def to_json(self) -> dict:
        self._check_fitted()
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "seed": self.seed,
            "config": asdict(self.config),
            "normalizer": self.normalizer.to_json(),
            "schedule": self.schedule.to_json(),
            "encoder": self.obs_encoder.to_json(),
            "router": self.router.to_json(),
            "components": [c.to_json() for c in self.components],
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(canonical_json(self.to_json()))

    @classmethod
    def from_json(cls, obj: dict) -> "FactorizedPolicy":
        if obj.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a policy checkpoint: format={obj.get('format')!r}")
        if obj.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {obj.get('version')!r}")
        cfg_json = dict(obj["config"])
        cfg_json["n_components"] = max(1, len(obj["components"]))
        cfg = PolicyConfig(**cfg_json)
        policy = cls.__new__(cls)
        policy.obs_dim = int(obj["obs_dim"])
        policy.action_dim = int(obj["action_dim"])
        policy.config = cfg
        policy.seed = int(obj["seed"])
        policy.normalizer = ActionNormalizer.from_json(obj["normalizer"])
        policy.schedule = NoiseSchedule.from_json(obj["schedule"])
        policy.obs_encoder = FeedForwardNet.from_json(obj["encoder"])
        policy.router = Router.from_json(obj["router"])
        policy.components = [DenoiserComponent.from_json(c) for c in obj["components"]]
        policy.training_log_ = None
        return policy

    @classmethod
    def load(cls, path) -> "FactorizedPolicy":
        with open(path) as f:
            return cls.from_json(json.load(f))


def canonical_json(obj) -> str:
    """Key-sorted, whitespace-free JSON so identical state gives identical bytes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class _PolicyController:
    """Receding-horizon execution state for one episode."""

    def __init__(self, policy, env, rng, top_k=None, weights_override=None):
        self.policy = policy
        self.env = env
        self.rng = rng
        self.top_k = top_k
        self.weights_override = weights_override
        self.history: list[np.ndarray] = []
        self.pending: list[np.ndarray] = []

    def action(self, obs: np.ndarray):
        """Next env action; returns (action, SampleInfo) at re-inference steps
        and (action, None) in between."""
        self.history.append(np.asarray(obs, dtype=np.float64))
        if len(self.history) > self.policy.config.h_obs:
            self.history.pop(0)
        info = None
        if not self.pending:
            stacked = self.policy.stack_history(
                self.history, getattr(self.env, "task_id", None)
            )
            window, info = self.policy.sample_window(
                stacked, self.rng, self.top_k, self.weights_override
            )
            denorm = self.policy.normalizer.denormalize(window.values)
            self.pending = [denorm[t] for t in range(self.policy.config.t_exec)]
        return self.pending.pop(0), info


def rollout(
    policy, env, max_steps: int, rng: Rng, top_k: int | None = None, **controller_kw
) -> RolloutResult:
    """Run one episode under receding-horizon control.

    Re-infers every t_exec steps (on the fresh observation), executes the
    first t_exec actions of each predicted window, and stops on latched
    success or after max_steps. The weight trace has one entry per inference.
    """
    obs = env.reset(rng.child(0))
    act_rng = rng.child(1)
    controller = policy.episode_controller(env, act_rng, top_k=top_k, **controller_kw)
    trajectory, trace = [], []
    steps = 0
    while steps < max_steps and not env.success:
        action, info = controller.action(obs)
        if info is not None:
            trace.append(info.weights if isinstance(info, SampleInfo) else info)
        trajectory.append((obs, action))
        try:
            obs = env.step(action)
        except Exception as exc:
            raise RuntimeError(f"environment step failed at step {steps}: {exc}") from exc
        steps += 1
    return RolloutResult(bool(env.success), trajectory, trace)
