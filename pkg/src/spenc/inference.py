"""Mean-field ADVI for the sparsely-encoded model.

Every scalar latent gets an independent Gaussian factor over an unconstrained
value ``z``.  Non-negative magnitudes (u, s+, s-, w, B) are ``softplus(z)``;
squared horseshoe scales and their auxiliaries are ``exp(z)``.  Gradients are
pathwise: ``z = loc + softplus(raw_scale) * eps`` and the chain rule runs
through :func:`spenc.model.log_joint_and_grad`.  The Gaussian entropy is
added in closed form.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy.special import expit

from .data import CountMatrix, compute_item_means, compute_user_scales
from .model import LinkPair, ModelConfig, ParamDraw, encode, log_joint_and_grad
from .rng import make_rng

log = logging.getLogger(__name__)

SOFTPLUS = "softplus"
EXP = "exp"

# stream ids for make_rng(seed, stream)
_INIT, _ORDER, _NOISE, _SUMMARY = 1, 2, 3, 4


class ConfigError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when the ELBO or its gradient is not finite; ``block`` names the culprit."""

    def __init__(self, message: str, block: str):
        super().__init__(f"{message} (block {block!r})")
        self.block = block


class ConvergenceWarning(UserWarning):
    pass


def softplus(z):
    return np.logaddexp(0.0, z)


def softplus_inv(x):
    x = np.asarray(x, dtype=np.float64)
    return x + np.log(-np.expm1(-x))


@dataclass(frozen=True)
class Block:
    name: str
    shape: tuple[int, ...]
    transform: str
    start: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.start + self.size


class ParamLayout:
    """Named blocks of the flat unconstrained parameter vector."""

    def __init__(self, n_items: int, n_factors: int):
        I, K = n_items, n_factors
        blocks = [
            ("u", (I, K), SOFTPLUS),
            ("s_plus", (I,), SOFTPLUS),
            ("s_minus", (I,), SOFTPLUS),
            ("w", (I,), SOFTPLUS),
            ("B", (K, I), SOFTPLUS),
            ("u_local", (I, K), EXP),
            ("u_local_aux", (I, K), EXP),
            ("u_global", (K,), EXP),
            ("u_global_aux", (K,), EXP),
            ("s_local", (2, I), EXP),
            ("s_local_aux", (2, I), EXP),
            ("s_global", (I,), EXP),
            ("s_global_aux", (I,), EXP),
        ]
        self.n_items, self.n_factors = I, K
        self.blocks: list[Block] = []
        start = 0
        for name, shape, tr in blocks:
            b = Block(name, shape, tr, start)
            self.blocks.append(b)
            start = b.stop
        self.size = start
        self.by_name = {b.name: b for b in self.blocks}
        self.softplus_mask = np.zeros(self.size, dtype=bool)
        for b in self.blocks:
            if b.transform == SOFTPLUS:
                self.softplus_mask[b.start:b.stop] = True

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        return {b.name: vec[b.start:b.stop].reshape(b.shape) for b in self.blocks}

    def flatten(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.size)
        for b in self.blocks:
            out[b.start:b.stop] = np.ravel(parts[b.name])
        return out

    def block_of(self, index: int) -> str:
        for b in self.blocks:
            if b.start <= index < b.stop:
                return b.name
        raise IndexError(index)

    def to_json(self) -> list[dict]:
        return [{"name": b.name, "shape": list(b.shape), "transform": b.transform} for b in self.blocks]


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 100
    batch_size: int = 1024
    mc_samples: int = 4
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    summary_draws: int = 200
    init_scale: float = 0.1
    init_magnitude: float = 0.5
    init_encoder: float = 0.01
    init_gate: float = 0.5
    init_jitter: float = 0.01
    convergence_window: int = 50

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.mc_samples < 1 or self.lookahead_k < 1:
            raise ConfigError("epochs, batch_size, mc_samples and lookahead_k must be >= 1")
        if not 0 < self.lookahead_alpha <= 1:
            raise ConfigError("lookahead_alpha must lie in (0, 1]")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1) or self.adam_eps <= 0:
            raise ConfigError("invalid Adam hyperparameters")

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class OptimizerState:
    """Adam moments plus Lookahead slow weights for a flat parameter vector."""

    params: np.ndarray
    m: np.ndarray = None
    v: np.ndarray = None
    slow: np.ndarray = None
    t: int = 0

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(self.params)
        if self.v is None:
            self.v = np.zeros_like(self.params)
        if self.slow is None:
            self.slow = self.params.copy()


@dataclass
class VariationalState:
    """Gaussian factor locations and raw scales, stored as one flat vector ``[loc, raw_scale]``."""

    layout: ParamLayout
    opt: OptimizerState
    trace: list[tuple[int, float]] = field(default_factory=list)

    @property
    def loc(self) -> np.ndarray:
        return self.opt.params[: self.layout.size]

    @property
    def raw_scale(self) -> np.ndarray:
        return self.opt.params[self.layout.size:]

    @property
    def scale(self) -> np.ndarray:
        return softplus(self.raw_scale)

    @property
    def step(self) -> int:
        return self.opt.t

    def record(self, value: float) -> None:
        self.trace.append((self.opt.t, float(value)))

    def copy(self) -> "VariationalState":
        o = self.opt
        return VariationalState(
            self.layout,
            OptimizerState(o.params.copy(), o.m.copy(), o.v.copy(), o.slow.copy(), o.t),
            list(self.trace),
        )


def init_state(dims: tuple[int, int, int], config: TrainConfig | None = None, seed: int | None = None
               ) -> VariationalState:
    """Fresh variational state for (U, I, K).

    Magnitude locations start near ``softplus_inv(init_magnitude)``, except
    the encoder magnitudes ``u`` (``init_encoder``), the gate pair (split so
    the factor gate equals ``init_gate``) and the background gains ``w``
    (set so that phi = eta); log-scale locations start near 0.  All locations
    get ``init_jitter`` noise and every factor starts with effective scale
    ``init_scale``.  The defaults start the model close to the pure
    background solution (phi ~ eta at gate 1/2, alpha ~ 0).
    """
    config = config or TrainConfig()
    seed = config.seed if seed is None else seed
    _, I, K = dims
    if K < 1:
        raise ConfigError(f"number of factors must be >= 1, got {K}")
    if K > I:
        raise ConfigError(f"number of factors ({K}) exceeds number of items ({I})")
    layout = ParamLayout(I, K)
    rng = make_rng(seed, _INIT)
    centre = np.where(layout.softplus_mask, float(softplus_inv(config.init_magnitude)), 0.0)
    gate = config.init_gate
    for name, value in (("u", config.init_encoder), ("w", 1.0 / (1.0 - gate)),
                        ("s_plus", 2.0 * gate * config.init_magnitude),
                        ("s_minus", 2.0 * (1.0 - gate) * config.init_magnitude)):
        b = layout.by_name[name]
        centre[b.start:b.stop] = float(softplus_inv(value))
    loc = centre + config.init_jitter * rng.standard_normal(layout.size)
    raw = np.full(layout.size, float(softplus_inv(config.init_scale)))
    return VariationalState(layout, OptimizerState(np.concatenate([loc, raw])))


def transform_unconstrained(z: np.ndarray, layout: ParamLayout):
    """Map an unconstrained vector to a :class:`ParamDraw`.

    Returns ``(draw, log_det_jacobian)``.  softplus blocks contribute
    ``log sigmoid(z)`` per entry, exp blocks contribute ``z``.
    """
    z = np.asarray(z, dtype=np.float64)
    x = np.where(layout.softplus_mask, softplus(z), np.exp(z))
    logdet = float(np.sum(np.where(layout.softplus_mask, -softplus(-z), z)))
    return ParamDraw(**layout.unflatten(x)), logdet


def _transform_derivatives(z: np.ndarray, layout: ParamLayout):
    sig = expit(z)
    mask = layout.softplus_mask
    x = np.where(mask, softplus(z), np.exp(z))
    dx = np.where(mask, sig, x)
    dlogdet = np.where(mask, 1.0 - sig, 1.0)
    logdet = float(np.sum(np.where(mask, -softplus(-z), z)))
    return x, dx, dlogdet, logdet


@dataclass
class ModelContext:
    """Fixed (non-variational) inputs of the log-joint."""

    config: ModelConfig
    link: LinkPair


def _check_finite(value, vec, layout: ParamLayout, what: str):
    if not np.isfinite(value):
        bad = np.flatnonzero(~np.isfinite(vec))
        block = layout.block_of(int(bad[0] % layout.size)) if bad.size else "log_joint"
        raise NonFiniteError(f"non-finite {what}", block)
    bad = np.flatnonzero(~np.isfinite(vec))
    if bad.size:
        raise NonFiniteError(f"non-finite {what} gradient", layout.block_of(int(bad[0] % layout.size)))


def elbo_estimate(state: VariationalState, Y_batch, ctx: ModelContext, mc_samples: int,
                  rng: np.random.Generator, xi_batch=1.0, batch_scale: float = 1.0):
    """Monte Carlo ELBO and its pathwise gradient with respect to ``[loc, raw_scale]``.

    The estimate averages ``log_joint(T(z)) + log|dT/dz|`` over ``mc_samples``
    reparameterized draws and adds the closed-form Gaussian entropy.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    layout = state.layout
    n = layout.size
    loc, raw = state.loc, state.raw_scale
    sigma = softplus(raw)
    g_loc = np.zeros(n)
    g_scale = np.zeros(n)
    total = 0.0
    for _ in range(mc_samples):
        eps = rng.standard_normal(n)
        z = loc + sigma * eps
        x, dx, dlogdet, logdet = _transform_derivatives(z, layout)
        draw = ParamDraw(**layout.unflatten(x))
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            lj, grads = log_joint_and_grad(draw, Y_batch, xi_batch, ctx.link, batch_scale, ctx.config)
        g_z = layout.flatten(grads) * dx + dlogdet
        value = lj + logdet
        _check_finite(value, np.concatenate([x, g_z]), layout, "ELBO")
        total += value
        g_loc += g_z
        g_scale += g_z * eps
    entropy = float(np.sum(np.log(sigma))) + 0.5 * n * (1.0 + math.log(2.0 * math.pi))
    sig_raw = expit(raw)
    grad = np.concatenate([g_loc / mc_samples, (g_scale / mc_samples) * sig_raw + sig_raw / sigma])
    return total / mc_samples + entropy, grad


def adam_lookahead_step(state, gradient: np.ndarray, config: TrainConfig):
    """One Adam step (descending ``gradient``) on the fast weights, with Lookahead sync every k steps.

    ``state`` may be an :class:`OptimizerState` or a :class:`VariationalState`.
    """
    opt = state.opt if isinstance(state, VariationalState) else state
    gradient = np.asarray(gradient, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(gradient))
    if bad.size:
        block = "params"
        if isinstance(state, VariationalState):
            block = state.layout.block_of(int(bad[0] % state.layout.size))
        raise NonFiniteError("non-finite gradient", block)
    b1, b2 = config.adam_beta1, config.adam_beta2
    opt.t += 1
    opt.m = b1 * opt.m + (1.0 - b1) * gradient
    opt.v = b2 * opt.v + (1.0 - b2) * gradient * gradient
    m_hat = opt.m / (1.0 - b1**opt.t)
    v_hat = opt.v / (1.0 - b2**opt.t)
    opt.params = opt.params - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    if opt.t % config.lookahead_k == 0:
        opt.slow = opt.slow + config.lookahead_alpha * (opt.params - opt.slow)
        opt.params = opt.slow.copy()
    return state


@dataclass
class FitResult:
    """Posterior summaries and the final variational state of a fit."""

    alpha_mean: np.ndarray
    alpha_sd: np.ndarray
    B_mean: np.ndarray
    B_sd: np.ndarray
    phi_mean: np.ndarray
    phi_sd: np.ndarray
    gate_mean: np.ndarray
    eta: np.ndarray
    xi_mode: str
    mean_row_sum: float
    state: VariationalState
    model_config: ModelConfig
    train_config: TrainConfig
    n_users: int

    @property
    def link(self) -> LinkPair:
        return LinkPair(self.model_config.link, self.eta)

    @property
    def n_items(self) -> int:
        return self.state.layout.n_items

    @property
    def n_factors(self) -> int:
        return self.state.layout.n_factors

    def draws(self, n_draws: int, seed: int | None = None) -> Iterator[ParamDraw]:
        """Independent draws from the fitted variational posterior."""
        seed = self.train_config.seed if seed is None else seed
        yield from sample_draws(self.state, n_draws, make_rng(seed, _SUMMARY))

    def user_scales(self, Y: CountMatrix, xi_mode: str | None = None) -> np.ndarray:
        """User scales for ``Y`` normalized by the training data's mean row sum."""
        mode = xi_mode or self.xi_mode
        if mode == "unit":
            return np.ones(Y.n_rows)
        if mode == "overdispersed":
            row_sum = np.asarray(Y.csr.sum(axis=1), dtype=np.float64).ravel()
            return row_sum / self.mean_row_sum
        raise ValueError(f"unknown user-scale mode {mode!r}")


def sample_draws(state: VariationalState, n_draws: int, rng: np.random.Generator) -> Iterator[ParamDraw]:
    for _ in range(n_draws):
        z = state.loc + state.scale * rng.standard_normal(state.layout.size)
        yield transform_unconstrained(z, state.layout)[0]


def summarize(state: VariationalState, eta: np.ndarray, n_draws: int, rng: np.random.Generator) -> dict:
    """Mean and standard deviation of alpha, B, phi and the factor gate over ``n_draws``."""
    acc = {k: [] for k in ("alpha", "B", "phi", "gate")}
    for d in sample_draws(state, n_draws, rng):
        acc["alpha"].append(d.alpha)
        acc["B"].append(d.B)
        acc["phi"].append(d.phi(eta))
        acc["gate"].append(d.gate)
    out = {}
    for k, vals in acc.items():
        arr = np.stack(vals)
        out[k + "_mean"] = arr.mean(axis=0)
        out[k + "_sd"] = arr.std(axis=0, ddof=1) if n_draws > 1 else np.zeros_like(arr[0])
    return out


def _trailing_slope_warning(trace: list[tuple[int, float]], window: int) -> None:
    if len(trace) < 2 * window:
        return
    y = np.array([v for _, v in trace[-window:]])
    x = np.arange(window, dtype=np.float64)
    slope = np.polyfit(x, y, 1)[0]
    resid = y - np.polyval(np.polyfit(x, y, 1), x)
    se = resid.std(ddof=2) / math.sqrt(np.sum((x - x.mean()) ** 2))
    if slope > 3.0 * se and slope * window > 1e-3 * abs(y.mean()):
        warnings.warn(
            f"ELBO still rising over the last {window} steps (slope {slope:.3g}/step); "
            "the fit may not have converged",
            ConvergenceWarning,
            stacklevel=3,
        )


def fit(Y: CountMatrix, model_config: ModelConfig | None = None, train_config: TrainConfig | None = None,
        callback=None) -> FitResult:
    """Fit by minibatch ADVI with Adam + Lookahead for a fixed number of epochs.

    Each epoch visits a fresh random partition of the users into batches of
    ``batch_size`` (the last may be smaller); the likelihood of each batch is
    scaled by ``U / |batch|``.
    """
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    U, I = Y.shape
    if U < 1 or I < 1:
        raise ValueError("cannot fit an empty matrix")
    cfg = model_config.resolved(U, I)
    eta = compute_item_means(Y).eta
    xi = compute_user_scales(Y, cfg.xi_mode).xi
    ctx = ModelContext(cfg, LinkPair(cfg.link, eta))
    state = init_state((U, I, cfg.n_factors), train_config)

    order_rng = make_rng(train_config.seed, _ORDER)
    noise_rng = make_rng(train_config.seed, _NOISE)
    Yd = Y.toarray().astype(np.float64)
    bs = min(train_config.batch_size, U)
    n_batches = math.ceil(U / bs)
    log.info("fitting U=%d I=%d K=%d for %d epochs x %d batches", U, I, cfg.n_factors,
             train_config.epochs, n_batches)
    for epoch in range(train_config.epochs):
        perm = order_rng.permutation(U)
        for b in range(n_batches):
            idx = np.sort(perm[b * bs:(b + 1) * bs])
            value, grad = elbo_estimate(state, Yd[idx], ctx, train_config.mc_samples, noise_rng,
                                        xi_batch=xi[idx], batch_scale=U / idx.size)
            adam_lookahead_step(state, -grad, train_config)
            state.record(value)
        if callback is not None:
            callback(epoch, state)
    _trailing_slope_warning(state.trace, train_config.convergence_window)

    summ = summarize(state, eta, train_config.summary_draws, make_rng(train_config.seed, _SUMMARY))
    row_sum = np.asarray(Y.csr.sum(axis=1), dtype=np.float64).ravel()
    return FitResult(
        alpha_mean=summ["alpha_mean"], alpha_sd=summ["alpha_sd"],
        B_mean=summ["B_mean"], B_sd=summ["B_sd"],
        phi_mean=summ["phi_mean"], phi_sd=summ["phi_sd"],
        gate_mean=summ["gate_mean"], eta=eta, xi_mode=cfg.xi_mode,
        mean_row_sum=float(row_sum.mean()),
        state=state, model_config=cfg, train_config=train_config, n_users=U,
    )


def transform_new(fit_result: FitResult, Y_new: CountMatrix, xi_mode: str | None = None) -> np.ndarray:
    """Representations for new rows using the posterior-mean encoder; no refitting."""
    if Y_new.n_cols != fit_result.n_items:
        raise ValueError(f"expected {fit_result.n_items} item columns, got {Y_new.n_cols}")
    xi = fit_result.user_scales(Y_new, xi_mode)
    return encode(Y_new, fit_result.alpha_mean, xi, fit_result.link)
