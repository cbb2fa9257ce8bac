"""Sparsely-encoded hierarchical Poisson factorization: the generative model.

Counts follow ``y_ui ~ Poisson(f_i(sum_k theta_uk B_ki) + phi_i)`` where the
representation is an explicit additive function of the counts,
``theta_uk = xi_u sum_i g_i(y_ui) alpha_ik``.  Encoder weights and background
rates share a per-item gate,

    alpha_ik = u_ik * s_i+ / (s_i+ + s_i-)
    phi_i    = eta_i * w_i * s_i- / (s_i+ + s_i-)

with non-negative horseshoe priors on each encoder column ``u[:, k]`` and on
each gate pair ``[s_i+, s_i-]``.  Half-Cauchy scales use the inverse-gamma
auxiliary form: ``x ~ C+(0, sigma)`` iff ``x**2 ~ IG(1/2, 1/nu)`` and
``nu ~ IG(1/2, 1/sigma**2)``.

Every ``*_grad`` helper returns the value together with its gradient so the
inference module can assemble pathwise ELBO gradients without autodiff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from .data import CountMatrix

EPS_RATE = 1e-10
HALF_NORMAL_CONST = math.log(2.0) - 0.5 * math.log(2.0 * math.pi)
_LGAMMA_HALF = math.lgamma(0.5)

LINK_ALIASES = {"identity": "identity", "identity-scaled": "identity", "log": "log"}


class DomainError(ValueError):
    """A density was evaluated outside its support."""


@dataclass(frozen=True)
class LinkPair:
    """Per-item decoder link ``f`` and encoder transform ``g``.

    identity: ``f(x) = eta * x``, ``g(y) = y / eta``
    log:      ``f(x) = exp(eta * x) - 1``, ``g(y) = log(y / eta + 1)``

    The log pair is used as written even though ``g`` is not the exact
    inverse of ``f``; both are increasing with ``f(0) = g(0) = 0``.
    """

    kind: str
    eta: np.ndarray

    def __post_init__(self):
        if self.kind not in LINK_ALIASES:
            raise ValueError(f"unknown link {self.kind!r}; expected 'identity' or 'log'")
        object.__setattr__(self, "kind", LINK_ALIASES[self.kind])
        object.__setattr__(self, "eta", np.asarray(self.eta, dtype=np.float64))

    def f(self, x):
        if self.kind == "identity":
            return self.eta * x
        return np.expm1(self.eta * x)

    def f_prime(self, x):
        if self.kind == "identity":
            return np.broadcast_to(self.eta, np.shape(x)).astype(np.float64)
        return self.eta * np.exp(self.eta * x)

    def g(self, y):
        if self.kind == "identity":
            return y / self.eta
        return np.log1p(y / self.eta)

    def g_item(self, y, i: int):
        """``g_i`` applied to counts of a single item ``i``."""
        if self.kind == "identity":
            return y / self.eta[i]
        return np.log1p(y / self.eta[i])


@dataclass
class ModelConfig:
    """Model hyperparameters.  ``None`` scales resolve from the data shape."""

    n_factors: int = 3
    link: str = "identity"
    xi_mode: str = "unit"
    u_local_scale: float = 1.0
    u_global_scale: float | None = None  # default 1 / sqrt(U * I)
    s_local_scale: float = 1.0
    s_global_scale: float = 1.0
    decoder_variance: float | None = None  # default 1 / (2K)
    w_variance: float = 10.0
    eps_rate: float = EPS_RATE

    def resolved(self, n_users: int, n_items: int) -> "ModelConfig":
        out = replace(self)
        out.link = LINK_ALIASES.get(self.link, self.link)
        if out.u_global_scale is None:
            out.u_global_scale = 1.0 / math.sqrt(n_users * n_items)
        if out.decoder_variance is None:
            out.decoder_variance = 1.0 / (2 * self.n_factors)
        return out

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ParamDraw:
    """One constrained realization of all latent parameters.

    ``s_local`` (shape 2 x I) holds the squared local scales of ``[s+, s-]``,
    ``u_local`` (I x K) those of the encoder magnitudes; ``*_global`` hold
    squared global scales, ``*_aux`` the inverse-gamma auxiliaries.
    """

    u: np.ndarray
    s_plus: np.ndarray
    s_minus: np.ndarray
    w: np.ndarray
    B: np.ndarray
    u_local: np.ndarray
    u_local_aux: np.ndarray
    u_global: np.ndarray
    u_global_aux: np.ndarray
    s_local: np.ndarray
    s_local_aux: np.ndarray
    s_global: np.ndarray
    s_global_aux: np.ndarray

    @property
    def gate(self) -> np.ndarray:
        """Fraction of each item routed to the factor model."""
        return self.s_plus / (self.s_plus + self.s_minus)

    @property
    def background_gate(self) -> np.ndarray:
        return self.s_minus / (self.s_plus + self.s_minus)

    @property
    def alpha(self) -> np.ndarray:
        return self.u * self.gate[:, None]

    def phi(self, eta) -> np.ndarray:
        return eta * self.w * self.background_gate


def check_dims(Y, n_items: int):
    if Y.shape[1] != n_items:
        raise ValueError(f"expected {n_items} item columns, got {Y.shape[1]}")


def _as_batch(Y):
    if isinstance(Y, CountMatrix):
        return Y.csr
    if sp.issparse(Y):
        return sp.csr_matrix(Y)
    return np.asarray(Y, dtype=np.float64)


def encode(Y_batch, alpha: np.ndarray, xi, link: LinkPair) -> np.ndarray:
    """Representation ``theta_uk = xi_u * sum_i g_i(y_ui) * alpha_ik``.

    Accumulates item by item in ascending order, skipping zero counts, so the
    result is bit-identical to any other in-order sum over a superset of the
    nonzero terms (this is what makes rule inversion exact).
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    Yb = _as_batch(Y_batch)
    if alpha.ndim != 2:
        raise ValueError("alpha must be an items x factors matrix")
    check_dims(Yb, alpha.shape[0])
    n = Yb.shape[0]
    xi = np.broadcast_to(np.asarray(xi, dtype=np.float64), (n,))
    theta = np.zeros((n, alpha.shape[1]))
    if sp.issparse(Yb):
        csc = Yb.tocsc()
        for i in range(alpha.shape[0]):
            lo, hi = csc.indptr[i], csc.indptr[i + 1]
            if lo == hi:
                continue
            rows = csc.indices[lo:hi]
            gy = link.g_item(csc.data[lo:hi].astype(np.float64), i)
            theta[rows] += gy[:, None] * alpha[i]
    else:
        for i in range(alpha.shape[0]):
            col = Yb[:, i]
            nz = np.flatnonzero(col)
            if nz.size:
                theta[nz] += link.g_item(col[nz], i)[:, None] * alpha[i]
    return xi[:, None] * theta


def _raw_rate(theta, B, phi, link):
    z = theta @ B
    return z, link.f(z) + phi


def decode_rate(theta: np.ndarray, draw: ParamDraw, link: LinkPair, eps_rate: float = EPS_RATE) -> np.ndarray:
    """Poisson rates ``f_i(theta @ B) + phi_i`` floored at ``eps_rate``."""
    if theta.shape[1] != draw.B.shape[0]:
        raise ValueError(f"theta has {theta.shape[1]} factors, decoder has {draw.B.shape[0]}")
    _, raw = _raw_rate(theta, draw.B, draw.phi(link.eta), link)
    return np.maximum(raw, eps_rate)


def poisson_loglik(Y_batch, rates: np.ndarray):
    """Pointwise Poisson log-probabilities and their sum."""
    Yb = _as_batch(Y_batch)
    y = Yb.toarray().astype(np.float64) if sp.issparse(Yb) else Yb
    rates = np.asarray(rates, dtype=np.float64)
    if y.shape != rates.shape:
        raise ValueError(f"counts {y.shape} and rates {rates.shape} differ in shape")
    ll = y * np.log(rates) - rates - gammaln(y + 1.0)
    return ll, float(ll.sum())


def half_normal_logpdf(x, var):
    """Log-density of Normal+(0, var) with ``var`` the variance."""
    return HALF_NORMAL_CONST - 0.5 * np.log(var) - 0.5 * np.square(x) / var


def inv_gamma_logpdf(x, shape, scale):
    """Inverse-gamma log-density with rate-style ``scale`` (density prop. x^-(a+1) e^(-b/x))."""
    return shape * np.log(scale) - math.lgamma(shape) - (shape + 1.0) * np.log(x) - scale / x


def half_cauchy_pdf(x, scale):
    return 2.0 / (math.pi * scale * (1.0 + np.square(x / scale)))


def theta_prior_logdensity(theta: np.ndarray) -> float:
    """Unit half-normal log-density summed over representation entries."""
    theta = np.asarray(theta, dtype=np.float64)
    return float(np.sum(HALF_NORMAL_CONST - 0.5 * np.square(theta)))


def _check_positive(**arrays):
    for name, arr in arrays.items():
        a = np.asarray(arr)
        if np.any(~(a > 0)):
            raise DomainError(f"horseshoe auxiliary {name!r} must be strictly positive")


def horseshoe_log_prior(values, local, local_aux, global_, global_aux, lambda0: float, tau0: float,
                        grad: bool = False):
    """Non-negative horseshoe log-density with inverse-gamma auxiliaries.

    ``values``, ``local`` and ``local_aux`` have shape (m, G): each of the G
    columns is one horseshoe group sharing the squared global scale
    ``global_[g]`` (auxiliary ``global_aux[g]``).  ``local`` holds squared
    local scales.  Half-normal terms use ``sqrt(local * global)`` as the
    standard deviation.

    With ``grad=True`` returns ``(value, dict)`` holding partial derivatives
    keyed ``values``, ``local``, ``local_aux``, ``global``, ``global_aux``.
    """
    x = np.asarray(values, dtype=np.float64)
    lam2 = np.asarray(local, dtype=np.float64)
    nu = np.asarray(local_aux, dtype=np.float64)
    tau2 = np.asarray(global_, dtype=np.float64)
    nu_t = np.asarray(global_aux, dtype=np.float64)
    _check_positive(local=lam2, local_aux=nu, global_=tau2, global_aux=nu_t)
    var = lam2 * tau2
    lp = (
        np.sum(half_normal_logpdf(x, var))
        + np.sum(inv_gamma_logpdf(lam2, 0.5, 1.0 / nu))
        + np.sum(inv_gamma_logpdf(nu, 0.5, 1.0 / lambda0**2))
        + np.sum(inv_gamma_logpdf(tau2, 0.5, 1.0 / nu_t))
        + np.sum(inv_gamma_logpdf(nu_t, 0.5, 1.0 / tau0**2))
    )
    if not grad:
        return float(lp)
    x2 = np.square(x)
    g_x = -x / var
    g_lam2 = -2.0 / lam2 + x2 / (2.0 * lam2 * var) + 1.0 / (nu * lam2**2)
    g_nu = -2.0 / nu + 1.0 / (nu**2 * lam2) + 1.0 / (lambda0**2 * nu**2)
    g_tau2 = np.sum(-0.5 / tau2 + x2 / (2.0 * var * tau2), axis=0) - 1.5 / tau2 + 1.0 / (nu_t * tau2**2)
    g_nu_t = -2.0 / nu_t + 1.0 / (nu_t**2 * tau2) + 1.0 / (tau0**2 * nu_t**2)
    return float(lp), {"values": g_x, "local": g_lam2, "local_aux": g_nu, "global": g_tau2, "global_aux": g_nu_t}


def global_prior_terms(draw: ParamDraw, cfg: ModelConfig, grad: bool = False):
    """Log-density of all non-data priors: horseshoes on u and gate pairs, half-normals on B and w."""
    hs_u = horseshoe_log_prior(draw.u, draw.u_local, draw.u_local_aux, draw.u_global, draw.u_global_aux,
                               cfg.u_local_scale, cfg.u_global_scale, grad=grad)
    s_pair = np.stack([draw.s_plus, draw.s_minus])
    hs_s = horseshoe_log_prior(s_pair, draw.s_local, draw.s_local_aux, draw.s_global, draw.s_global_aux,
                               cfg.s_local_scale, cfg.s_global_scale, grad=grad)
    lp_B = float(np.sum(half_normal_logpdf(draw.B, cfg.decoder_variance)))
    lp_w = float(np.sum(half_normal_logpdf(draw.w, cfg.w_variance)))
    if not grad:
        return {"horseshoe_u": hs_u, "horseshoe_s": hs_s, "decoder": lp_B, "background": lp_w}
    (v_u, g_u), (v_s, g_s) = hs_u, hs_s
    values = {"horseshoe_u": v_u, "horseshoe_s": v_s, "decoder": lp_B, "background": lp_w}
    grads = {
        "u": g_u["values"],
        "u_local": g_u["local"],
        "u_local_aux": g_u["local_aux"],
        "u_global": g_u["global"],
        "u_global_aux": g_u["global_aux"],
        "s_plus": g_s["values"][0],
        "s_minus": g_s["values"][1],
        "s_local": g_s["local"],
        "s_local_aux": g_s["local_aux"],
        "s_global": g_s["global"],
        "s_global_aux": g_s["global_aux"],
        "B": -draw.B / cfg.decoder_variance,
        "w": -draw.w / cfg.w_variance,
    }
    return values, grads


@dataclass
class LogJointParts:
    likelihood: float
    theta_prior: float
    globals: dict = field(default_factory=dict)
    batch_scale: float = 1.0

    @property
    def total(self) -> float:
        return self.batch_scale * (self.likelihood + self.theta_prior) + sum(self.globals.values())


def log_joint_parts(draw: ParamDraw, Y_batch, eta, xi, link: LinkPair, batch_scale: float,
                    cfg: ModelConfig) -> LogJointParts:
    Yb = _as_batch(Y_batch)
    theta = encode(Yb, draw.alpha, xi, link)
    rates = decode_rate(theta, draw, link, cfg.eps_rate)
    _, ll = poisson_loglik(Yb, rates)
    return LogJointParts(ll, theta_prior_logdensity(theta), global_prior_terms(draw, cfg), batch_scale)


def log_joint(draw: ParamDraw, Y_batch, eta, xi, link: LinkPair, batch_scale: float, cfg: ModelConfig) -> float:
    """Minibatch log-joint: batch-scaled likelihood and theta prior plus global priors."""
    if batch_scale <= 0:
        raise ValueError("batch_scale must be positive")
    return log_joint_parts(draw, Y_batch, eta, xi, link, batch_scale, cfg).total


def log_joint_and_grad(draw: ParamDraw, Y_batch, xi, link: LinkPair, batch_scale: float, cfg: ModelConfig):
    """Log-joint and its gradient with respect to every :class:`ParamDraw` field."""
    Yb = _as_batch(Y_batch)
    y = Yb.toarray().astype(np.float64) if sp.issparse(Yb) else Yb
    n = y.shape[0]
    xi = np.broadcast_to(np.asarray(xi, dtype=np.float64), (n,))
    eta = link.eta
    p = draw.gate
    q = draw.background_gate
    alpha = draw.u * p[:, None]
    phi = eta * draw.w * q

    G = link.g(y)
    theta = encode(Yb, alpha, xi, link)
    z, raw = _raw_rate(theta, draw.B, phi, link)
    rate = np.maximum(raw, cfg.eps_rate)
    ll = float(np.sum(y * np.log(rate) - rate - gammaln(y + 1.0)))
    th_prior = theta_prior_logdensity(theta)
    glob_vals, grads = global_prior_terms(draw, cfg, grad=True)
    value = batch_scale * (ll + th_prior) + sum(glob_vals.values())

    resid = np.where(raw > cfg.eps_rate, y / rate - 1.0, 0.0)
    d_z = resid * link.f_prime(z)
    d_theta = batch_scale * (d_z @ draw.B.T - theta)
    d_B = batch_scale * (theta.T @ d_z)
    d_alpha = G.T @ (xi[:, None] * d_theta)
    d_phi = batch_scale * resid.sum(axis=0)

    d_p = np.sum(d_alpha * draw.u, axis=1) - d_phi * eta * draw.w
    tot = draw.s_plus + draw.s_minus
    grads["u"] = grads["u"] + d_alpha * p[:, None]
    grads["B"] = grads["B"] + d_B
    grads["w"] = grads["w"] + d_phi * eta * q
    grads["s_plus"] = grads["s_plus"] + d_p * draw.s_minus / tot**2
    grads["s_minus"] = grads["s_minus"] - d_p * draw.s_plus / tot**2
    return value, grads
