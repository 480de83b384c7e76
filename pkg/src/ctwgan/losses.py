"""WGAN-GP critic/generator objectives and uncertainty-weighted regularizer.

The critic pays a gradient penalty at points interpolated between real and
generated batches; the generator combines an adversarial term with an MSE
+ perceptual regularizer whose terms can be balanced by learnable
log-variance weights (negative Gaussian log-likelihood: sum e^{-s} L + s).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

GRAD_NORM_EPS = 1e-12
DEFAULT_MU = 10.0


@dataclass(frozen=True)
class InterpolationRule:
    seed: int = 0


@dataclass
class CriticLossTerms:
    em_term: Tensor      # E[D(fake)] - E[D(real)]
    gp_term: Tensor      # mean squared deviation of grad norm from 1
    mu: float
    total: Tensor
    grad_norms: np.ndarray = None   # per-sample ||grad D|| at x_tilde

    def scalars(self):
        out = {"em": self.em_term.item(), "gp": self.gp_term.item(),
               "critic_total": self.total.item()}
        if self.grad_norms is not None:
            out["grad_norm"] = float(self.grad_norms.mean())
        return out


@dataclass(frozen=True)
class RegularizerConfig:
    lambda1: float = 1.0        # MSE weight
    lambda2: float = 1.0        # perceptual weight
    mle_enabled: bool = True

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularizer weights must be non-negative")


@dataclass
class MleWeights:
    """One learnable log-variance per balanced loss term."""
    terms: tuple = ("mse", "perceptual")
    s: dict = None

    def __post_init__(self):
        if self.s is None:
            dtype = ad.get_default_dtype()
            self.s = {name: Tensor(np.zeros((), dtype=dtype), requires_grad=True)
                      for name in self.terms}

    def values(self):
        return {k: float(v.data) for k, v in self.s.items()}


@dataclass
class LossBundle:
    adversarial: Tensor
    mse: Tensor
    perceptual: Tensor
    combined: Tensor

    def scalars(self):
        return {"adversarial": self.adversarial.item(), "mse": self.mse.item(),
                "perceptual": self.perceptual.item(),
                "gen_total": self.combined.item()}


def interpolate(x_real, x_fake, epsilons):
    """Per-sample convex combination eps*real + (1-eps)*fake."""
    if x_real.shape != x_fake.shape:
        raise ad.GraphError(f"interpolate: shapes differ, {x_real.shape} vs "
                            f"{x_fake.shape}")
    b = x_real.shape[0]
    eps = np.asarray(epsilons, dtype=x_real.dtype).reshape(b, 1, 1, 1)
    e = ad.broadcast_to(Tensor(eps), x_real.shape)
    one_minus = ad.broadcast_to(Tensor(1.0 - eps), x_real.shape)
    return ad.add(ad.mul(e, x_real), ad.mul(one_minus, x_fake))


def sample_epsilons(batch, rule: InterpolationRule):
    rng = np.random.default_rng(rule.seed)
    return rng.uniform(0.0, 1.0, size=batch)


def gradient_penalty(critic_spec, params_d, x_tilde):
    """mean over the batch of (||grad_x D(x)||_2 - 1)^2 at x_tilde.

    The gradient node stays differentiable w.r.t. the critic parameters
    (double backward), which the critic update needs.
    """
    x_tilde.requires_grad = True
    scores = nn.apply_network(critic_spec, params_d, x_tilde)
    (gx,) = ad.grad(ad.tsum(scores), [x_tilde], create_graph=True)
    b = x_tilde.shape[0]
    flat = gx.reshape(b, int(np.prod(x_tilde.shape[1:])))
    sq = ad.tsum(ad.square(flat), axis=1)
    norms = ad.sqrt(sq + Tensor(np.asarray(GRAD_NORM_EPS, dtype=flat.dtype)))
    return ad.tmean(ad.square(norms - 1.0)), norms


def critic_loss(critic_spec, params_d, x_real, x_fake, mu=DEFAULT_MU,
                epsilons=None, rule: InterpolationRule = InterpolationRule()):
    """Earth-mover estimate plus gradient penalty."""
    if x_real.shape != x_fake.shape:
        raise ad.GraphError("critic_loss: real and generated batch shapes differ")
    if epsilons is None:
        epsilons = sample_epsilons(x_real.shape[0], rule)
    b = x_real.shape[0]
    x_tilde = interpolate(x_real.detach(), x_fake.detach(), epsilons)
    # one critic forward over [real, fake, tilde]; the per-sample critic
    # never couples batch elements, so scores are identical to three passes
    x_all = ad.concat([x_real.detach(), x_fake.detach(), x_tilde], axis=0)
    x_all.requires_grad = True
    scores = nn.apply_network(critic_spec, params_d, x_all)
    em = ad.tmean(ad.slice_axis(scores, 0, b, 2 * b)) \
        - ad.tmean(ad.slice_axis(scores, 0, 0, b))
    (gx,) = ad.grad(ad.tsum(ad.slice_axis(scores, 0, 2 * b, 3 * b)),
                    [x_all], create_graph=True)
    g_tilde = ad.slice_axis(gx, 0, 2 * b, 3 * b)
    flat = g_tilde.reshape(b, int(np.prod(x_real.shape[1:])))
    sq = ad.tsum(ad.square(flat), axis=1)
    norms = ad.sqrt(sq + Tensor(np.asarray(GRAD_NORM_EPS, dtype=flat.dtype)))
    gp = ad.tmean(ad.square(norms - 1.0))
    total = em + mu * gp
    return CriticLossTerms(em_term=em, gp_term=gp, mu=mu, total=total,
                           grad_norms=norms.data.copy())


def perceptual_distance(psi_spec, params_psi, x, x_hat):
    """Mean squared difference of frozen feature maps."""
    if x.shape != x_hat.shape:
        raise ad.GraphError("perceptual_distance: shape mismatch")
    b = x.shape[0]
    feats = nn.apply_network(psi_spec, params_psi,
                             ad.concat([x, x_hat], axis=0))
    fa = ad.slice_axis(feats, 0, 0, b)
    fb = ad.slice_axis(feats, 0, b, 2 * b)
    return ad.tmean(ad.square(fa - fb))


def mle_combine(terms, weights: MleWeights):
    """Negative Gaussian log-likelihood balance: sum_i e^{-s_i} L_i + s_i."""
    missing = [k for k in terms if k not in weights.s]
    if missing:
        raise KeyError(f"no MLE weight for terms: {missing}")
    out = None
    for name, loss in terms.items():
        s = weights.s[name]
        piece = ad.mul(ad.exp(-s), loss) + s
        out = piece if out is None else out + piece
    return out


def generator_loss(critic_spec, params_d, gen_spec, params_g, psi_spec,
                   params_psi, x_real, x_fbp,
                   config: RegularizerConfig = RegularizerConfig(),
                   weights: MleWeights = None, adversarial_enabled=True):
    """Adversarial term plus the (optionally MLE-balanced) regularizer.

    Gradients flow into the generator (and the MLE weights) only; critic
    and perceptual parameters are treated as constants.
    """
    x_hat = nn.apply_network(gen_spec, params_g, x_fbp)
    frozen_d = _frozen_view(params_d)
    if adversarial_enabled:
        adversarial = -ad.tmean(nn.apply_network(critic_spec, frozen_d, x_hat))
    else:
        adversarial = Tensor(np.zeros((), dtype=x_hat.dtype))
    mse = ad.tmean(ad.square(x_real - x_hat))
    l1 = config.lambda1
    l2 = config.lambda2
    if l2 == 0.0 and not config.mle_enabled:
        perceptual = Tensor(np.zeros((), dtype=x_hat.dtype))
    else:
        perceptual = perceptual_distance(psi_spec, params_psi, x_real, x_hat)
    if config.mle_enabled:
        if weights is None:
            raise ValueError("mle_enabled requires MleWeights")
        reg = mle_combine({"mse": l1 * mse, "perceptual": l2 * perceptual},
                          weights)
    else:
        reg = l1 * mse + l2 * perceptual
    combined = adversarial + reg
    return LossBundle(adversarial=adversarial, mse=mse, perceptual=perceptual,
                      combined=combined), x_hat


def _frozen_view(store: nn.ParamStore):
    """Same arrays, requires_grad off; keeps the caller's store trainable."""
    out = nn.ParamStore(seed=store.seed, scheme=store.scheme)
    for name, t in store.slots.items():
        frozen = Tensor.__new__(Tensor)
        frozen.data = t.data
        frozen.requires_grad = False
        frozen._parents = ()
        frozen._backward = None
        frozen.op = "leaf"
        out.slots[name] = frozen
    return out
