"""Alternating WGAN-GP training loop with Adam, checkpoints, determinism.

The whole run is a pure function of (config, dataset, seed): batches,
interpolation epsilons and initialization all come from one seeded
generator, and checkpoints capture enough state (moments, rng) that a
resumed run continues bit-exactly.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import ctsim, losses, nn
from .autodiff import Tensor

ADAM_EPS = 1e-8


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gen_steps: int = 1000
    n_critic: int = 5
    batch_size: int = 4
    lr: float = 1e-4
    # the MLE log-variances are scalars chasing ln(L); they need a much
    # larger step size than the network weights to track the losses
    s_lr: float = 1e-2
    betas: tuple = (0.0, 0.9)
    mu: float = losses.DEFAULT_MU
    regularizer: losses.RegularizerConfig = field(
        default_factory=losses.RegularizerConfig)
    adversarial_enabled: bool = True
    gen_depth: int = 3
    gen_channels: int = 32
    critic_depth: int = 3
    critic_channels: int = 16
    perceptual: nn.PerceptualNetConfig = field(
        default_factory=nn.PerceptualNetConfig)
    seed: int = 0
    checkpoint_interval: int = 0       # 0 = only final
    checkpoint_dir: str = None

    def __post_init__(self):
        if self.n_critic < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid training hyperparameters")


@dataclass
class DatasetHandle:
    truths: np.ndarray        # (n, H, W) noise-free phantoms
    inputs: np.ndarray        # (n, H, W) FBP reconstructions of noisy data
    split: str = "train"

    def __post_init__(self):
        if self.truths.shape != self.inputs.shape:
            raise ValueError("truth/input arrays must be aligned")

    def __len__(self):
        return self.truths.shape[0]


def make_synthetic_dataset(n, size, n_angles=180, noise: ctsim.NoiseModel = None,
                           seed=0, split="train"):
    """n random ellipse phantoms paired with their noisy-FBP inputs."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    geom = ctsim.default_geometry(size, n_angles)
    truths = np.empty((n, size, size))
    inputs = np.empty((n, size, size))
    for i in range(n):
        img = ctsim.make_phantom(ctsim.random_phantom_spec(rng), size)
        sino = ctsim.radon(img, geom)
        if noise is not None:
            sino = ctsim.apply_noise(
                sino, ctsim.NoiseModel(n0=noise.n0, sigma=noise.sigma,
                                       seed=int(rng.integers(2 ** 31)),
                                       mu_scale=noise.mu_scale))
        truths[i] = img
        inputs[i] = ctsim.fbp(sino, size)
    return DatasetHandle(truths, inputs, split)


def default_noise_for(size):
    """Desk-scale noise with optical depth ~4 across the image diameter."""
    return ctsim.NoiseModel(n0=1e4, sigma=5.0, mu_scale=4.0 / size)


# -- Adam ------------------------------------------------------------------

def init_moments(store: nn.ParamStore):
    return {name: (np.zeros_like(t.data), np.zeros_like(t.data))
            for name, t in store.slots.items()}


def adam_update(params, grads, moments, step, lr, betas):
    """Bias-corrected Adam step, in place on the param store.

    `params`/`grads` are dicts name -> Tensor; `moments` name -> (m, v).
    """
    b1, b2 = betas
    for name, p in params.items():
        g = grads[name].data
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient in slot {name!r}")
        m, v = moments[name]
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** step)
        vhat = v / (1 - b2 ** step)
        p.data = p.data - (lr * mhat / (np.sqrt(vhat) + ADAM_EPS)).astype(p.dtype)


# -- training state ----------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    gen_spec: nn.NetworkSpec
    critic_spec: nn.NetworkSpec
    psi_spec: nn.NetworkSpec
    params_g: nn.ParamStore
    params_d: nn.ParamStore
    params_psi: nn.ParamStore
    mle: losses.MleWeights
    moments_g: dict
    moments_d: dict
    moments_s: dict
    gen_step: int
    adam_step_g: int
    adam_step_d: int
    rng: np.random.Generator
    history: list


def init_state(config: TrainConfig):
    gen_spec = nn.build_generator(config.gen_depth, config.gen_channels,
                                  residual=True)
    critic_spec = nn.build_critic(config.critic_depth, config.critic_channels)
    psi_spec, params_psi = nn.build_perceptual(config.perceptual)
    params_g = nn.init_params(gen_spec, seed=config.seed)
    params_d = nn.init_params(critic_spec, seed=config.seed + 1)
    mle = losses.MleWeights(terms=("mse", "perceptual"))
    return TrainState(
        config=config, gen_spec=gen_spec, critic_spec=critic_spec,
        psi_spec=psi_spec, params_g=params_g, params_d=params_d,
        params_psi=params_psi, mle=mle,
        moments_g=init_moments(params_g), moments_d=init_moments(params_d),
        moments_s={k: (np.zeros_like(v.data), np.zeros_like(v.data))
                   for k, v in mle.s.items()},
        gen_step=0, adam_step_g=0, adam_step_d=0,
        rng=np.random.default_rng(config.seed), history=[])


def _batch(state: TrainState, data: DatasetHandle):
    """Uniform sampling with replacement, NCHW float tensors."""
    idx = state.rng.integers(0, len(data), size=state.config.batch_size)
    dtype = ad.get_default_dtype()
    x = Tensor(data.truths[idx][:, None].astype(dtype))
    y = Tensor(data.inputs[idx][:, None].astype(dtype))
    return x, y


def _record(state, step, **scalars):
    for name, value in scalars.items():
        if not np.isfinite(value):
            raise TrainingAborted(f"non-finite loss {name!r} at step {step}")
        state.history.append((step, name, value))


def train_step_critic(state: TrainState, data: DatasetHandle):
    cfg = state.config
    x_real, x_fbp = _batch(state, data)
    with ad.no_grad():
        x_fake = nn.apply_network(state.gen_spec, state.params_g, x_fbp)
    eps = state.rng.uniform(0.0, 1.0, size=cfg.batch_size)
    terms = losses.critic_loss(state.critic_spec, state.params_d,
                               x_real, x_fake.detach(), mu=cfg.mu,
                               epsilons=eps)
    wrt = state.params_d.names()
    grads = ad.grad(terms.total, [state.params_d.slots[n] for n in wrt])
    state.adam_step_d += 1
    adam_update({n: state.params_d.slots[n] for n in wrt},
                dict(zip(wrt, grads)), state.moments_d,
                state.adam_step_d, cfg.lr, cfg.betas)
    _record(state, state.gen_step, **terms.scalars())
    return terms


def train_step_generator(state: TrainState, data: DatasetHandle):
    cfg = state.config
    x_real, x_fbp = _batch(state, data)
    bundle, _ = losses.generator_loss(
        state.critic_spec, state.params_d, state.gen_spec, state.params_g,
        state.psi_spec, state.params_psi, x_real, x_fbp,
        config=cfg.regularizer, weights=state.mle,
        adversarial_enabled=cfg.adversarial_enabled)
    wrt = state.params_g.names()
    targets = [state.params_g.slots[n] for n in wrt]
    s_names = list(state.mle.s) if cfg.regularizer.mle_enabled else []
    targets += [state.mle.s[n] for n in s_names]
    grads = ad.grad(bundle.combined, targets)
    state.adam_step_g += 1
    adam_update({n: state.params_g.slots[n] for n in wrt},
                dict(zip(wrt, grads[:len(wrt)])), state.moments_g,
                state.adam_step_g, cfg.lr, cfg.betas)
    if s_names:
        adam_update({n: state.mle.s[n] for n in s_names},
                    dict(zip(s_names, grads[len(wrt):])), state.moments_s,
                    state.adam_step_g, cfg.s_lr, cfg.betas)
    _record(state, state.gen_step, **bundle.scalars())
    return bundle


def _init_mle_scales(state: TrainState, data: DatasetHandle):
    """Start each log-variance at ln(lambda_i * L_i) on one probe batch.

    That is the stationary point of the balancing objective for the
    current losses, so every balanced term begins at weight-one scale
    instead of spending thousands of steps drifting there.
    """
    cfg = state.config
    x_real, x_fbp = _batch(state, data)
    with ad.no_grad():
        x_hat = nn.apply_network(state.gen_spec, state.params_g, x_fbp)
        mse = float(np.mean((x_hat.data - x_real.data) ** 2))
        perc = losses.perceptual_distance(
            state.psi_spec, state.params_psi, x_real, x_hat).item()
    scaled = {"mse": cfg.regularizer.lambda1 * mse,
              "perceptual": cfg.regularizer.lambda2 * perc}
    for name, value in scaled.items():
        if name in state.mle.s:
            state.mle.s[name].data = np.asarray(
                np.log(max(value, 1e-8)), dtype=state.mle.s[name].data.dtype)


def train(config: TrainConfig, data: DatasetHandle, state: TrainState = None,
          progress=None):
    """Run the alternating loop for config.gen_steps generator steps."""
    if len(data) == 0:
        raise ValueError("dataset is empty")
    if state is None:
        state = init_state(config)
    cfg = state.config
    if state.gen_step == 0 and cfg.regularizer.mle_enabled:
        _init_mle_scales(state, data)
    while state.gen_step < cfg.gen_steps:
        state.gen_step += 1
        if cfg.adversarial_enabled:
            for _ in range(cfg.n_critic):
                train_step_critic(state, data)
        train_step_generator(state, data)
        if progress and state.gen_step % progress == 0:
            last = {n: v for _, n, v in state.history[-8:]}
            print(f"step {state.gen_step}: " +
                  " ".join(f"{k}={v:.4g}" for k, v in last.items()))
        if (cfg.checkpoint_dir and cfg.checkpoint_interval
                and state.gen_step % cfg.checkpoint_interval == 0):
            save_checkpoint(state, os.path.join(
                cfg.checkpoint_dir, f"step{state.gen_step:06d}"))
    return state


def reconstruct(state: TrainState, images):
    """Apply the trained generator to an (n, H, W) stack or one image."""
    dtype = ad.get_default_dtype()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        return reconstruct(state, images[None])[0]
    out = np.empty_like(images)
    with ad.no_grad():
        for i, img in enumerate(images):
            x = Tensor(np.asarray(img, dtype=dtype)[None, None])
            y = nn.apply_network(state.gen_spec, state.params_g, x)
            out[i] = y.data[0, 0].astype(np.float64)
    return out


# -- checkpointing -----------------------------------------------------------

def _save_moments(moments, path):
    np.savez(path, **{f"{n}.m": m for n, (m, v) in moments.items()},
             **{f"{n}.v": v for n, (m, v) in moments.items()})


def _load_moments(path):
    data = np.load(path)
    names = {k[:-2] for k in data.files}
    return {n: (data[f"{n}.m"].copy(), data[f"{n}.v"].copy()) for n in names}


def save_checkpoint(state: TrainState, prefix):
    """Write params, optimizer moments, MLE weights and rng state."""
    os.makedirs(os.path.dirname(prefix) or ".", exist_ok=True)
    nn.save_params(state.params_g, prefix + ".gen.bin")
    nn.save_params(state.params_d, prefix + ".critic.bin")
    _save_moments(state.moments_g, prefix + ".mg.npz")
    _save_moments(state.moments_d, prefix + ".md.npz")
    _save_moments(state.moments_s, prefix + ".ms.npz")
    meta = {
        "gen_step": state.gen_step,
        "adam_step_g": state.adam_step_g,
        "adam_step_d": state.adam_step_d,
        "mle": {k: float(v.data) for k, v in state.mle.s.items()},
        "rng_state": state.rng.bit_generator.state,
        "history": state.history,
    }
    with open(prefix + ".meta.json", "w") as fh:
        json.dump(meta, fh)


def load_checkpoint(config: TrainConfig, prefix):
    state = init_state(config)
    state.params_g = nn.load_params(prefix + ".gen.bin")
    state.params_d = nn.load_params(prefix + ".critic.bin")
    state.moments_g = _load_moments(prefix + ".mg.npz")
    state.moments_d = _load_moments(prefix + ".md.npz")
    state.moments_s = _load_moments(prefix + ".ms.npz")
    with open(prefix + ".meta.json") as fh:
        meta = json.load(fh)
    dtype = ad.get_default_dtype()
    for k, v in meta["mle"].items():
        state.mle.s[k] = Tensor(np.asarray(v, dtype=dtype), requires_grad=True)
    state.gen_step = meta["gen_step"]
    state.adam_step_g = meta["adam_step_g"]
    state.adam_step_d = meta["adam_step_d"]
    state.rng.bit_generator.state = meta["rng_state"]
    state.history = [tuple(row) for row in meta["history"]]
    return state


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "value"])
        for step, name, value in history:
            writer.writerow([step, name, repr(float(value))])
