"""Experiment pipeline: simulate -> train -> evaluate -> report.

Driven by a single JSON config; every stage writes into the output
directory and the manifest records enough to reproduce the run byte for
byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import shutil
from dataclasses import dataclass, field, asdict

import numpy as np

from . import baselines, ctsim, losses, metrics, nn, train as training

METHOD_ORIGINAL = "Original"
METHOD_FBP = "FBP"
METHOD_MSE = "MSE 100%"
METHOD_MSE50 = "MSE 50%"
METHOD_NLM = "NLM Filter"
METHOD_WGAN = "TextureWGAN"

ALL_METHODS = (METHOD_FBP, METHOD_MSE, METHOD_MSE50, METHOD_NLM, METHOD_WGAN)

REPORT_COLUMNS = ("PSNR", "SSIM", "rangefilt", "stdfilt", "entropyfilt",
                  "Contrast", "Correlation", "Energy", "Homogeneity")

_PCT_KEYS = {"rangefilt": "rangefilt_pct", "stdfilt": "stdfilt_pct",
             "entropyfilt": "entropyfilt_pct", "Contrast": "contrast_pct",
             "Correlation": "correlation_pct", "Energy": "energy_pct",
             "Homogeneity": "homogeneity_pct"}


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    seed: int = 0
    image_size: int = 64
    n_angles: int = 120
    n_train: int = 16
    n_eval: int = 8
    dataset_dir: str = None          # pre-converted image pairs, else synthetic
    # calibrated so FBP lands near 21 dB at the default desk scale
    noise_n0: float = 350.0
    noise_sigma: float = 5.0
    noise_mu_scale: float = None     # default: 4 / image_size
    methods: tuple = ALL_METHODS
    nlm: baselines.NlmConfig = field(default_factory=baselines.NlmConfig)
    blend_alpha: float = 0.5
    mse_train: training.TrainConfig = None
    wgan_train: training.TrainConfig = None
    glcm: metrics.GlcmConfig = field(default_factory=metrics.GlcmConfig)
    nbhd: metrics.NeighborhoodConfig = field(
        default_factory=metrics.NeighborhoodConfig)

    def __post_init__(self):
        if not self.methods:
            raise ValueError("method list must be non-empty")
        if self.noise_mu_scale is None:
            self.noise_mu_scale = 4.0 / self.image_size
        if self.mse_train is None:
            self.mse_train = training.TrainConfig(
                gen_steps=1500, adversarial_enabled=False, batch_size=2,
                regularizer=losses.RegularizerConfig(
                    lambda1=1.0, lambda2=0.0, mle_enabled=False),
                gen_depth=2, gen_channels=8, seed=self.seed)
        if self.wgan_train is None:
            self.wgan_train = training.TrainConfig(
                gen_steps=3000, adversarial_enabled=True, batch_size=2,
                regularizer=losses.RegularizerConfig(mle_enabled=True),
                gen_depth=2, gen_channels=8,
                critic_depth=2, critic_channels=8,
                perceptual=nn.PerceptualNetConfig(layers=2, channels=4),
                seed=self.seed)

    def noise_model(self):
        return ctsim.NoiseModel(n0=self.noise_n0, sigma=self.noise_sigma,
                                mu_scale=self.noise_mu_scale)


def config_from_dict(d):
    d = dict(d)
    for key, cls in (("nlm", baselines.NlmConfig),
                     ("glcm", metrics.GlcmConfig),
                     ("nbhd", metrics.NeighborhoodConfig)):
        if key in d and isinstance(d[key], dict):
            d[key] = cls(**{k: tuple(v) if isinstance(v, list) else v
                            for k, v in d[key].items()})
    for key in ("mse_train", "wgan_train"):
        if key in d and isinstance(d[key], dict):
            sub = dict(d[key])
            if "regularizer" in sub and isinstance(sub["regularizer"], dict):
                sub["regularizer"] = losses.RegularizerConfig(**sub["regularizer"])
            if "betas" in sub:
                sub["betas"] = tuple(sub["betas"])
            if "perceptual" in sub and isinstance(sub["perceptual"], dict):
                sub["perceptual"] = nn.PerceptualNetConfig(**sub["perceptual"])
            d[key] = training.TrainConfig(**sub)
    if "methods" in d:
        d["methods"] = tuple(d["methods"])
    return ExperimentConfig(**d)


def load_config(path, seed_override=None):
    with open(path) as fh:
        cfg = config_from_dict(json.load(fh))
    if seed_override is not None:
        cfg.seed = seed_override
        cfg.mse_train.seed = seed_override
        cfg.wgan_train.seed = seed_override
    return cfg


def config_to_dict(cfg: ExperimentConfig):
    return json.loads(json.dumps(asdict(cfg), default=_json_default))


def _json_default(obj):
    if isinstance(obj, tuple):
        return list(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


# -- stages ------------------------------------------------------------------


def stage_simulate(cfg: ExperimentConfig, out):
    """Build (or load) the train/eval datasets and persist them."""
    ddir = os.path.join(out, "dataset")
    os.makedirs(ddir, exist_ok=True)
    if cfg.dataset_dir:
        tr = load_dataset_dir(os.path.join(cfg.dataset_dir, "train"), "train")
        ev = load_dataset_dir(os.path.join(cfg.dataset_dir, "eval"), "eval")
    else:
        noise = cfg.noise_model()
        tr = training.make_synthetic_dataset(
            cfg.n_train, cfg.image_size, cfg.n_angles, noise,
            seed=cfg.seed, split="train")
        ev = training.make_synthetic_dataset(
            cfg.n_eval, cfg.image_size, cfg.n_angles, noise,
            seed=cfg.seed + 10_000, split="eval")
    for handle in (tr, ev):
        for i in range(len(handle)):
            stem = os.path.join(ddir, f"{handle.split}_{i:03d}")
            ctsim.save_image(handle.truths[i], stem + ".truth")
            ctsim.save_image(handle.inputs[i], stem + ".input")
    return tr, ev


def load_dataset_dir(path, split):
    """Read <stem>.truth / <stem>.input pairs written in the binary format."""
    stems = sorted(f[:-6] for f in os.listdir(path) if f.endswith(".truth"))
    if not stems:
        raise ValueError(f"no .truth images under {path}")
    truths = np.stack([ctsim.load_image(os.path.join(path, s + ".truth"))
                       for s in stems])
    inputs = np.stack([ctsim.load_image(os.path.join(path, s + ".input"))
                       for s in stems])
    return training.DatasetHandle(truths, inputs, split)


def load_saved_dataset(out, split):
    ddir = os.path.join(out, "dataset")
    stems = sorted(f[:-6] for f in os.listdir(ddir)
                   if f.startswith(split) and f.endswith(".truth"))
    truths = np.stack([ctsim.load_image(os.path.join(ddir, s + ".truth"))
                       for s in stems])
    inputs = np.stack([ctsim.load_image(os.path.join(ddir, s + ".input"))
                       for s in stems])
    return training.DatasetHandle(truths, inputs, split)


def stage_train(cfg: ExperimentConfig, out, tr=None, progress=None):
    """Train whichever learned methods the config asks for."""
    if tr is None:
        tr = load_saved_dataset(out, "train")
    states = {}
    for method, tcfg in ((METHOD_MSE, cfg.mse_train),
                         (METHOD_WGAN, cfg.wgan_train)):
        if method not in cfg.methods and not (
                method == METHOD_MSE and METHOD_MSE50 in cfg.methods):
            continue
        tag = "mse" if method == METHOD_MSE else "wgan"
        tdir = os.path.join(out, "train", tag)
        os.makedirs(tdir, exist_ok=True)
        state = training.train(tcfg, tr, progress=progress)
        training.save_checkpoint(state, os.path.join(tdir, "final"))
        training.write_history_csv(state.history,
                                   os.path.join(tdir, "history.csv"))
        states[method] = state
    return states


def stage_evaluate(cfg: ExperimentConfig, out, ev=None, states=None):
    """Produce per-method eval images."""
    if ev is None:
        ev = load_saved_dataset(out, "eval")
    outputs = {METHOD_ORIGINAL: ev.truths, METHOD_FBP: ev.inputs}
    if states is None:
        states = {}
        for method, tag, tcfg in ((METHOD_MSE, "mse", cfg.mse_train),
                                  (METHOD_WGAN, "wgan", cfg.wgan_train)):
            prefix = os.path.join(out, "train", tag, "final")
            if os.path.exists(prefix + ".meta.json"):
                states[method] = training.load_checkpoint(tcfg, prefix)
    if METHOD_MSE in states:
        outputs[METHOD_MSE] = training.reconstruct(states[METHOD_MSE],
                                                   ev.inputs)
    if METHOD_WGAN in states and METHOD_WGAN in cfg.methods:
        outputs[METHOD_WGAN] = training.reconstruct(states[METHOD_WGAN],
                                                    ev.inputs)
    if METHOD_MSE50 in cfg.methods:
        if METHOD_MSE not in outputs:
            raise ValueError("MSE 50% requires the MSE 100% method")
        outputs[METHOD_MSE50] = np.stack([
            baselines.blend(f, m, cfg.blend_alpha)
            for f, m in zip(ev.inputs, outputs[METHOD_MSE])])
    if METHOD_NLM in cfg.methods:
        outputs[METHOD_NLM] = np.stack([baselines.nlm_filter(img, cfg.nlm)
                                        for img in ev.inputs])
    outputs = {m: v for m, v in outputs.items()
               if m == METHOD_ORIGINAL or m in cfg.methods}
    edir = os.path.join(out, "eval")
    for method, stack in outputs.items():
        mdir = os.path.join(edir, method.replace(" ", "_").replace("%", "pct"))
        os.makedirs(mdir, exist_ok=True)
        for i, img in enumerate(stack):
            ctsim.save_image(img, os.path.join(mdir, f"img_{i:03d}.bin"))
    return outputs


def stage_report(cfg: ExperimentConfig, out, outputs=None):
    """Compute metrics, normalize to originals, emit CSV + markdown."""
    if outputs is None:
        outputs = _load_eval_outputs(cfg, out)
    originals = outputs[METHOD_ORIGINAL]
    agg = {}
    for method, stack in outputs.items():
        per_image = [metrics.evaluate_image(img, orig, cfg.glcm, cfg.nbhd)
                     for img, orig in zip(stack, originals)]
        agg[method] = metrics.aggregate(per_image)
    rows = []
    for method in (METHOD_ORIGINAL,) + tuple(m for m in cfg.methods):
        if method not in agg:
            continue
        rel = metrics.relative_report(agg[method], agg[METHOD_ORIGINAL])
        rows.append((method, rel))
    rdir = os.path.join(out, "report")
    os.makedirs(rdir, exist_ok=True)
    emit_report(rows, rdir)
    return rows


def _load_eval_outputs(cfg, out):
    edir = os.path.join(out, "eval")
    outputs = {}
    for method in (METHOD_ORIGINAL,) + tuple(cfg.methods):
        mdir = os.path.join(edir, method.replace(" ", "_").replace("%", "pct"))
        if not os.path.isdir(mdir):
            continue
        files = sorted(f[:-4] for f in os.listdir(mdir) if f.endswith(".bin"))
        outputs[method] = np.stack([
            ctsim.load_image(os.path.join(mdir, f + ".bin")) for f in files])
    return outputs


def _cell(method, column, rel):
    if column in ("PSNR", "SSIM"):
        if method == METHOD_ORIGINAL:
            return "N/A"
        v = rel["psnr" if column == "PSNR" else "ssim"]
        return "inf" if np.isinf(v) else f"{v:.2f}"
    v = rel[_PCT_KEYS[column]]
    return "N/A" if not np.isfinite(v) else f"{v:.2f}"


def emit_report(rows, rdir):
    """CSV plus a two-block markdown table, one row per method."""
    if not rows:
        raise ValueError("need at least one method row")
    keys = set(rows[0][1])
    for method, rel in rows[1:]:
        extra = set(rel) - {"psnr", "ssim"}
        base = keys - {"psnr", "ssim"}
        if extra != base:
            raise ValueError(f"inconsistent metric keys for {method!r}")
    csv_path = os.path.join(rdir, "metrics.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("Method",) + REPORT_COLUMNS)
        for method, rel in rows:
            writer.writerow([method] + [_cell(method, c, rel)
                                        for c in REPORT_COLUMNS])
    block1 = REPORT_COLUMNS[:5]
    block2 = REPORT_COLUMNS[5:]
    lines = []
    for block in (block1, block2):
        lines.append("| Method | " + " | ".join(
            c if c in ("PSNR", "SSIM") else c + " (%)" for c in block) + " |")
        lines.append("|" + "---|" * (len(block) + 1))
        for method, rel in rows:
            lines.append("| " + method + " | " +
                         " | ".join(_cell(method, c, rel) for c in block) + " |")
        lines.append("")
    with open(os.path.join(rdir, "report.md"), "w") as fh:
        fh.write("\n".join(lines))
    return csv_path


def run_experiment(cfg: ExperimentConfig, out, progress=None):
    """Full pipeline; writes a manifest first, a `failed` marker on error."""
    os.makedirs(out, exist_ok=True)
    manifest = {"config": config_to_dict(cfg), "seed": cfg.seed,
                "format_version": ctsim.IMAGE_FORMAT_VERSION}
    manifest["config_hash"] = hashlib.sha256(
        json.dumps(manifest["config"], sort_keys=True).encode()).hexdigest()
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    stage = "simulate"
    try:
        tr, ev = stage_simulate(cfg, out)
        stage = "train"
        states = stage_train(cfg, out, tr, progress=progress)
        stage = "evaluate"
        outputs = stage_evaluate(cfg, out, ev, states)
        stage = "report"
        rows = stage_report(cfg, out, outputs)
    except Exception as exc:
        with open(os.path.join(out, "failed"), "w") as fh:
            fh.write(f"{stage}: {exc}\n")
        raise StageError(stage, exc) from exc
    return rows
