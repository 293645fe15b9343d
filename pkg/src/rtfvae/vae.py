"""Dense variational autoencoder for RTF vectors with hand-written backprop."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import io
from ._validation import check_rtf_array
from .optim import Adam

ACTIVATIONS = ("swish", "linear")
HIDDEN = (256, 128, 64)
MODEL_FORMAT = "rtfvae-model/1"


def swish(x):
    return x * expit(x)


def swish_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


@dataclass
class Dense:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray
    activation: str = "swish"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError("bias length must equal the layer's output width")


@dataclass
class NetworkParameters:
    layers: list
    role: str

    def __post_init__(self):
        if self.role not in ("encoder", "decoder"):
            raise ValueError("role must be 'encoder' or 'decoder'")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ValueError("consecutive layer dimensions do not chain")

    @property
    def n_inputs(self):
        return self.layers[0].weight.shape[0]

    @property
    def n_outputs(self):
        return self.layers[-1].weight.shape[1]

    @property
    def n_params(self):
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def arrays(self):
        """Weight and bias arrays in declaration order (views, not copies)."""
        out = []
        for l in self.layers:
            out += [l.weight, l.bias]
        return out

    def copy(self):
        return copy.deepcopy(self)

    def shapes(self):
        return [{"in": l.weight.shape[0], "out": l.weight.shape[1], "activation": l.activation}
                for l in self.layers]


@dataclass(frozen=True)
class LatentPosterior:
    mu: np.ndarray
    log_var: np.ndarray


def init_network(sizes, role, rng):
    """Glorot-uniform weights, zero biases; swish on hidden layers, linear output."""
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        act = "linear" if i == len(sizes) - 2 else "swish"
        layers.append(Dense(rng.uniform(-limit, limit, (fan_in, fan_out)), np.zeros(fan_out), act))
    return NetworkParameters(layers, role)


def init_vae(n_features, latent_dim=5, hidden=HIDDEN, seed=0):
    rng = np.random.default_rng(seed)
    enc = init_network([n_features, *hidden, 2 * latent_dim], "encoder", rng)
    dec = init_network([latent_dim, *hidden[::-1], n_features], "decoder", rng)
    return enc, dec


def parameter_count(n_features, latent_dim=5, hidden=HIDDEN):
    """Closed-form count of trainable weights and biases."""
    enc = [n_features, *hidden, 2 * latent_dim]
    dec = [latent_dim, *hidden[::-1], n_features]
    return sum(a * b + b for sizes in (enc, dec) for a, b in zip(sizes, sizes[1:]))


def forward(net, x):
    """Batch forward pass; returns the output and the cache for :func:`backward`."""
    cache = []
    a = x
    for layer in net.layers:
        pre = a @ layer.weight + layer.bias
        cache.append((a, pre))
        a = swish(pre) if layer.activation == "swish" else pre
    return a, cache


def backward(net, cache, grad_out):
    """Gradients of a scalar w.r.t. every layer array and the network input."""
    grads = [None] * (2 * len(net.layers))
    g = grad_out
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        a, pre = cache[i]
        if layer.activation == "swish":
            g = g * swish_grad(pre)
        grads[2 * i] = a.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ layer.weight.T
    return grads, g


def _as_batch(x, width, what):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != width:
        raise ValueError(f"{what} has length {x.shape[-1]}, expected {width}")
    return x, single


def encode(enc, h):
    """Posterior mean and log-variance for centered RTF vector(s) ``h``."""
    x, single = _as_batch(h, enc.n_inputs, "encoder input")
    out, _ = forward(enc, x)
    q = out.shape[1] // 2
    mu, log_var = out[:, :q], out[:, q:]
    if single:
        mu, log_var = mu[0], log_var[0]
    return LatentPosterior(mu, log_var)


def decode(dec, z):
    """Decoder mean for latent vector(s) ``z``; returns centered RTF vector(s)."""
    x, single = _as_batch(z, dec.n_inputs, "latent vector")
    out, _ = forward(dec, x)
    return out[0] if single else out


def sample_latent(post, rng):
    """Reparameterized draw ``mu + exp(log_var / 2) * e`` with ``e ~ N(0, I)``."""
    e = rng.standard_normal(np.shape(post.mu))
    return post.mu + np.exp(0.5 * post.log_var) * e


def vae_cost(batch, reconstructions, posteriors, gamma, targets=None):
    """Normalized reconstruction error traded against the latent KL term.

    ``gamma * mean||t - r||^2 / mean||t||^2
    - (1 - gamma) / (2Q) * mean(sum(log_var) - ||mu||^2 - sum(exp(log_var)))``

    ``t`` is ``targets`` when given (denoising training), otherwise ``batch``.
    The KL term carries no ``+Q`` constant.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    t = batch if targets is None else np.atleast_2d(np.asarray(targets, dtype=float))
    r = np.atleast_2d(np.asarray(reconstructions, dtype=float))
    if isinstance(posteriors, LatentPosterior):
        mu, log_var = np.atleast_2d(posteriors.mu), np.atleast_2d(posteriors.log_var)
    else:
        mu = np.stack([p.mu for p in posteriors])
        log_var = np.stack([p.log_var for p in posteriors])
    if not (t.shape[0] == r.shape[0] == mu.shape[0] == batch.shape[0]):
        raise ValueError("batch, reconstructions and posteriors differ in length")
    denom = np.mean(np.sum(t * t, axis=1))
    if denom == 0.0:
        raise ValueError("all-zero batch: reconstruction term undefined")
    rec = np.mean(np.sum((t - r) ** 2, axis=1)) / denom
    q = mu.shape[1]
    kl = np.mean(np.sum(log_var, axis=1) - np.sum(mu * mu, axis=1) - np.sum(np.exp(log_var), axis=1))
    return float(gamma * rec - (1.0 - gamma) / (2.0 * q) * kl)


def vae_loss_and_grads(enc, dec, batch, gamma, noise, targets=None):
    """Cost and gradients for one minibatch with the latent noise ``noise`` held fixed.

    Returns ``(cost, encoder_grads, decoder_grads)`` with gradients listed in
    :meth:`NetworkParameters.arrays` order.
    """
    x = np.atleast_2d(batch)
    t = x if targets is None else np.atleast_2d(targets)
    n = x.shape[0]
    out, enc_cache = forward(enc, x)
    q = out.shape[1] // 2
    mu, log_var = out[:, :q], out[:, q:]
    std = np.exp(0.5 * log_var)
    z = mu + std * noise
    recon, dec_cache = forward(dec, z)

    denom = np.mean(np.sum(t * t, axis=1))
    if denom == 0.0:
        raise ValueError("all-zero batch: reconstruction term undefined")
    diff = recon - t
    rec = np.mean(np.sum(diff * diff, axis=1)) / denom
    var = std * std
    kl = np.mean(np.sum(log_var - mu * mu - var, axis=1))
    kl_w = (1.0 - gamma) / (2.0 * q)
    cost = gamma * rec - kl_w * kl

    g_recon = (2.0 * gamma / (n * denom)) * diff
    dec_grads, g_z = backward(dec, dec_cache, g_recon)
    g_mu = g_z + (2.0 * kl_w / n) * mu
    g_logvar = g_z * noise * 0.5 * std - (kl_w / n) * (1.0 - var)
    enc_grads, _ = backward(enc, enc_cache, np.concatenate([g_mu, g_logvar], axis=1))
    return float(cost), enc_grads, dec_grads


def vae_gradients(params, batch, gamma, rng, targets=None):
    """Gradients of :func:`vae_cost` for the pair ``params = (enc, dec)``.

    One latent draw per datum from ``rng``.
    """
    enc, dec = params
    x = np.atleast_2d(batch)
    noise = rng.standard_normal((x.shape[0], dec.n_inputs))
    return vae_loss_and_grads(enc, dec, x, gamma, noise, targets)


def deterministic_cost(enc, dec, x, gamma, targets=None):
    """Cost with ``z = mu`` (no sampling), used for validation."""
    x = np.atleast_2d(x)
    return vae_loss_and_grads(enc, dec, x, gamma, np.zeros((x.shape[0], dec.n_inputs)),
                              targets)[0]


@dataclass
class TrainingConfig:
    gamma: float = 0.95
    sigma_x_sq: float = 0.5  # decoder variance; absorbed by the gamma trade-off
    batch_size: int = 128
    latent_dim: int = 5
    hidden: tuple = HIDDEN
    lr: float = 1e-3
    lr_drop_factor: float = 5.0
    patience_lr: int = 5
    patience_stop: int = 10
    min_delta: float = 1e-3
    max_epochs: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0

    @property
    def best_val_loss(self):
        return self.val_loss[self.best_epoch] if self.val_loss else math.nan

    def summary(self):
        return (f"epochs={len(self.train_loss)} best_epoch={self.best_epoch} "
                f"best_val_loss={self.best_val_loss:.6f} "
                f"final_train_loss={self.train_loss[-1]:.6f}" if self.train_loss else "untrained")


def _check_finite(value, what):
    if not math.isfinite(value):
        raise FloatingPointError(f"{what} became {value}; training diverged")


def _run_epoch(enc, dec, opt, x, targets, cfg, lr, rng):
    params = enc.arrays() + dec.arrays()
    n_enc = len(enc.arrays())
    order = rng.permutation(x.shape[0])
    costs = []
    for start in range(0, x.shape[0], cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        t = None if targets is None else targets[idx]
        noise = rng.standard_normal((idx.size, cfg.latent_dim))
        cost, ge, gd = vae_loss_and_grads(enc, dec, x[idx], cfg.gamma, noise, t)
        _check_finite(cost, "training loss")
        opt.step(params, ge + gd, lr)
        costs.append(cost)
    return float(np.mean(costs))


def fit_vae(x_train, x_val, cfg, targets=None, val_targets=None, init=None, callback=None):
    """Minibatch Adam on centered data with plateau LR drops and early stopping.

    The learning rate is divided by ``lr_drop_factor`` when the validation
    loss has not improved by ``min_delta`` for ``patience_lr`` epochs. Training
    stops after ``patience_stop`` epochs without such an improvement and the
    parameters of the lowest-validation-loss epoch are restored.
    """
    x_train = np.asarray(x_train, dtype=float)
    x_val = np.asarray(x_val, dtype=float)
    if x_train.shape[0] == 0:
        raise ValueError("training set is empty")
    if x_val.shape[0] == 0:
        raise ValueError("validation set is empty")
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        enc, dec = init_vae(x_train.shape[1], cfg.latent_dim, cfg.hidden, seed=rng.integers(2**63))
    else:
        enc, dec = init[0].copy(), init[1].copy()
    opt = Adam(enc.arrays() + dec.arrays(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    report = TrainReport()
    lr = cfg.lr
    best = (math.inf, enc.copy(), dec.copy())
    ref_lr = ref_stop = math.inf
    wait_lr = wait_stop = 0
    for epoch in range(cfg.max_epochs):
        train_loss = _run_epoch(enc, dec, opt, x_train, targets, cfg, lr, rng)
        val_loss = deterministic_cost(enc, dec, x_val, cfg.gamma, val_targets)
        _check_finite(val_loss, "validation loss")
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        report.learning_rate.append(lr)
        if val_loss < best[0]:
            best = (val_loss, enc.copy(), dec.copy())
            report.best_epoch = epoch
        if callback is not None:
            callback(epoch, train_loss, val_loss, lr)
        if val_loss < ref_lr - cfg.min_delta:
            ref_lr, wait_lr = val_loss, 0
        else:
            wait_lr += 1
            if wait_lr >= cfg.patience_lr:
                lr /= cfg.lr_drop_factor
                wait_lr = 0
        if val_loss < ref_stop - cfg.min_delta:
            ref_stop, wait_stop = val_loss, 0
        else:
            wait_stop += 1
            if wait_stop >= cfg.patience_stop:
                break
    report.stop_epoch = len(report.train_loss) - 1
    return (best[1], best[2]), report


def train(dataset, cfg=None, callback=None):
    """Train on ``dataset.training_set`` centered by ``dataset.mean_rtf``."""
    cfg = cfg or TrainingConfig()
    mean = dataset.mean_rtf
    return fit_vae(dataset.training_set - mean, dataset.validation - mean, cfg, callback=callback)


def fine_tune(params, pairs, mean_rtf, epochs=15, lr=1e-4, cfg=None):
    """Continue training so that noisy inputs reconstruct their clean targets.

    ``pairs`` is ``(noisy, clean)``, two arrays of uncentered RTF rows. Runs
    a fixed number of epochs with a fresh Adam state and no early stopping.
    """
    cfg = cfg or TrainingConfig()
    noisy, clean = (np.atleast_2d(np.asarray(a, dtype=float)) for a in pairs)
    if noisy.shape[0] == 0:
        raise ValueError("fine-tuning needs at least one pair")
    if noisy.shape != clean.shape:
        raise ValueError("noisy and clean arrays differ in shape")
    enc, dec = params[0].copy(), params[1].copy()
    x, t = noisy - mean_rtf, clean - mean_rtf
    opt = Adam(enc.arrays() + dec.arrays(), lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    losses = [_run_epoch(enc, dec, opt, x, t, cfg, lr, rng) for _ in range(epochs)]
    return (enc, dec), losses


def save_model(path, enc, dec, mean_rtf, hyperparameters=None, seed=None):
    """Write ``<path>.json`` (manifest) and ``<path>.f64`` (weights, then the mean RTF)."""
    path = Path(path)
    json_path, bin_path = path.with_suffix(".json"), path.with_suffix(".f64")
    manifest = {
        "format": MODEL_FORMAT,
        "encoder": enc.shapes(),
        "decoder": dec.shapes(),
        "n_features": enc.n_inputs,
        "latent_dim": dec.n_inputs,
        "hyperparameters": hyperparameters or {},
        "seed": seed,
        "weights_file": bin_path.name,
        "layout": "encoder then decoder; per layer weight (in x out, row-major) then bias; "
                  "then mean_rtf",
    }
    flat = np.concatenate([a.ravel() for a in enc.arrays() + dec.arrays()] +
                          [np.asarray(mean_rtf, dtype=float)])
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    io.write_f64_matrix(bin_path, flat)
    return json_path


def load_model(path):
    """Inverse of :func:`save_model`; returns ``(enc, dec, mean_rtf, manifest)``."""
    path = Path(path)
    json_path = path.with_suffix(".json")
    manifest = json.loads(json_path.read_text())
    if manifest.get("format") != MODEL_FORMAT:
        raise ValueError(f"{json_path}: unsupported model format {manifest.get('format')!r}")
    flat = io.read_f64_matrix(json_path.with_name(manifest["weights_file"]), 1).ravel()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > flat.size:
            raise ValueError("weights file is shorter than the manifest requires")
        out = flat[pos:pos + n]
        pos += n
        return out

    nets = []
    for role in ("encoder", "decoder"):
        layers = []
        for spec in manifest[role]:
            w = take(spec["in"] * spec["out"]).reshape(spec["in"], spec["out"]).copy()
            b = take(spec["out"]).copy()
            layers.append(Dense(w, b, spec["activation"]))
        nets.append(NetworkParameters(layers, role))
    mean = take(manifest["n_features"]).copy()
    if pos != flat.size:
        raise ValueError("weights file is longer than the manifest declares")
    return nets[0], nets[1], mean, manifest


class RtfVAE(TransformerMixin, BaseEstimator):
    """Scikit-learn style wrapper around the RTF variational autoencoder.

    ``fit`` learns the mean RTF and the network on uncentered RTF rows;
    ``transform`` maps rows to posterior means, ``inverse_transform`` decodes
    latent rows back to uncentered RTFs, and ``predict`` chains both
    (encode-decode denoising).

    Parameters
    ----------
    latent_dim : int
        Bottleneck dimension.
    hidden : tuple of int
        Encoder hidden widths; the decoder mirrors them.
    gamma : float
        Weight of the reconstruction term against the KL term.
    batch_size, learning_rate, lr_drop_factor, patience_lr, patience_stop,
    min_delta, max_epochs :
        Optimization and schedule settings, see :func:`fit_vae`.
    random_state : int
        Seed for initialization, batching and latent sampling.
    """

    def __init__(self, latent_dim=5, hidden=HIDDEN, gamma=0.95, batch_size=128,
                 learning_rate=1e-3, lr_drop_factor=5.0, patience_lr=5, patience_stop=10,
                 min_delta=1e-3, max_epochs=500, random_state=0):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.gamma = gamma
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_drop_factor = lr_drop_factor
        self.patience_lr = patience_lr
        self.patience_stop = patience_stop
        self.min_delta = min_delta
        self.max_epochs = max_epochs
        self.random_state = random_state

    def _config(self):
        return TrainingConfig(
            gamma=self.gamma, batch_size=self.batch_size, latent_dim=self.latent_dim,
            hidden=self.hidden, lr=self.learning_rate, lr_drop_factor=self.lr_drop_factor,
            patience_lr=self.patience_lr, patience_stop=self.patience_stop,
            min_delta=self.min_delta, max_epochs=self.max_epochs, seed=self.random_state,
        )

    def fit(self, X, y=None, X_val=None, y_val=None, mean_rtf=None):
        """Fit on rows of ``X``; ``y`` (optional) holds clean targets for denoising training.

        ``X_val`` defaults to ``X``. ``mean_rtf`` defaults to the mean of ``y``
        (or ``X``).
        """
        X = check_rtf_array(X)
        y = None if y is None else check_rtf_array(y, X.shape[1])
        X_val = X if X_val is None else check_rtf_array(X_val, X.shape[1])
        y_val = None if y_val is None else check_rtf_array(y_val, X.shape[1])
        if mean_rtf is None:
            mean_rtf = (X if y is None else y).mean(axis=0)
        self.mean_rtf_ = np.asarray(mean_rtf, dtype=float).copy()
        m = self.mean_rtf_
        (self.encoder_, self.decoder_), self.report_ = fit_vae(
            X - m, X_val - m, self._config(),
            None if y is None else y - m, None if y_val is None else y_val - m,
        )
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_parameters(cls, enc, dec, mean_rtf, **params):
        est = cls(latent_dim=dec.n_inputs, **params)
        est.encoder_, est.decoder_ = enc, dec
        est.mean_rtf_ = np.asarray(mean_rtf, dtype=float).copy()
        est.n_features_in_ = enc.n_inputs
        est.report_ = None
        return est

    def posterior(self, X):
        check_is_fitted(self, "encoder_")
        X = check_rtf_array(X, self.n_features_in_)
        return encode(self.encoder_, X - self.mean_rtf_)

    def transform(self, X):
        return self.posterior(X).mu

    def inverse_transform(self, Z):
        check_is_fitted(self, "decoder_")
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return decode(self.decoder_, Z) + self.mean_rtf_

    def predict(self, X):
        return self.inverse_transform(self.transform(X))

    def score(self, X, y=None):
        """Mean signal-to-error ratio (dB) of ``predict(X)`` against ``y`` (default ``X``)."""
        from .evaluation import ser

        X = check_rtf_array(X, self.n_features_in_)
        return ser(X if y is None else check_rtf_array(y, self.n_features_in_), self.predict(X))

    def fine_tune(self, X_noisy, y_clean, epochs=15, learning_rate=1e-4):
        """Return a copy trained further to map ``X_noisy`` rows onto ``y_clean``."""
        check_is_fitted(self, "encoder_")
        X = check_rtf_array(X_noisy, self.n_features_in_)
        y = check_rtf_array(y_clean, self.n_features_in_)
        cfg = self._config()
        new = copy.deepcopy(self)
        (new.encoder_, new.decoder_), new.finetune_loss_ = fine_tune(
            (self.encoder_, self.decoder_), (X, y), self.mean_rtf_, epochs, learning_rate, cfg)
        return new

    def save(self, path):
        check_is_fitted(self, "encoder_")
        return save_model(path, self.encoder_, self.decoder_, self.mean_rtf_,
                          self.get_params(), self.random_state)

    @classmethod
    def load(cls, path):
        enc, dec, mean, manifest = load_model(path)
        params = {k: v for k, v in manifest.get("hyperparameters", {}).items()
                  if k in cls._get_param_names() and k != "latent_dim"}
        if "hidden" in params:
            params["hidden"] = tuple(params["hidden"])
        return cls.from_parameters(enc, dec, mean, **params)
