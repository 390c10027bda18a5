"""Variance-preserving latent diffusion: schedule, training, sampling.

The forward process has closed-form marginals q(z_t | z_0) =
N(alpha_t z_0, sigma_t^2 I) with alpha_t^2 + sigma_t^2 = 1. The denoiser
predicts the injected noise; ancestral sampling inverts one step as

    z_{t-1} = (z_t - beta_t / sigma_t * eps_hat) / sqrt(1 - beta_t) + rho_t * eps

with rho_t = sqrt(sigma_{t-1} / sigma_t) * beta_t for t >= 2 and rho_1 = 0,
making the final step deterministic. All coordinate-block states live on
the zero-CoG subspace.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    AdamState,
    NonFiniteError,
    Tape,
    Tensor,
    adam_step,
    backward,
    mul,
    square,
    sub,
    tsum,
)
from .autoencoder import (
    LatentPoint,
    PreparedBatch,
    _batch_encode,
    batch_latent_noise,
    params_hash,
    prepare_batch,
    segment_project_cog,
)
from .egnn import (
    EgnnParams,
    PointCloudState,
    egnn_forward,
    init_egnn,
    named_parameters,
    set_requires_grad,
)

SCHEDULE_KINDS = ("polynomial", "linear")


@dataclass
class NoiseSchedule:
    """Arrays indexed 0..T; beta[0] and rho[0] are unused placeholders."""

    T: int
    kind: str
    beta: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    rho: np.ndarray
    w: np.ndarray


def build_schedule(T, kind="polynomial"):
    """Construct the full schedule; T must be at least 2.

    The polynomial form decays alpha_t like (1 - (t/T)^2)^2, with the
    squared stepwise ratio floored at 1e-4 so beta_t stays inside (0, 1)
    at t = T. The linear form uses DDPM-style betas rescaled by 1000/T.
    """
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind '{kind}'")
    t = np.arange(T + 1, dtype=np.float64)
    if kind == "polynomial":
        raw = (1.0 - (t / T) ** 2) ** 2
        ratio2 = np.clip((raw[1:] / raw[:-1]) ** 2, 1e-4, 1.0)
        beta = np.concatenate([[0.0], 1.0 - ratio2])
        alpha = np.concatenate([[1.0], np.cumprod(np.sqrt(ratio2))])
    else:
        scale = 1000.0 / T
        betas = np.clip(np.linspace(1e-4, 0.02, T) * scale, 0.0, 0.999)
        beta = np.concatenate([[0.0], betas])
        alpha = np.concatenate([[1.0], np.cumprod(np.sqrt(1.0 - betas))])
    sigma = np.sqrt(1.0 - alpha**2)
    if alpha[T] >= 1e-2:
        raise ValueError(f"schedule does not mix: alpha_T = {alpha[T]:.4g}")

    rho = np.zeros(T + 1)
    rho[2:] = np.sqrt(sigma[1:T] / sigma[2:]) * beta[2:]
    # Final reverse step is deterministic (sigma_0 = 0 degenerates the formula).
    rho[1] = 0.0

    w = np.zeros(T + 1)
    w[0] = -1.0
    # The t = 1 term of the bound is an unweighted noise-matching error.
    w[1] = 1.0
    w[2:] = beta[2:] ** 2 / (2.0 * rho[2:] ** 2 * (1.0 - beta[2:]) * (1.0 - alpha[2:] ** 2))
    return NoiseSchedule(T=T, kind=kind, beta=beta, alpha=alpha, sigma=sigma, rho=rho, w=w)


def vlb_weight(schedule, t):
    """Variational-bound weight w(t); valid for 0 <= t <= T."""
    if not 0 <= t <= schedule.T:
        raise ValueError(f"t = {t} outside [0, {schedule.T}]")
    return float(schedule.w[t])


def _cog(values):
    return np.abs(np.asarray(values).sum(axis=0)).max()


def diffuse(z0, t, eps_x, eps_h, schedule):
    """Closed-form forward jump z_t = alpha_t z_0 + sigma_t eps."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t = {t} outside [1, {schedule.T}]")
    if _cog(eps_x if not isinstance(eps_x, Tensor) else eps_x.values) > 1e-9:
        raise ValueError("diffuse: coordinate noise is not CoG-projected")
    a, s = schedule.alpha[t], schedule.sigma[t]
    zx = z0.zx * a + (eps_x if isinstance(eps_x, Tensor) else Tensor(eps_x)) * s
    zh = z0.zh * a + (eps_h if isinstance(eps_h, Tensor) else Tensor(eps_h)) * s
    return LatentPoint(zx, zh)


@dataclass
class DenoiserParams:
    """Time-conditional equivariant network predicting the injected noise."""

    egnn: EgnnParams
    k: int
    conditional: bool = False


def init_denoiser(rng, config):
    cond = 1 if config.conditional else 0
    # Node input: k invariant latents, the normalized time step, condition.
    egnn = init_egnn(rng, config.k + 1 + cond, config.hidden_width, config.k,
                     n_layers=config.denoiser_layers)
    return DenoiserParams(egnn=egnn, k=config.k, conditional=config.conditional)


def denoiser_predict(z_t, t, params, schedule, s=None, edges=None, seg=None,
                     counts=None, time_column=None):
    """Noise prediction (eps_x_hat, eps_h_hat); eps_x_hat is CoG-projected.

    The time step enters as the node scalar t/T; a condition value is
    appended the same way. For batched graphs, ``time_column`` supplies a
    per-node time feature and ``seg``/``counts`` drive the projection.
    """
    n = z_t.n_nodes
    if time_column is None:
        time_column = np.full((n, 1), t / schedule.T)
    extra = Tensor(time_column)
    if params.conditional:
        if s is None:
            raise ValueError("conditional denoiser requires a condition value")
        s_col = s if isinstance(s, np.ndarray) else np.full((n, 1), float(s))
        extra = Tensor(np.concatenate([time_column, s_col], axis=1))
    elif s is not None:
        raise ValueError("condition given but the denoiser is unconditional")
    out = egnn_forward(PointCloudState(z_t.zx, z_t.zh), params.egnn,
                       extra_node_scalars=extra, edges=edges)
    raw = sub(out.x, z_t.zx)
    if seg is None:
        from .autoencoder import project_cog

        eps_x = project_cog(raw)
    else:
        eps_x = segment_project_cog(raw, seg, counts)
    return eps_x, out.h


def ldm_loss(z0, params, schedule, rng, s=None):
    """Noise-matching objective at a uniformly drawn step t in {1..T}.

    Returns (loss, t, (eps_x, eps_h)); the loss averages the squared error
    over all N * (3 + k) entries.
    """
    t = int(rng.integers(1, schedule.T + 1))
    n, k = z0.n_nodes, z0.k
    eps_x = rng.normal(size=(n, 3))
    eps_x = eps_x - eps_x.mean(axis=0)
    eps_h = rng.normal(size=(n, k))
    z_t = diffuse(z0, t, eps_x, eps_h, schedule)
    ex_hat, eh_hat = denoiser_predict(z_t, t, params, schedule, s=s)
    n_entries = n * (3 + k)
    loss = (tsum(square(sub(ex_hat, Tensor(eps_x))))
            + tsum(square(sub(eh_hat, Tensor(eps_h))))) * (1.0 / n_entries)
    return loss, t, (eps_x, eps_h)


def denoise_step(z_t, t, eps_hat_x, eps_hat_h, eps_x, eps_h, schedule):
    """One ancestral step from t to t-1 (all zero-CoG linear algebra).

    The exact result of the update already lies on the zero-CoG subspace;
    re-projecting only scrubs the floating-point residue the 1/sqrt(1-beta)
    amplification would otherwise accumulate over a long chain.
    """
    beta, sigma, rho = schedule.beta[t], schedule.sigma[t], schedule.rho[t]
    scale = 1.0 / np.sqrt(1.0 - beta)
    coef = beta / sigma
    zx = (z_t.zx.values - coef * np.asarray(eps_hat_x)) * scale + rho * eps_x
    zh = (z_t.zh.values - coef * np.asarray(eps_hat_h)) * scale + rho * eps_h
    zx = zx - zx.mean(axis=0)
    return LatentPoint(zx, zh)


def draw_trajectory_noise(rng, n, k, T):
    """All randomness one sample consumes: initial latent plus per-step noise.

    The step list is indexed t = T..1; the t = 1 entry is zero so the last
    step is deterministic.
    """
    zx0 = rng.normal(size=(n, 3))
    zx0 = zx0 - zx0.mean(axis=0)
    zh0 = rng.normal(size=(n, k))
    steps = []
    for t in range(T, 0, -1):
        if t == 1:
            steps.append((np.zeros((n, 3)), np.zeros((n, k))))
        else:
            ex = rng.normal(size=(n, 3))
            ex = ex - ex.mean(axis=0)
            steps.append((ex, rng.normal(size=(n, k))))
    return (zx0, zh0), steps


def run_reverse_trajectory(noise_bundle, params, schedule, s=None):
    """Deterministic reverse chain given explicit noise; returns z_0."""
    (zx0, zh0), steps = noise_bundle
    z = LatentPoint(zx0, zh0)
    for i, t in enumerate(range(schedule.T, 0, -1)):
        ex_hat, eh_hat = denoiser_predict(z, t, params, schedule, s=s)
        if not (np.isfinite(ex_hat.values).all() and np.isfinite(eh_hat.values).all()):
            raise NonFiniteError(f"sampling diverged at step t = {t}")
        eps_x, eps_h = steps[i]
        z = denoise_step(z, t, ex_hat.values, eh_hat.values, eps_x, eps_h, schedule)
    return z


def sample(n_atoms, denoiser, schedule, ae_params, rng, s=None):
    """Generate one molecule: noise -> reverse chain -> decode.

    Returns (coords, element_symbols, charges). Discrete features come from
    the decoder's argmax type logits and rounded charge head.
    """
    from .autoencoder import decode

    if n_atoms < 1:
        raise ValueError("n_atoms must be >= 1")
    bundle = draw_trajectory_noise(rng, n_atoms, denoiser.k, schedule.T)
    z0 = run_reverse_trajectory(bundle, denoiser, schedule, s=s)
    decoded = decode(z0, ae_params, s=s)
    types = decoded.predicted_types
    elements = tuple(ae_params.vocabulary[i] for i in types)
    return decoded.x.values.copy(), elements, decoded.predicted_charges


# --- second-stage training ----------------------------------------------------


def batch_ldm_loss(batch, z0x, z0h, params, schedule, t_per_mol, eps_x, eps_h, k):
    """Batched noise-matching loss; each molecule owns its time step."""
    a = schedule.alpha[t_per_mol][batch.seg][:, None]
    sg = schedule.sigma[t_per_mol][batch.seg][:, None]
    ztx = Tensor(z0x * a + sg * eps_x)
    zth = Tensor(z0h * a + sg * eps_h)
    time_column = (t_per_mol / schedule.T)[batch.seg][:, None]
    s_col = batch.conditions if params.conditional else None
    ex_hat, eh_hat = denoiser_predict(
        LatentPoint(ztx, zth), None, params, schedule,
        s=s_col, edges=(batch.rows, batch.cols), seg=batch.seg,
        counts=batch.counts, time_column=time_column)
    n_mols = len(batch.counts)
    wts = Tensor((1.0 / (n_mols * batch.counts * (3 + k)))[batch.seg][:, None])
    loss = (tsum(mul(square(sub(ex_hat, Tensor(eps_x))), wts))
            + tsum(mul(square(sub(eh_hat, Tensor(eps_h))), wts)))
    return loss


def train_ldm(dataset, ae_params, schedule, config):
    """Train the denoiser on latents from the frozen first-stage encoder."""
    if not dataset:
        raise ValueError("dataset must be nonempty")
    from .rng import derive_rng

    init_rng = derive_rng(config.seed, "ldm-init")
    batch_rng = derive_rng(config.seed, "ldm-batch")
    noise_rng = derive_rng(config.seed, "ldm-noise")

    set_requires_grad(ae_params.encoder, False)
    encoder_hash = params_hash(ae_params.encoder)
    params = init_denoiser(init_rng, config)
    named = named_parameters(params.egnn, "denoiser")
    set_requires_grad(params.egnn, True)

    state = AdamState()
    log = []
    last_good = {name: t.values.copy() for name, t in named.items()}
    for it in range(config.iterations):
        idx = batch_rng.integers(0, len(dataset), size=config.batch_size)
        batch = prepare_batch([dataset[i] for i in idx], ae_params.vocabulary,
                              conditional=ae_params.conditional)
        # Latents from the frozen encoder need no gradient bookkeeping.
        mu_x, mu_h = _batch_encode(batch, ae_params)
        ex0, eh0 = batch_latent_noise(noise_rng, batch, ae_params.k)
        z0x = mu_x.values + ae_params.sigma0 * ex0
        z0h = mu_h.values + ae_params.sigma0 * eh0

        t_per_mol = noise_rng.integers(1, schedule.T + 1, size=len(batch.counts))
        eps_x, eps_h = batch_latent_noise(noise_rng, batch, ae_params.k)
        with Tape() as tape:
            loss = batch_ldm_loss(batch, z0x, z0h, params, schedule,
                                  t_per_mol, eps_x, eps_h, ae_params.k)
        if not np.isfinite(float(loss.values)):
            for name, t in named.items():
                t.values = last_good[name].copy()
            log.append({"iteration": it, "aborted": True})
            break
        last_good = {name: t.values.copy() for name, t in named.items()}
        for t in named.values():
            t.zero_grad()
        backward(tape, loss)
        grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.values))
                 for name, t in named.items()}
        try:
            adam_step(named, grads, state, lr=config.lr)
        except NonFiniteError:
            for name, t in named.items():
                t.values = last_good[name].copy()
            log.append({"iteration": it, "aborted": True})
            break
        log.append({
            "iteration": it,
            "loss": float(loss.values),
            "encoder_hash": encoder_hash,
        })
    assert params_hash(ae_params.encoder) == encoder_hash
    return params, log
