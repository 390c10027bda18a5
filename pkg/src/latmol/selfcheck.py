"""Invariant battery behind the ``check`` command.

Each check returns (name, max_deviation, tolerance); the battery passes
when every deviation is under its tolerance. Checks cover equivariance of
all three networks, zero-CoG bookkeeping, gradient correctness, schedule
identities, loss invariance under rigid motions, and paired-trajectory
sampling equivariance.
"""

from __future__ import annotations

import numpy as np

from . import autoencoder as ae
from .autodiff import Tensor, finite_difference_check, square, sub, tsum
from .config import RunConfig
from .data import Molecule
from .diffusion import (
    build_schedule,
    denoiser_predict,
    draw_trajectory_noise,
    init_denoiser,
    run_reverse_trajectory,
)
from .egnn import (
    PointCloudState,
    audit_map,
    egcl_forward,
    egnn_forward,
    init_egcl,
    init_egnn,
    named_parameters,
    random_rotation,
)
from .rng import derive_rng

_TINY = RunConfig(k=2, hidden_width=12, decoder_layers=2, denoiser_layers=2)


def _random_molecule(rng, n=5):
    vocab = _TINY.vocabulary
    elements = [vocab[i] for i in rng.integers(0, len(vocab), size=n)]
    return Molecule(elements, rng.normal(size=(n, 3)), np.zeros(n, dtype=np.int64))


def check_encoder_equivariance(seed=0, trials=20):
    rng = derive_rng(seed, "check-enc")
    params = ae.init_autoencoder(rng, _TINY)

    def fn(x, h):
        mu_x, mu_h = ae.encode((x, h), params)
        return mu_x.values, mu_h.values

    # The encoder projects out translations, so compare against the
    # projected reference instead of R x + t.
    worst = 0.0
    for _ in range(trials):
        x = rng.normal(size=(6, 3))
        h = rng.normal(size=(6, len(_TINY.vocabulary) + 1))
        rot = random_rotation(rng)
        t = rng.normal(size=3)
        mx, mh = fn(x, h)
        gx, gh = fn(x @ rot.T + t, h)
        worst = max(worst, np.abs(gx - mx @ rot.T).max(), np.abs(gh - mh).max())
    return "encoder-equivariance", worst, 1e-6


def check_decoder_equivariance(seed=0, trials=20):
    rng = derive_rng(seed, "check-dec")
    params = ae.init_autoencoder(rng, _TINY)

    def fn(x, h):
        z = ae.LatentPoint(x - x.mean(axis=0), h)
        out = ae.decode(z, params)
        return out.x.values, np.concatenate(
            [out.type_logits.values, out.charge.values], axis=1)

    worst = 0.0
    for _ in range(trials):
        x = rng.normal(size=(6, 3))
        h = rng.normal(size=(6, _TINY.k))
        rot = random_rotation(rng)
        ox, oh = fn(x, h)
        gx, gh = fn(x @ rot.T, h)
        worst = max(worst, np.abs(gx - ox @ rot.T).max(), np.abs(gh - oh).max())
    return "decoder-equivariance", worst, 1e-6


def check_denoiser_equivariance(seed=0, trials=20):
    rng = derive_rng(seed, "check-den")
    schedule = build_schedule(10)
    params = init_denoiser(rng, _TINY)
    worst = 0.0
    for _ in range(trials):
        zx = rng.normal(size=(6, 3))
        zx -= zx.mean(axis=0)
        zh = rng.normal(size=(6, _TINY.k))
        rot = random_rotation(rng)
        ex, eh = denoiser_predict(ae.LatentPoint(zx, zh), 3, params, schedule)
        gx, gh = denoiser_predict(ae.LatentPoint(zx @ rot.T, zh), 3, params, schedule)
        worst = max(worst, np.abs(gx.values - ex.values @ rot.T).max(),
                    np.abs(gh.values - eh.values).max())
    return "denoiser-equivariance", worst, 1e-6


def check_zero_cog(seed=0, trials=50):
    rng = derive_rng(seed, "check-cog")
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 9))
        pts = ae.project_cog(rng.normal(size=(n, 3)) * 10.0)
        worst = max(worst, np.abs(pts.values.sum(axis=0)).max())
    return "zero-cog-projection", worst, 1e-9


def check_gradients(seed=0):
    rng = derive_rng(seed, "check-grad")
    layer = init_egcl(rng, 6)
    x = rng.normal(size=(4, 3))
    h = rng.normal(size=(4, 6))
    named = named_parameters(layer)
    tensors = list(named.values())
    for t in tensors:
        t.requires_grad = True

    def f(_):
        out = egcl_forward(PointCloudState(Tensor(x), Tensor(h)), layer)
        return tsum(square(out.x)) + tsum(square(out.h))

    err = finite_difference_check(f, tensors)
    return "egcl-gradcheck", err, 1e-4


def check_schedule_identities():
    worst = 0.0
    for kind in ("polynomial", "linear"):
        sch = build_schedule(500, kind)
        worst = max(worst, np.abs(sch.alpha**2 + sch.sigma**2 - 1.0).max())
        worst = max(worst, abs(sch.w[0] + 1.0))
        alt = sch.sigma[2:] / (2.0 * sch.sigma[1:-1] * (1.0 - sch.beta[2:])
                               * (1.0 - sch.alpha[2:] ** 2))
        worst = max(worst, np.abs((sch.w[2:] - alt) / alt).max())
    return "schedule-identities", worst, 1e-12


def check_loss_invariance(seed=0, trials=10):
    rng = derive_rng(seed, "check-loss-inv")
    params = ae.init_autoencoder(rng, _TINY)
    mol = _random_molecule(rng)
    eps_x, eps_h = ae.sample_latent_noise(rng, mol.n_atoms, _TINY.k)
    base, _ = ae.autoencoder_loss(mol, params, eps_x, eps_h)
    worst = 0.0
    for _ in range(trials):
        rot = random_rotation(rng)
        t = rng.normal(size=3)
        moved = Molecule(mol.elements, mol.coords @ rot.T + t, mol.charges)
        paired, _ = ae.autoencoder_loss(moved, params, eps_x @ rot.T, eps_h)
        worst = max(worst, abs(float(base.values) - float(paired.values)))
    return "reconstruction-loss-invariance", worst, 1e-6


def check_ldm_loss_invariance(seed=0, trials=10):
    rng = derive_rng(seed, "check-ldm-inv")
    ae_params = ae.init_autoencoder(rng, _TINY)
    den = init_denoiser(rng, _TINY)
    schedule = build_schedule(20)
    mol = _random_molecule(rng)
    n, k = mol.n_atoms, _TINY.k
    enc_x, enc_h = ae.sample_latent_noise(rng, n, k)
    dif_x, dif_h = ae.sample_latent_noise(rng, n, k)
    t = int(rng.integers(1, schedule.T + 1))

    def loss(coords, ex_e, ex_d):
        x_c = ae.project_cog(coords)
        mu_x, mu_h = ae.encode((x_c.values, ae.featurize(mol, _TINY.vocabulary)), ae_params)
        z0 = ae.reparameterize(mu_x, mu_h, ae_params.sigma0, ex_e, enc_h)
        from .diffusion import diffuse

        z_t = diffuse(z0, t, ex_d, dif_h, schedule)
        px, ph = denoiser_predict(z_t, t, den, schedule)
        total = tsum(square(sub(px, Tensor(ex_d)))) + tsum(square(sub(ph, Tensor(dif_h))))
        return float(total.values) / (n * (3 + k))

    base = loss(mol.coords, enc_x, dif_x)
    worst = 0.0
    for _ in range(trials):
        rot = random_rotation(rng)
        tr = rng.normal(size=3)
        worst = max(worst, abs(base - loss(mol.coords @ rot.T + tr,
                                           enc_x @ rot.T, dif_x @ rot.T)))
    return "ldm-loss-invariance", worst, 1e-6


def check_sampling_equivariance(seed=0):
    rng = derive_rng(seed, "check-samp")
    schedule = build_schedule(10)
    params = init_denoiser(rng, _TINY)
    bundle = draw_trajectory_noise(rng, 5, _TINY.k, schedule.T)
    rot = random_rotation(rng)
    (zx0, zh0), steps = bundle
    rotated = ((zx0 @ rot.T, zh0), [(ex @ rot.T, eh) for ex, eh in steps])
    z_a = run_reverse_trajectory(bundle, params, schedule)
    z_b = run_reverse_trajectory(rotated, params, schedule)
    dev = max(
        np.abs(z_b.zx.values - z_a.zx.values @ rot.T).max(),
        np.abs(z_b.zh.values - z_a.zh.values).max(),
    )
    return "sampling-equivariance", dev, 1e-6


ALL_CHECKS = (
    check_encoder_equivariance,
    check_decoder_equivariance,
    check_denoiser_equivariance,
    check_zero_cog,
    check_gradients,
    check_schedule_identities,
    check_loss_invariance,
    check_ldm_loss_invariance,
    check_sampling_equivariance,
)


def run_all(out=print):
    """Run the battery; returns True iff every check passes."""
    failures = 0
    for check in ALL_CHECKS:
        name, dev, tol = check()
        status = "PASS" if dev < tol else "FAIL"
        failures += status == "FAIL"
        out(f"CHECK {name} max_dev={dev:.3e} tol={tol:.0e} status={status}")
    out(f"CHECK-SUMMARY total={len(ALL_CHECKS)} failed={failures} "
        f"status={'OK' if failures == 0 else 'FAIL'}")
    return failures == 0
