"""First-stage geometric autoencoder over point clouds.

The encoder maps a molecule to per-node latents: an equivariant 3-vector
on the zero-center-of-gravity subspace plus k invariant scalars. The
decoder maps latents back to coordinates, atom-type logits, and a real
charge head. Training supports a small KL penalty toward the standard
normal or an early-stop scheme that freezes the encoder after a warm-up
budget.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    AdamState,
    NonFiniteError,
    Tape,
    Tensor,
    adam_step,
    backward,
    concat,
    exp,
    gather_rows,
    log,
    mul,
    scatter_add,
    slice_cols,
    square,
    sub,
    tmean,
    tsum,
)
from .data import DEFAULT_VOCABULARY, featurize, type_indices
from .egnn import (
    EgnnParams,
    PointCloudState,
    batch_edges,
    egnn_forward,
    init_egnn,
    named_parameters,
    set_requires_grad,
)

# Test hook for the self-check battery: when set, the projection is broken
# on purpose so downstream zero-CoG checks must fail.
_COG_FAULT = False


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def project_cog(points):
    """Subtract the row mean so the center of gravity sits at the origin."""
    points = _lift(points)
    out = sub(points, tmean(points, axis=0, keepdims=True))
    if _COG_FAULT:
        out = out + 0.1
    return out


def segment_project_cog(points, seg, counts):
    """Per-graph CoG projection for block-diagonal batches."""
    points = _lift(points)
    total = scatter_add(points, seg, len(counts))
    means = mul(total, Tensor(1.0 / np.asarray(counts, dtype=np.float64)[:, None]))
    out = sub(points, gather_rows(means, seg))
    if _COG_FAULT:
        out = out + 0.1
    return out


@dataclass
class LatentPoint:
    """Per-node latents: zero-CoG equivariant zx (N x 3), invariant zh (N x k)."""

    zx: Tensor
    zh: Tensor

    def __post_init__(self):
        self.zx = _lift(self.zx)
        self.zh = _lift(self.zh)
        if self.k < 1:
            raise ValueError("latent feature width k must be >= 1")
        cog = np.abs(self.zx.values.sum(axis=0))
        # Absolute 1e-9 at data scale; relative slack for huge intermediates.
        mag = np.abs(self.zx.values).max() if self.zx.values.size else 0.0
        tol = max(1e-9, self.n_nodes * mag * 1e-13)
        if cog.max() > tol:
            raise ValueError(f"latent coordinates are off the zero-CoG subspace: {cog}")

    @property
    def k(self):
        return self.zh.values.shape[1]

    @property
    def n_nodes(self):
        return self.zx.values.shape[0]


@dataclass
class AutoencoderParams:
    encoder: EgnnParams
    decoder: EgnnParams
    sigma0: float
    k: int
    vocabulary: tuple
    conditional: bool = False
    regularizer: str = "es"  # "kl" | "es"
    kl_weight: float = 0.01
    es_warmup: int = 1000

    def __post_init__(self):
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")
        if self.regularizer not in ("kl", "es"):
            raise ValueError(f"unknown regularizer '{self.regularizer}'")


@dataclass
class ReconstructionReport:
    coord_loss: float
    type_ce: float
    charge_loss: float
    type_accuracy: float
    total: float


@dataclass
class DecodedGeometry:
    x: Tensor
    type_logits: Tensor
    charge: Tensor

    @property
    def predicted_types(self):
        return np.argmax(self.type_logits.values, axis=1)

    @property
    def predicted_charges(self):
        return np.rint(self.charge.values[:, 0]).astype(np.int64)


def init_autoencoder(rng, config):
    """Fresh parameters per the run configuration (encoder is 1 layer)."""
    d = len(config.vocabulary) + 1
    cond = 1 if config.conditional else 0
    encoder = init_egnn(rng, d + cond, config.hidden_width, config.k,
                        n_layers=config.encoder_layers)
    decoder = init_egnn(rng, config.k + cond, config.hidden_width,
                        len(config.vocabulary) + 1, n_layers=config.decoder_layers)
    return AutoencoderParams(
        encoder=encoder,
        decoder=decoder,
        sigma0=config.sigma0,
        k=config.k,
        vocabulary=tuple(config.vocabulary),
        conditional=config.conditional,
        regularizer=config.regularizer,
        kl_weight=config.kl_weight,
        es_warmup=config.es_warmup,
    )


def _condition_column(params, n, s):
    if not params.conditional:
        if s is not None:
            raise ValueError("condition given but the model is unconditional")
        return None
    if s is None:
        raise ValueError("conditional model requires a condition value")
    return Tensor(np.full((n, 1), float(s)))


def encode(geometry, params, s=None, edges=None, seg=None, counts=None):
    """Equivariant means (mu_x zero-CoG, mu_h invariant) for the latent posterior."""
    x, h = _geometry_state(geometry, params.vocabulary)
    extra = _condition_column(params, x.values.shape[0], s)
    out = egnn_forward(PointCloudState(x, h), params.encoder,
                       extra_node_scalars=extra, edges=edges)
    if seg is None:
        mu_x = project_cog(out.x)
    else:
        mu_x = segment_project_cog(out.x, seg, counts)
    return mu_x, out.h


def _geometry_state(geometry, vocabulary):
    if isinstance(geometry, tuple):
        x, h = geometry
        return _lift(x), _lift(h)
    return _lift(geometry.coords), _lift(featurize(geometry, vocabulary))


def reparameterize(mu_x, mu_h, sigma0, eps_x, eps_h):
    """z = mu + sigma0 * eps; eps_x must already be CoG-projected."""
    zx = _lift(mu_x) + _lift(eps_x) * sigma0
    zh = _lift(mu_h) + _lift(eps_h) * sigma0
    return LatentPoint(zx, zh)


def sample_latent_noise(rng, n, k):
    """Standard normal noise with the coordinate block CoG-projected."""
    eps_x = rng.normal(size=(n, 3))
    eps_x = eps_x - eps_x.mean(axis=0)
    eps_h = rng.normal(size=(n, k))
    return eps_x, eps_h


def decode(z, params, s=None, edges=None):
    """Map latents to coordinates, atom-type logits, and a charge head."""
    if z.k != params.k:
        raise ValueError(f"latent width {z.k} != decoder width {params.k}")
    extra = _condition_column(params, z.n_nodes, s)
    out = egnn_forward(PointCloudState(z.zx, z.zh), params.decoder,
                       extra_node_scalars=extra, edges=edges)
    n_types = len(params.vocabulary)
    return DecodedGeometry(
        x=out.x,
        type_logits=slice_cols(out.h, 0, n_types),
        charge=slice_cols(out.h, n_types, n_types + 1),
    )


def cross_entropy_rows(logits, onehot):
    """Per-row categorical cross-entropy (natural log), numerically stable."""
    shift = Tensor(logits.values.max(axis=1, keepdims=True))
    z = sub(logits, shift)
    lse = log(tsum(exp(z), axis=1, keepdims=True))
    picked = tsum(mul(z, Tensor(onehot)), axis=1, keepdims=True)
    return sub(lse, picked)


def reconstruction_loss(decoded, target, vocabulary=None, weights=None):
    """Coordinate, type, and charge reconstruction terms.

    The coordinate term is the mean over atoms of the squared Euclidean
    distance; types use cross-entropy against the one-hot target; charges
    use squared error. ``weights`` (per-atom) replaces the uniform 1/N
    mean for batched graphs.
    """
    if isinstance(target, tuple):
        x_t, types_t, charges_t = target
    else:
        vocabulary = vocabulary or DEFAULT_VOCABULARY
        x_t = target.coords
        types_t = type_indices(target, vocabulary)
        charges_t = target.charges
    n_types = decoded.type_logits.values.shape[1]
    n = decoded.x.values.shape[0]
    onehot = np.zeros((n, n_types))
    onehot[np.arange(n), types_t] = 1.0

    w = Tensor((np.full(n, 1.0 / n) if weights is None else np.asarray(weights))[:, None])
    coord_per_atom = tsum(square(sub(decoded.x, Tensor(x_t))), axis=1, keepdims=True)
    coord = tsum(mul(coord_per_atom, w))
    ce = tsum(mul(cross_entropy_rows(decoded.type_logits, onehot), w))
    charge = tsum(mul(square(sub(decoded.charge, Tensor(np.asarray(charges_t, dtype=np.float64)[:, None]))), w))
    total = coord + ce + charge

    accuracy = float(np.mean(decoded.predicted_types == np.asarray(types_t)))
    report = ReconstructionReport(
        coord_loss=float(coord.values),
        type_ce=float(ce.values),
        charge_loss=float(charge.values),
        type_accuracy=accuracy,
        total=float(total.values),
    )
    return total, report


def kl_regularizer(mu_x, mu_h, sigma0):
    """KL of N(mu, sigma0^2 I) against N(0, I) on the latent support.

    The coordinate block contributes 3(N-1) effective dimensions (one CoG
    mode is projected out); the feature block contributes k*N.
    """
    if sigma0 <= 0:
        raise ValueError("sigma0 must be positive")
    mu_x, mu_h = _lift(mu_x), _lift(mu_h)
    n = mu_x.values.shape[0]
    k = mu_h.values.shape[1]
    dims = 3 * (n - 1) + k * n
    per_dim = 0.5 * (sigma0**2 - 1.0 - 2.0 * np.log(sigma0))
    quad = tsum(square(mu_x)) * 0.5 + tsum(square(mu_h)) * 0.5
    return quad + dims * per_dim


def autoencoder_loss(geometry, params, eps_x, eps_h, s=None):
    """Full first-stage loss for one molecule with explicit noise.

    Input coordinates are centered before encoding and before the
    coordinate comparison, so the loss is translation-invariant; with
    rotation-paired noise it is also rotation-invariant.
    """
    x, h = _geometry_state(geometry, params.vocabulary)
    x_c = project_cog(x)
    mu_x, mu_h = encode((x_c, h), params, s=s)
    z = reparameterize(mu_x, mu_h, params.sigma0, eps_x, eps_h)
    decoded = decode(z, params, s=s)
    types_t = type_indices(geometry, params.vocabulary)
    total, report = reconstruction_loss(
        decoded, (x_c.values, types_t, geometry.charges))
    if params.regularizer == "kl":
        total = total + kl_regularizer(mu_x, mu_h, params.sigma0) * params.kl_weight
    return total, report


# --- training ----------------------------------------------------------------


@dataclass
class PreparedBatch:
    """Block-diagonal graph over a list of molecules, coordinates centered."""

    x: np.ndarray
    h: np.ndarray
    sizes: list
    rows: np.ndarray
    cols: np.ndarray
    seg: np.ndarray
    counts: np.ndarray
    types: np.ndarray
    charges: np.ndarray
    weights: np.ndarray
    conditions: np.ndarray | None


def prepare_batch(molecules, vocabulary, conditional=False):
    feats, coords, types, charges, cond = [], [], [], [], []
    sizes = [m.n_atoms for m in molecules]
    for m in molecules:
        feats.append(featurize(m, vocabulary))
        coords.append(m.coords - m.coords.mean(axis=0))
        types.append(type_indices(m, vocabulary))
        charges.append(m.charges)
        if conditional:
            if m.s is None:
                raise ValueError("conditional training requires condition values")
            cond.append(np.full((m.n_atoms, 1), m.s))
    rows, cols, seg = batch_edges(sizes)
    counts = np.array(sizes, dtype=np.float64)
    weights = 1.0 / (len(molecules) * counts[seg])
    return PreparedBatch(
        x=np.concatenate(coords),
        h=np.concatenate(feats),
        sizes=sizes,
        rows=rows,
        cols=cols,
        seg=seg,
        counts=counts,
        types=np.concatenate(types),
        charges=np.concatenate(charges),
        weights=weights,
        conditions=np.concatenate(cond) if cond else None,
    )


def _batch_encode(batch, params):
    extra = Tensor(batch.conditions) if batch.conditions is not None else None
    out = egnn_forward(
        PointCloudState(Tensor(batch.x), Tensor(batch.h)), params.encoder,
        extra_node_scalars=extra, edges=(batch.rows, batch.cols))
    return segment_project_cog(out.x, batch.seg, batch.counts), out.h


def _batch_decode(zx, zh, batch, params):
    extra = Tensor(batch.conditions) if batch.conditions is not None else None
    out = egnn_forward(
        PointCloudState(zx, zh), params.decoder,
        extra_node_scalars=extra, edges=(batch.rows, batch.cols))
    n_types = len(params.vocabulary)
    return DecodedGeometry(
        x=out.x,
        type_logits=slice_cols(out.h, 0, n_types),
        charge=slice_cols(out.h, n_types, n_types + 1),
    )


def batch_latent_noise(rng, batch, k):
    eps = rng.normal(size=(batch.x.shape[0], 3 + k))
    eps_x, eps_h = eps[:, :3], eps[:, 3:]
    means = np.zeros((len(batch.counts), 3))
    np.add.at(means, batch.seg, eps_x)
    eps_x = eps_x - (means / batch.counts[:, None])[batch.seg]
    return eps_x, eps_h


def batch_autoencoder_loss(batch, params, eps_x, eps_h):
    mu_x, mu_h = _batch_encode(batch, params)
    zx = mu_x + Tensor(eps_x) * params.sigma0
    zh = mu_h + Tensor(eps_h) * params.sigma0
    decoded = _batch_decode(zx, zh, batch, params)
    total, report = reconstruction_loss(
        decoded, (batch.x, batch.types, batch.charges), weights=batch.weights)
    if params.regularizer == "kl":
        n_mols = len(batch.counts)
        dims = 3.0 * (batch.counts - 1.0) + params.k * batch.counts
        per_dim = 0.5 * (params.sigma0**2 - 1.0 - 2.0 * np.log(params.sigma0))
        quad = (tsum(square(mu_x)) + tsum(square(mu_h))) * (0.5 / n_mols)
        kl = quad + float(dims.sum()) * per_dim / n_mols
        total = total + kl * params.kl_weight
    return total, report


def params_hash(params):
    """Stable digest of every parameter tensor, for freeze checks."""
    digest = hashlib.sha256()
    for name, t in sorted(named_parameters(params).items()):
        digest.update(name.encode())
        digest.update(t.values.tobytes())
    return digest.hexdigest()


def _snapshot(named):
    return {name: t.values.copy() for name, t in named.items()}


def _restore(named, snapshot):
    for name, t in named.items():
        t.values = snapshot[name].copy()


def train_autoencoder(dataset, config, log_every=1):
    """Two-regularizer training loop (Adam, seeded, single-threaded).

    Returns (params, log). Each log record carries the iteration, the loss
    components, and a hash of the encoder parameters so freeze behaviour is
    auditable. A non-finite loss aborts and returns the last good state.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    from .rng import derive_rng

    init_rng = derive_rng(config.seed, "ae-init")
    batch_rng = derive_rng(config.seed, "ae-batch")
    noise_rng = derive_rng(config.seed, "ae-noise")

    params = init_autoencoder(init_rng, config)
    enc_named = named_parameters(params.encoder, "encoder")
    dec_named = named_parameters(params.decoder, "decoder")
    all_named = {**enc_named, **dec_named}
    set_requires_grad(params.encoder, True)
    set_requires_grad(params.decoder, True)

    state = AdamState()
    log = []
    last_good = _snapshot(all_named)
    frozen = False
    for it in range(config.iterations):
        if params.regularizer == "es" and not frozen and it >= params.es_warmup:
            set_requires_grad(params.encoder, False)
            frozen = True
        idx = batch_rng.integers(0, len(dataset), size=config.batch_size)
        batch = prepare_batch([dataset[i] for i in idx], params.vocabulary,
                              conditional=params.conditional)
        eps_x, eps_h = batch_latent_noise(noise_rng, batch, params.k)
        with Tape() as tape:
            loss, report = batch_autoencoder_loss(batch, params, eps_x, eps_h)
        if not np.isfinite(float(loss.values)):
            _restore(all_named, last_good)
            log.append({"iteration": it, "aborted": True})
            break
        last_good = _snapshot(all_named)
        for t in all_named.values():
            t.zero_grad()
        backward(tape, loss)
        group = dec_named if frozen else all_named
        grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.values))
                 for name, t in group.items()}
        try:
            adam_step(group, grads, state, lr=config.lr)
        except NonFiniteError:
            _restore(all_named, last_good)
            log.append({"iteration": it, "aborted": True})
            break
        if it % log_every == 0 or it == config.iterations - 1:
            log.append({
                "iteration": it,
                "loss": float(loss.values),
                "coord": report.coord_loss,
                "type_ce": report.type_ce,
                "charge": report.charge_loss,
                "accuracy": report.type_accuracy,
                "encoder_hash": params_hash(params.encoder),
            })
    return params, log
