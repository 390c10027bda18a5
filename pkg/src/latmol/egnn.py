"""Equivariant graph convolutional layers over fully connected point clouds.

Each layer passes messages built from invariant quantities (node features,
squared distances, edge scalars) and moves coordinates along gated relative
directions, so coordinates rotate/translate with the input while features
stay invariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    NonFiniteError,
    ShapeError,
    Tensor,
    clip,
    concat,
    div,
    gather_rows,
    matmul,
    mul,
    scatter_add,
    sigmoid,
    silu,
    sqrt,
    square,
    sub,
    tsum,
)

DEFAULT_COORD_CLAMP = 100.0


@dataclass
class Mlp:
    """Two-layer perceptron: linear, SiLU, linear (optional trailing SiLU)."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor | None
    out_silu: bool = False

    def __call__(self, x):
        h = silu(matmul(x, self.w1) + self.b1)
        out = matmul(h, self.w2)
        if self.b2 is not None:
            out = out + self.b2
        if self.out_silu:
            out = silu(out)
        return out


@dataclass
class Linear:
    w: Tensor
    b: Tensor

    def __call__(self, x):
        return matmul(x, self.w) + self.b


@dataclass
class EgclParams:
    """Parameters of one layer: edge map, node map, coordinate scalar, gate."""

    phi_e: Mlp
    phi_h: Mlp
    phi_x: Mlp
    phi_inf: Mlp
    nf: int


@dataclass
class EgnnParams:
    embed: Linear
    layers: list[EgclParams]
    project: Linear
    d_in: int
    d_out: int
    nf: int

    @property
    def n_layers(self):
        return len(self.layers)


@dataclass
class PointCloudState:
    """Coordinates (N x 3) and invariant node features (N x f)."""

    x: Tensor
    h: Tensor

    def __post_init__(self):
        if not isinstance(self.x, Tensor):
            self.x = Tensor(self.x)
        if not isinstance(self.h, Tensor):
            self.h = Tensor(self.h)

    @property
    def n_nodes(self):
        return self.x.values.shape[0]


def _param(rng, fan_in, fan_out, scale=1.0, requires_grad=True):
    bound = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad)


def _bias(fan_out, requires_grad=True):
    return Tensor(np.zeros(fan_out), requires_grad)


def init_mlp(rng, d_in, nf, d_out, out_silu=False, final_bias=True, final_scale=1.0):
    return Mlp(
        w1=_param(rng, d_in, nf),
        b1=_bias(nf),
        w2=_param(rng, nf, d_out, scale=final_scale),
        b2=_bias(d_out) if final_bias else None,
        out_silu=out_silu,
    )


def init_egcl(rng, nf):
    # Edge maps see (h_i, h_j, d^2, a); the coordinate head starts near zero
    # so freshly initialized stacks do not fling points around.
    edge_in = 2 * nf + 2
    return EgclParams(
        phi_e=init_mlp(rng, edge_in, nf, nf, out_silu=True),
        phi_h=init_mlp(rng, 2 * nf, nf, nf),
        phi_x=init_mlp(rng, edge_in, nf, 1, final_bias=False, final_scale=0.001),
        phi_inf=init_mlp(rng, nf, nf, 1),
        nf=nf,
    )


def init_egnn(rng, d_in, nf, d_out, n_layers):
    return EgnnParams(
        embed=Linear(_param(rng, d_in, nf), _bias(nf)),
        layers=[init_egcl(rng, nf) for _ in range(n_layers)],
        project=Linear(_param(rng, nf, d_out), _bias(d_out)),
        d_in=d_in,
        d_out=d_out,
        nf=nf,
    )


def identity_egnn(d):
    """Zero-layer network whose feature projections are exact identities."""
    eye = Tensor(np.eye(d))
    zero = Tensor(np.zeros(d))
    return EgnnParams(
        embed=Linear(eye, zero), layers=[], project=Linear(eye, zero),
        d_in=d, d_out=d, nf=d,
    )


def fully_connected_edges(n_nodes):
    """All ordered pairs (i, j), i != j, row-major in i."""
    idx = np.arange(n_nodes)
    rows = np.repeat(idx, n_nodes - 1)
    cols = np.concatenate([np.delete(idx, i) for i in idx]) if n_nodes > 1 else idx[:0]
    return rows, cols.astype(np.int64)


def batch_edges(sizes):
    """Block-diagonal fully connected edges plus node -> graph segment ids."""
    rows, cols, seg = [], [], []
    offset = 0
    for gi, n in enumerate(sizes):
        r, c = fully_connected_edges(n)
        rows.append(r + offset)
        cols.append(c + offset)
        seg.append(np.full(n, gi, dtype=np.int64))
        offset += n
    return (
        np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64),
        np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64),
        np.concatenate(seg) if seg else np.zeros(0, dtype=np.int64),
    )


def egcl_forward(state, params, edges=None, edge_attr=None, coord_clamp=DEFAULT_COORD_CLAMP):
    """One equivariant layer.

    With no explicit ``edges`` the graph is fully connected without
    self-edges. ``edge_attr`` defaults to the pairwise distance at layer
    input. ``coord_clamp`` bounds each per-edge coordinate contribution
    (None disables it).
    """
    x, h = state.x, state.h
    n = state.n_nodes
    rows, cols = edges if edges is not None else fully_connected_edges(n)
    if len(rows) == 0:
        zero_msg = Tensor(np.zeros((n, params.nf)))
        h_out = params.phi_h(concat([h, zero_msg], axis=1))
        return PointCloudState(x, h_out)

    diff = sub(gather_rows(x, rows), gather_rows(x, cols))
    d2 = tsum(square(diff), axis=1, keepdims=True)
    if not np.isfinite(d2.values).all():
        raise NonFiniteError("egcl_forward: non-finite pairwise distance")
    d = sqrt(d2)
    a = edge_attr if edge_attr is not None else d

    edge_in = concat([gather_rows(h, rows), gather_rows(h, cols), d2, a], axis=1)
    m = params.phi_e(edge_in)
    gate = sigmoid(params.phi_inf(m))
    agg = scatter_add(mul(m, gate), rows, n)
    h_out = params.phi_h(concat([h, agg], axis=1))

    w = params.phi_x(edge_in)
    contrib = mul(div(diff, d + 1.0), w)
    if coord_clamp is not None:
        # Rescale by Euclidean magnitude (rotation-equivariant, unlike a
        # per-component clip). Flooring the squared norm at clamp^2 keeps
        # sqrt away from zero and makes the in-range branch an exact no-op.
        norm2 = tsum(square(contrib), axis=1, keepdims=True)
        floored = clip(norm2, coord_clamp**2, np.inf)
        contrib = mul(contrib, div(Tensor(float(coord_clamp)), sqrt(floored)))
    x_out = state.x + scatter_add(contrib, rows, n)
    return PointCloudState(x_out, h_out)


def egnn_forward(state, params, extra_node_scalars=None, edges=None,
                 coord_clamp=DEFAULT_COORD_CLAMP):
    """Stacked layers with input/output feature projections.

    ``extra_node_scalars`` (N x s) are appended to the node features before
    the input projection; the combined width must equal the declared input
    width of the network.
    """
    h = state.h
    if extra_node_scalars is not None:
        h = concat([h, extra_node_scalars], axis=1)
    width = h.values.shape[1]
    if width != params.d_in:
        raise ShapeError(
            f"egnn_forward: input feature width {width} != declared {params.d_in}"
        )
    cur = PointCloudState(state.x, params.embed(h))
    for layer in params.layers:
        cur = egcl_forward(cur, layer, edges=edges, coord_clamp=coord_clamp)
    return PointCloudState(cur.x, params.project(cur.h))


# --- random rigid motions and the equivariance audit -------------------------


def random_rotation(rng, proper=True):
    """Uniform random orthogonal 3x3 matrix with det +1 (or -1)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if (np.linalg.det(q) > 0) != proper:
        q[:, 0] = -q[:, 0]
    return q


@dataclass
class AuditReport:
    max_coord_deviation: float
    max_feature_deviation: float
    trials: int
    tolerance: float

    @property
    def passed(self):
        return (
            self.max_coord_deviation < self.tolerance
            and self.max_feature_deviation < self.tolerance
        )


def audit_map(fn, rng, trials, tolerance, n_nodes, feat_width,
              translate=True, improper=False):
    """Compare fn(Rx + t, h) against (R fn(x,h).x + t, fn(x,h).h).

    ``fn`` takes (coords ndarray, feats ndarray) and returns the same pair.
    Reports the max infinity-norm deviation over trials for the coordinate
    (equivariant) and feature (invariant) outputs.
    """
    worst_x, worst_h = 0.0, 0.0
    for _ in range(trials):
        x = rng.normal(size=(n_nodes, 3))
        h = rng.normal(size=(n_nodes, feat_width))
        rot = random_rotation(rng, proper=not improper)
        t = rng.normal(size=3) if translate else np.zeros(3)
        x_out, h_out = fn(x, h)
        x_out_g, h_out_g = fn(x @ rot.T + t, h)
        worst_x = max(worst_x, np.abs(x_out_g - (x_out @ rot.T + t)).max())
        worst_h = max(worst_h, np.abs(h_out_g - h_out).max())
    return AuditReport(worst_x, worst_h, trials, tolerance)


def equivariance_audit(params, trials=100, tolerance=1e-6, rng=None,
                       n_nodes=8, improper=False, seed=0):
    """Audit a raw network's roto-translation behaviour on random inputs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if rng is None:
        rng = np.random.default_rng(seed)

    def fn(x, h):
        out = egnn_forward(PointCloudState(Tensor(x), Tensor(h)), params)
        return out.x.values, out.h.values

    return audit_map(fn, rng, trials, tolerance, n_nodes, params.d_in,
                     improper=improper)


def collect_params(obj, prefix=""):
    """Walk dataclasses/lists and yield (dotted_name, Tensor) leaves."""
    if isinstance(obj, Tensor):
        yield prefix, obj
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from collect_params(item, f"{prefix}.{i}" if prefix else str(i))
        return
    if hasattr(obj, "__dataclass_fields__"):
        for name in obj.__dataclass_fields__:
            value = getattr(obj, name)
            if isinstance(value, (Tensor, list, tuple)) or hasattr(
                value, "__dataclass_fields__"
            ):
                yield from collect_params(value, f"{prefix}.{name}" if prefix else name)


def named_parameters(params, prefix=""):
    """Ordered dict of every parameter tensor under ``params``."""
    return dict(collect_params(params, prefix))


def set_requires_grad(params, flag):
    for _, t in collect_params(params):
        t.requires_grad = flag
        if not flag:
            t.grad = None
