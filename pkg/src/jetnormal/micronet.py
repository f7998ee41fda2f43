"""A small numpy network that predicts per-point weights and offsets for the jet fit.

Architecture (all MLP layers are single dense layers with tanh)::

    local coords / radius  (s_0 points)
      -> encoder 3 -> 32 -> 64 per point
      -> scale aggregation layers s_0 -> s_1 -> ... -> s_K:
           pooled = max over the s_k features      -> psi (64 -> 64)
           f_i    = phi([psi(pooled), f_i])  for the s_{k+1} nearest points  (128 -> 64)
      -> weight head 64 -> 32 -> 1,  w = softplus + 1e-4
      -> offset head 64 -> 32 -> 3,  o = 0.5 * radius * tanh
      -> weighted jet fit on the offset points -> normal

Gradients are derived by hand, including the adjoint of the linear solve;
``docs/micronet_gradients.md`` walks through them.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .jet import (FitProblem, SingularFitError, WLSSystem, design_derivatives, fit_system,
                  normal_from_jet, normal_jacobian)

logger = logging.getLogger(__name__)

DEFAULT_SCALES = (64, 32, 16)
DEFAULT_LR = 5e-4
OFFSET_PENALTY = 0.01
WEIGHT_FLOOR = 1e-4
OFFSET_BOUND = 0.5  # in units of the fitting-patch radius
ENCODER_WIDTHS = (32, 64)
HEAD_WIDTH = 32

MAGIC = b"JETNORMAL-NET"
FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


# -- loss ---------------------------------------------------------------------


@dataclass(frozen=True)
class LossReport:
    sin_loss: float
    offset_penalty: float
    total: float


def _check_unit(v, name):
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise ValueError(f"{name} must be a unit vector")


def loss(pred_normal, gt_normal, offsets=None, radius: float = 1.0,
         penalty: float = OFFSET_PENALTY) -> LossReport:
    """``|gt x pred|`` plus ``penalty`` times the mean squared offset (in radius units)."""
    pred_normal = np.asarray(pred_normal, dtype=float)
    gt_normal = np.asarray(gt_normal, dtype=float)
    _check_unit(pred_normal, "pred_normal")
    _check_unit(gt_normal, "gt_normal")
    s = float(np.linalg.norm(np.cross(gt_normal, pred_normal)))
    pen = 0.0
    if offsets is not None and len(offsets):
        o = np.asarray(offsets, dtype=float) / radius
        pen = float(np.mean(np.einsum("ij,ij->i", o, o)))
    return LossReport(s, pen, s + penalty * pen)


def sin_loss_grad(pred_normal: np.ndarray, gt_normal: np.ndarray) -> np.ndarray:
    """d |gt x n| / d n; zero where the two are parallel."""
    c = np.cross(gt_normal, pred_normal)
    norm = np.linalg.norm(c)
    if norm == 0:
        return np.zeros(3)
    return np.cross(c / norm, gt_normal)


# -- the jet fit as a differentiable layer -------------------------------------


def wls_backward(system: WLSSystem, grad_normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a loss on the fitted normal w.r.t. the raw weights and the offsets.

    The fit solves ``A b = M^T W t`` in scaled coordinates. For an upstream
    gradient ``g`` on ``b`` the adjoint ``q = A^{-1} g`` gives
    ``dL/dA = -q b^T`` and ``dL/d(M^T W t) = q``, which expand per point to

        dL/dw_i = (M_i q) r_i
        dL/dt_i = w_i (M_i q)
        dL/dM_i = w_i (r_i q - (M_i q) b)

    with ``r_i`` the residual. Weight normalisation and the ridge term are
    treated as constants: the refined solution is invariant to the weight
    scale and independent of the ridge up to rounding.
    """
    b1, b2 = system.coefficients.slopes
    g_slopes = normal_jacobian(b1, b2).T @ grad_normal
    g_beta = np.zeros_like(system.beta_scaled)
    g_beta[1:3] = g_slopes / system.radius
    q = system.solve(g_beta)
    mq = system.design @ q
    res = system.residuals
    w = system.w
    g_w = mq * res / system.weight_scale
    g_design = w[:, None] * (res[:, None] * q[None, :] - mq[:, None] * system.beta_scaled[None, :])
    du, dv = design_derivatives(system.order, system.u, system.v)
    g_off = np.empty((len(w), 3))
    g_off[:, 0] = np.sum(g_design * du, axis=1) / system.radius
    g_off[:, 1] = np.sum(g_design * dv, axis=1) / system.radius
    g_off[:, 2] = w * mq
    return g_w, g_off


# -- network --------------------------------------------------------------------


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class FitNet:
    """Per-point weight/offset predictor over a nested neighbourhood chain."""

    def __init__(self, scales=DEFAULT_SCALES, order: int = 3, feature_width: int = 64,
                 seed: int = 0, zero_heads: bool = False):
        scales = tuple(int(s) for s in scales)
        if len(scales) < 2 or any(b >= a for a, b in zip(scales, scales[1:])):
            raise ValueError(f"scale chain must be strictly decreasing, got {scales}")
        self.scales = scales
        self.order = int(order)
        self.feature_width = int(feature_width)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        c = self.feature_width
        e0, e1 = ENCODER_WIDTHS[0], c
        self._dense("enc0", 3, e0, rng)
        self._dense("enc1", e0, e1, rng)
        for k in range(len(scales) - 1):
            self._dense(f"csa{k}_psi", c, c, rng)
            self._dense(f"csa{k}_phi", 2 * c, c, rng)
        self._dense("whead0", c, HEAD_WIDTH, rng)
        self._dense("whead1", HEAD_WIDTH, 1, rng)
        self._dense("ohead0", c, HEAD_WIDTH, rng)
        self._dense("ohead1", HEAD_WIDTH, 3, rng)
        if zero_heads:
            self.zero_heads()

    def _dense(self, name, fan_in, fan_out, rng):
        bound = 1.0 / np.sqrt(fan_in)
        self.params[name + ".W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        self.params[name + ".b"] = rng.uniform(-bound, bound, size=fan_out)

    def zero_heads(self):
        """Make both heads constant: uniform weights and zero offsets."""
        for name in ("whead1", "ohead1"):
            self.params[name + ".W"][:] = 0.0
            self.params[name + ".b"][:] = 0.0

    @property
    def n_layers(self) -> int:
        return len(self.scales) - 1

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "FitNet":
        other = FitNet.__new__(FitNet)
        other.scales, other.order = self.scales, self.order
        other.feature_width, other.seed = self.feature_width, self.seed
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def config(self) -> dict:
        return {"scales": list(self.scales), "order": self.order,
                "feature_width": self.feature_width, "seed": self.seed,
                "activation": "tanh", "encoder_widths": list(ENCODER_WIDTHS),
                "head_width": HEAD_WIDTH}

    # -- forward ------------------------------------------------------------------

    def _lin(self, name, x):
        return x @ self.params[name + ".W"] + self.params[name + ".b"]

    def _forward_heads(self, coords: np.ndarray, fit_radius: np.ndarray):
        """Batched forward up to the head outputs; returns outputs and a cache."""
        if coords.ndim != 3 or coords.shape[1] != self.scales[0] or coords.shape[2] != 3:
            raise ValueError(f"expected patches of shape (B, {self.scales[0]}, 3), got {coords.shape}")
        cache = {}
        in_radius = np.sqrt(np.max(np.einsum("bpi,bpi->bp", coords, coords), axis=1))
        in_radius = np.where(in_radius > 0, in_radius, 1.0)
        x = coords / in_radius[:, None, None]
        h = np.tanh(self._lin("enc0", x))
        f = np.tanh(self._lin("enc1", h))
        cache["x"], cache["enc0"], cache["enc1"] = x, h, f
        for k in range(self.n_layers):
            s_next = self.scales[k + 1]
            arg = np.argmax(f, axis=1)
            pooled = np.take_along_axis(f, arg[:, None, :], axis=1)[:, 0]
            p = np.tanh(self._lin(f"csa{k}_psi", pooled))
            cat = np.concatenate(
                [np.broadcast_to(p[:, None, :], (f.shape[0], s_next, p.shape[1])), f[:, :s_next]],
                axis=2)
            f_next = np.tanh(self._lin(f"csa{k}_phi", cat))
            cache[f"csa{k}"] = (f, arg, pooled, p, cat, f_next)
            f = f_next
        hw = np.tanh(self._lin("whead0", f))
        raw_w = self._lin("whead1", hw)[..., 0]
        ho = np.tanh(self._lin("ohead0", f))
        raw_o = self._lin("ohead1", ho)
        cache.update(feat=f, hw=hw, ho=ho, raw_w=raw_w, raw_o=raw_o)
        weights = _softplus(raw_w) + WEIGHT_FLOOR
        tanh_o = np.tanh(raw_o)
        offsets = OFFSET_BOUND * fit_radius[:, None, None] * tanh_o
        cache["tanh_o"], cache["fit_radius"] = tanh_o, fit_radius
        return weights, offsets, cache

    def forward(self, coords: np.ndarray):
        """Weights ``(B, s_K)`` and offsets ``(B, s_K, 3)`` for stacked local patches."""
        coords = np.asarray(coords, dtype=float)
        single = coords.ndim == 2
        if single:
            coords = coords[None]
        fit = coords[:, : self.scales[-1]]
        fit_radius = np.sqrt(np.max(np.einsum("bpi,bpi->bp", fit, fit), axis=1))
        w, o, _ = self._forward_heads(coords, fit_radius)
        return (w[0], o[0]) if single else (w, o)

    def predict(self, patch):
        """Interface used by the ``Learned`` estimator strategy."""
        return self.forward(getattr(patch, "coords", patch))

    def fit_normal(self, coords: np.ndarray) -> np.ndarray:
        """Normal of one local patch (local frame)."""
        coords = np.asarray(getattr(coords, "coords", coords), dtype=float)
        w, o = self.forward(coords)
        system = fit_system(FitProblem(coords[: self.scales[-1]], self.order, w, o))
        return normal_from_jet(system.coefficients)

    # -- loss and backward --------------------------------------------------------

    def loss_and_grad(self, coords: np.ndarray, gt_local: np.ndarray,
                      penalty: float = OFFSET_PENALTY, need_grad: bool = True):
        """Mean loss over a batch and (optionally) gradients for every parameter.

        Patches whose fit is singular are skipped; their count is returned.
        """
        coords = np.asarray(coords, dtype=float)
        gt_local = np.asarray(gt_local, dtype=float)
        bsz = coords.shape[0]
        fit = coords[:, : self.scales[-1]]
        fit_radius = np.sqrt(np.max(np.einsum("bpi,bpi->bp", fit, fit), axis=1))
        weights, offsets, cache = self._forward_heads(coords, fit_radius)

        g_w = np.zeros_like(weights)
        g_o = np.zeros_like(offsets)
        sin_sum = pen_sum = 0.0
        skipped = 0
        for b in range(bsz):
            try:
                system = fit_system(FitProblem(fit[b], self.order, weights[b], offsets[b]))
            except SingularFitError as exc:
                logger.warning("skipping patch %d: %s", b, exc)
                skipped += 1
                continue
            n = normal_from_jet(system.coefficients)
            rep = loss(n, gt_local[b], offsets[b], fit_radius[b], penalty)
            sin_sum += rep.sin_loss
            pen_sum += rep.offset_penalty
            if need_grad:
                gw, go = wls_backward(system, sin_loss_grad(n, gt_local[b]))
                g_w[b] = gw
                g_o[b] = go + penalty * 2.0 * offsets[b] / (offsets.shape[1] * fit_radius[b] ** 2)
        used = max(bsz - skipped, 1)
        report = LossReport(sin_sum / used, pen_sum / used, (sin_sum + penalty * pen_sum) / used)
        if not need_grad:
            return report, None, skipped
        grads = self._backward(cache, g_w / used, g_o / used)
        return report, grads, skipped

    def _backward(self, cache, g_w, g_o):
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}

        def dense_back(name, x, g_out):
            x2 = x.reshape(-1, x.shape[-1])
            g2 = g_out.reshape(-1, g_out.shape[-1])
            grads[name + ".W"] += x2.T @ g2
            grads[name + ".b"] += g2.sum(axis=0)
            return g_out @ self.params[name + ".W"].T

        f = cache["feat"]
        g_raw_w = (g_w * _sigmoid(cache["raw_w"]))[..., None]
        g_hw = dense_back("whead1", cache["hw"], g_raw_w)
        g_f = dense_back("whead0", f, g_hw * (1 - cache["hw"] ** 2))
        g_raw_o = g_o * OFFSET_BOUND * cache["fit_radius"][:, None, None] * (1 - cache["tanh_o"] ** 2)
        g_ho = dense_back("ohead1", cache["ho"], g_raw_o)
        g_f = g_f + dense_back("ohead0", f, g_ho * (1 - cache["ho"] ** 2))

        c = self.feature_width
        for k in reversed(range(self.n_layers)):
            f_in, arg, pooled, p, cat, f_out = cache[f"csa{k}"]
            s_next = f_out.shape[1]
            g_cat = dense_back(f"csa{k}_phi", cat, g_f * (1 - f_out ** 2))
            g_p = g_cat[..., :c].sum(axis=1)
            g_in = np.zeros_like(f_in)
            g_in[:, :s_next] = g_cat[..., c:]
            g_pooled = dense_back(f"csa{k}_psi", pooled, g_p * (1 - p ** 2))
            bidx = np.arange(f_in.shape[0])[:, None]
            cidx = np.arange(c)[None, :]
            np.add.at(g_in, (bidx, arg, cidx), g_pooled)
            g_f = g_in

        g_h = dense_back("enc1", cache["enc0"], g_f * (1 - cache["enc1"] ** 2))
        dense_back("enc0", cache["x"], g_h * (1 - cache["enc0"] ** 2))
        return grads


# -- scale aggregation as a standalone op -------------------------------------------


def csa_forward(psi_W, psi_b, phi_W, phi_b, features: np.ndarray, n_keep: int) -> np.ndarray:
    """One scale-aggregation step on a single patch.

    ``features`` has one row per point of the larger scale, nearest first;
    the output has a row for each of the ``n_keep`` nearest points.
    """
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[1] != psi_W.shape[0]:
        raise ValueError(f"features of shape {features.shape} do not match psi {psi_W.shape}")
    if not 1 <= n_keep <= features.shape[0]:
        raise ValueError(f"cannot keep {n_keep} of {features.shape[0]} points")
    if phi_W.shape[0] != psi_W.shape[1] + features.shape[1]:
        raise ValueError("phi input width must equal psi output width plus feature width")
    p = np.tanh(features.max(axis=0) @ psi_W + psi_b)
    cat = np.concatenate([np.broadcast_to(p, (n_keep, p.size)), features[:n_keep]], axis=1)
    return np.tanh(cat @ phi_W + phi_b)


def layer_params(model: FitNet, k: int):
    p = model.params
    return p[f"csa{k}_psi.W"], p[f"csa{k}_psi.b"], p[f"csa{k}_phi.W"], p[f"csa{k}_phi.b"]


# -- training -----------------------------------------------------------------------


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    coords = np.stack([s.patch.coords for s in samples])
    gt = np.stack([s.gt_local for s in samples])
    return coords, gt


def evaluate_model(model: FitNet, coords, gt_local, chunk: int = 256) -> LossReport:
    reps = []
    for i in range(0, len(coords), chunk):
        rep, _, _ = model.loss_and_grad(coords[i:i + chunk], gt_local[i:i + chunk], need_grad=False)
        reps.append((rep, len(coords[i:i + chunk])))
    n = sum(m for _, m in reps)
    return LossReport(*(sum(getattr(r, f) * m for r, m in reps) / n
                        for f in ("sin_loss", "offset_penalty", "total")))


@dataclass
class TrainResult:
    model: FitNet
    curve: list  # (step, batch sin loss, batch total loss)
    optimizer: dict
    skipped: int


def train_toy(model: FitNet, samples, steps: int = 500, lr: float = DEFAULT_LR,
              batch_size: int = 16, seed: int = 0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> TrainResult:
    """Adam on minibatches drawn by a seeded shuffle; returns a trained copy."""
    model = model.copy()
    coords, gt = stack_samples(samples)
    rng = np.random.default_rng(seed)
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(v) for k, v in model.params.items()}
    perm = rng.permutation(len(coords))
    pos = 0
    curve = []
    skipped = 0
    for step in range(1, steps + 1):
        if pos + batch_size > len(perm):
            perm = rng.permutation(len(coords))
            pos = 0
        idx = perm[pos:pos + batch_size]
        pos += batch_size
        rep, grads, sk = model.loss_and_grad(coords[idx], gt[idx])
        skipped += sk
        if not np.isfinite(rep.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDivergedError(f"non-finite loss or gradient at step {step}")
        curve.append((step, rep.sin_loss, rep.total))
        for k, g in grads.items():
            m[k] = beta1 * m[k] + (1 - beta1) * g
            v[k] = beta2 * v[k] + (1 - beta2) * g * g
            mh = m[k] / (1 - beta1 ** step)
            vh = v[k] / (1 - beta2 ** step)
            model.params[k] -= lr * mh / (np.sqrt(vh) + eps)
    opt = {"name": "adam", "lr": lr, "beta1": beta1, "beta2": beta2, "eps": eps,
           "batch_size": batch_size, "steps": steps, "seed": seed}
    return TrainResult(model, curve, opt, skipped)


# -- serialisation --------------------------------------------------------------------


def save_model(model: FitNet, path) -> Path:
    """Binary model file: a magic line, a JSON header line, then raw float64 data.

    The header lists every parameter's name and shape in storage order; the
    payload is the concatenation of the parameters as little-endian float64.
    """
    path = Path(path)
    names = list(model.params)
    header = {"format_version": FORMAT_VERSION, "model": model.config(), "dtype": "<f8",
              "params": [[n, list(model.params[n].shape)] for n in names]}
    with open(path, "wb") as fh:
        fh.write(MAGIC + b" " + str(FORMAT_VERSION).encode() + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())
    return path


def load_model(path) -> FitNet:
    with open(path, "rb") as fh:
        first = fh.readline().rstrip(b"\n").split(b" ")
        if first[0] != MAGIC or len(first) != 2:
            raise ValueError(f"{path}: not a model file")
        if int(first[1]) != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {first[1].decode()}")
        header = json.loads(fh.readline())
        payload = fh.read()
    cfg = header["model"]
    model = FitNet(cfg["scales"], cfg["order"], cfg["feature_width"], cfg["seed"])
    offset = 0
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        nbytes = 8 * count
        if offset + nbytes > len(payload):
            raise ValueError(f"{path}: truncated parameter data")
        model.params[name] = np.frombuffer(payload, "<f8", count, offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing bytes")
    return model
