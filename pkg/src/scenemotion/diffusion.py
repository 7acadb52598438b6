"""Guided DDPM reverse process over pose-parameter motions.

Each reverse step asks a denoiser for the clean-motion estimate ``x0_hat``,
pulls it toward the masked skeleton guidance, pushes it out of scene
obstacles, then forms the DDPM posterior mean and adds noise.

Both guidance updates solve ``x0' = x0_hat - w * grad L(x0')`` (``w`` is
``lam`` or ``eta``). With ``step_mode="explicit"`` the gradient is taken at
``x0_hat`` instead, which is the textbook update but is only stable for
small strengths: for a masked root entry the residual is multiplied by
``1 - 2 * lam`` per step.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize, nnls
from scipy.sparse import csr_matrix
from sklearn.base import BaseEstimator

from ._validation import check_scalar
from .body import (
    MotionSequence,
    attached_point_jacobian,
    attached_point_vjp,
    capsule_points,
    default_skeleton,
    fk,
    fk_jacobian,
    forward,
)
from .exceptions import DimensionMismatch, InvalidSigma
from .geometry import SceneField, scene_sdf, scene_sdf_grad

STEP_MODES = ("proximal", "explicit")


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

class DiffusionSchedule:
    """Per-step ``alpha_k`` for ``k = 1..K`` and the derived DDPM coefficients.

    Arrays are stored 0-based: ``alphas[k - 1]`` is ``alpha_k``. The
    cumulative product before step 1 is defined as 1.
    """

    def __init__(self, alphas):
        a = np.asarray(alphas, dtype=float).reshape(-1)
        if len(a) < 1:
            raise ValueError("a schedule needs at least one step")
        if np.any(a <= 0) or np.any(a >= 1):
            raise ValueError("every alpha must lie strictly inside (0, 1)")
        self.alphas = a
        self.alpha_bars = np.cumprod(a)
        self.alpha_bars_prev = np.concatenate([[1.0], self.alpha_bars[:-1]])
        denom = 1.0 - self.alpha_bars
        self.coef_x0 = np.sqrt(self.alpha_bars_prev) * (1.0 - a) / denom
        self.coef_xk = np.sqrt(a) * (1.0 - self.alpha_bars_prev) / denom
        self.sigmas = np.sqrt(1.0 - a)
        for arr in (self.alphas, self.alpha_bars, self.alpha_bars_prev,
                    self.coef_x0, self.coef_xk, self.sigmas):
            arr.setflags(write=False)

    @property
    def n_steps(self):
        return len(self.alphas)

    def alpha_bar(self, k):
        return float(self.alpha_bars[k - 1]) if k >= 1 else 1.0

    @classmethod
    def linear(cls, n_steps=100, beta_start=1e-4, beta_end=0.02, reference_steps=1000,
               max_beta=0.999):
        """Linear betas quoted for ``reference_steps`` and rescaled to ``n_steps``.

        The rescaling (``beta * reference_steps / n_steps``) keeps the total
        noise level of the reference schedule, so ``alpha_bar_K`` stays near
        zero for short chains.
        """
        check_scalar(n_steps, "n_steps", min_val=1, target_type=int)
        scale = reference_steps / n_steps if reference_steps else 1.0
        betas = np.linspace(beta_start * scale, beta_end * scale, n_steps)
        return cls(1.0 - np.clip(betas, 1e-12, max_beta))

    def posterior_mean(self, x0_hat, x_k, k):
        return self.coef_x0[k - 1] * x0_hat + self.coef_xk[k - 1] * x_k


# ---------------------------------------------------------------------------
# Denoisers
# ---------------------------------------------------------------------------

class GaussianPriorDenoiser:
    """Exact posterior mean ``E[x0 | x_k]`` for a prior ``x0 ~ N(mean, sigma^2 I)``.

    Stands in for a trained motion model; the text argument is ignored.
    """

    def __init__(self, mean, sigma):
        check_scalar(sigma, "sigma", min_val=0.0, include_min=False, exc=InvalidSigma)
        self.mean = np.asarray(mean, dtype=float)
        self.sigma = float(sigma)

    def predict(self, x_k, k, text, schedule: DiffusionSchedule):
        x_k = np.asarray(x_k, float)
        if x_k.shape != self.mean.shape:
            raise DimensionMismatch(f"state shape {x_k.shape} does not match prior {self.mean.shape}")
        return _prior_posterior_mean(x_k, schedule.alpha_bar(k), self.mean, self.sigma)


def _prior_posterior_mean(x_k, alpha_bar, mean, sigma):
    s2 = sigma * sigma
    return (s2 * np.sqrt(alpha_bar) * x_k + (1.0 - alpha_bar) * mean) / (alpha_bar * s2 + 1.0 - alpha_bar)


def gaussian_prior_denoiser(mean, sigma):
    return GaussianPriorDenoiser(mean, sigma)


_ACTIVATIONS = {
    "relu": lambda z: np.maximum(z, 0.0),
    "tanh": np.tanh,
    "silu": lambda z: z / (1.0 + np.exp(-z)),
    "identity": lambda z: z,
}


class MLPDenoiser:
    """Two-layer perceptron applied frame by frame.

    Input is ``[frame_state, k / K]``; output is that frame's ``x0_hat``.
    """

    def __init__(self, w1, b1, w2, b2, activation="silu"):
        self.w1, self.b1 = np.asarray(w1, float), np.asarray(b1, float).reshape(-1)
        self.w2, self.b2 = np.asarray(w2, float), np.asarray(b2, float).reshape(-1)
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        hidden, d_in = self.w1.shape
        d_out, hidden2 = self.w2.shape
        if hidden2 != hidden or len(self.b1) != hidden or len(self.b2) != d_out or d_in != d_out + 1:
            raise DimensionMismatch("inconsistent MLP layer shapes")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        (l1, l2) = doc["layers"]
        return cls(l1["weight"], l1["bias"], l2["weight"], l2["bias"], doc.get("activation", "silu"))

    def predict(self, x_k, k, text, schedule: DiffusionSchedule):
        x = np.atleast_2d(np.asarray(x_k, float))
        if x.shape[-1] != self.w2.shape[0]:
            raise DimensionMismatch(f"MLP expects frames of {self.w2.shape[0]} values")
        t = np.full(x.shape[:-1] + (1,), k / schedule.n_steps)
        h = _ACTIVATIONS[self.activation](np.concatenate([x, t], axis=-1) @ self.w1.T + self.b1)
        return (h @ self.w2.T + self.b2).reshape(np.shape(x_k))


# ---------------------------------------------------------------------------
# Guidance losses
# ---------------------------------------------------------------------------

@dataclass
class GuidanceConfig:
    lam: float = 2.0
    eta: float = 0.5
    samples_per_bone: int = 4
    step_mode: str = "proximal"
    align_iters: int = 3
    scene_iters: int = 3
    scene_margin: float = 0.02
    scene_clearance: float = 1e-3

    def __post_init__(self):
        check_scalar(self.lam, "lam", min_val=0.0)
        check_scalar(self.eta, "eta", min_val=0.0)
        check_scalar(self.samples_per_bone, "samples_per_bone", min_val=2, target_type=int)
        if self.step_mode not in STEP_MODES:
            raise ValueError(f"step_mode must be one of {STEP_MODES}")


def _frames_view(x0, skel):
    x = np.asarray(x0, dtype=float)
    D = skel.pose_dim
    if x.size % D:
        raise DimensionMismatch(f"state of size {x.size} is not a multiple of the pose size {D}")
    return x.reshape(-1, D)


def _guidance_arrays(g, n_frames, skel):
    """Guidance positions/mask padded or cut to ``n_frames``."""
    if g.n_joints != skel.n_joints:
        raise DimensionMismatch(f"guidance has {g.n_joints} joints, skeleton {skel.n_joints}")
    if g.n_frames > n_frames:
        raise DimensionMismatch(f"guidance spans {g.n_frames} frames, motion only {n_frames}")
    pos = np.zeros((n_frames, skel.n_joints, 3))
    mask = np.zeros((n_frames, skel.n_joints), dtype=bool)
    pos[:g.n_frames] = np.where(g.mask[..., None], g.positions, 0.0)
    mask[:g.n_frames] = g.mask
    return pos, mask


def align_loss(x0_hat, g, skel=None):
    """Squared masked distance between guidance and FK joints, with its gradient.

    Returns ``(loss, grad)``; ``grad`` has the shape of ``x0_hat``.
    """
    skel = skel or default_skeleton()
    x = _frames_view(x0_hat, skel)
    s, mask = _guidance_arrays(g, len(x), skel)
    grad = np.zeros_like(x)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return 0.0, grad.reshape(np.shape(x0_hat))
    xr = x[rows]
    r = (fk(xr, skel) - s[rows]) * mask[rows, :, None]
    loss = float(np.sum(r * r))
    jac = fk_jacobian(xr, skel)
    grad[rows] = 2.0 * np.einsum("fij,fi->fj", jac, r.reshape(len(rows), -1))
    return loss, grad.reshape(np.shape(x0_hat))


def scene_loss(x0_hat, field: SceneField, skel=None, cfg: GuidanceConfig | None = None):
    """Summed penetration depth of capsule samples, with its gradient."""
    skel = skel or default_skeleton()
    cfg = cfg or GuidanceConfig()
    x = _frames_view(x0_hat, skel)
    grad = np.zeros_like(x)
    if len(field) == 0:
        return 0.0, grad.reshape(np.shape(x0_hat))
    state = forward(x, skel)
    pts, frames = capsule_points(state, skel, cfg.samples_per_bone)
    sdf = scene_sdf(pts.reshape(-1, 3), field).reshape(pts.shape[:-1])
    pen = sdf < 0
    loss = float(-sdf[pen].sum())
    if not pen.any():
        return loss, grad.reshape(np.shape(x0_hat))
    rows = np.flatnonzero(pen.any(axis=1))
    g_pts = np.zeros(pts[rows].shape)
    sub = pen[rows]
    g_pts[sub] = -scene_sdf_grad(pts[rows][sub], field)
    sub_state = type(state)(state.positions[rows], state.globals[rows], state.axes[rows])
    grad[rows] = attached_point_vjp(pts[rows], frames, g_pts, sub_state, skel)
    return loss, grad.reshape(np.shape(x0_hat))


# ---------------------------------------------------------------------------
# Guidance updates
# ---------------------------------------------------------------------------

def _align_prox(x0, g, skel, lam, iters):
    """Gauss-Newton solve of ``argmin 1/2 |z - x0|^2 + lam * L_align(z)``."""
    x0 = _frames_view(x0, skel)
    s, mask = _guidance_arrays(g, len(x0), skel)
    rows = np.flatnonzero(mask.any(axis=1))
    z = x0.copy()
    if rows.size == 0 or lam == 0:
        return z
    w = np.repeat(mask[rows], 3, axis=1).astype(float)        # (F, 3J) row selector
    target = s[rows].reshape(len(rows), -1)
    eye = np.eye(w.shape[1])
    for _ in range(iters):
        zr = z[rows]
        r = (fk(zr, skel).reshape(len(rows), -1) - target) * w
        Jm = fk_jacobian(zr, skel) * w[..., None]
        b = -(zr - x0[rows]) - 2.0 * lam * np.einsum("fij,fi->fj", Jm, r)
        # (I + 2 lam J^T J)^-1 b via Woodbury on the small joint space
        JJt = Jm @ np.swapaxes(Jm, 1, 2)
        Jb = np.einsum("fij,fj->fi", Jm, b)
        y = np.linalg.solve(eye + 2.0 * lam * JJt, Jb[..., None])[..., 0]
        delta = b - 2.0 * lam * np.einsum("fij,fi->fj", Jm, y)
        z[rows] = zr + delta
    return z


def _scene_prox(x0, field, skel, eta, cfg: GuidanceConfig):
    """Minimise ``1/2 |z - x0|^2 + eta * sum relu(clearance - sdf_i(z))``.

    Each outer pass linearises the sample-point distances and solves the
    resulting hinge problem exactly through its box-constrained dual.
    """
    x0 = _frames_view(x0, skel)
    z = x0.copy()
    if len(field) == 0 or eta == 0:
        return z
    frames_layout = None
    for _ in range(cfg.scene_iters):
        state = forward(z, skel)
        pts, frames_layout = capsule_points(state, skel, cfg.samples_per_bone)
        sdf = scene_sdf(pts.reshape(-1, 3), field).reshape(pts.shape[:-1])
        if not np.any(sdf < cfg.scene_clearance):
            break
        cand = sdf < cfg.scene_clearance + cfg.scene_margin
        f_idx, p_idx = np.nonzero(cand)
        cpts = pts[f_idx, p_idx]
        normals = scene_sdf_grad(cpts, field)
        # per-candidate Jacobian rows using that frame's kinematic state
        jac = np.empty((len(cpts), 3, skel.pose_dim))
        for f in np.unique(f_idx):
            sel = np.flatnonzero(f_idx == f)
            st = type(state)(state.positions[f], state.globals[f], state.axes[f])
            jac[sel] = attached_point_jacobian(cpts[sel], frames_layout[p_idx[sel]], st, skel)
        G = np.einsum("pi,pij->pj", normals, jac)              # d sdf / d pose
        a = (z - x0)[f_idx]
        c = sdf[f_idx, p_idx] - cfg.scene_clearance - np.einsum("pj,pj->p", G, a)
        w = _hinge_dual(G, c, f_idx, len(z), eta)
        u = np.zeros_like(z)
        np.add.at(u, f_idx, eta * w[:, None] * G)
        z = x0 + u
    return z


def _least_distance(G, h):
    """Multipliers ``lam >= 0`` of ``min |u|^2 s.t. G u >= h`` with ``u = G^T lam``.

    Lawson-Hanson reduction to one NNLS solve; ``None`` when infeasible.
    """
    E = np.vstack([G.T, h[None, :]])
    f = np.zeros(len(E))
    f[-1] = 1.0
    u, _ = nnls(E, f, maxiter=50 * E.shape[1])
    denom = 1.0 - h @ u
    if denom <= 1e-12:
        return None
    return u / denom


def _hinge_dual(G, c, f_idx, n_frames, eta):
    """``argmin_{w in [0,1]} sum_f 1/2 eta |G_f^T w_f|^2 + c^T w``.

    Frames decouple. When no multiplier of the hard-constraint problem
    exceeds ``eta`` the hinge solution is that projection, found exactly by
    NNLS; the remaining frames go to a bounded quasi-Newton solve.
    """
    w = np.zeros(len(c))
    rest = []
    bounds = np.flatnonzero(np.diff(f_idx)) + 1
    for sel in np.split(np.arange(len(c)), bounds):
        lam = _least_distance(G[sel], -c[sel]) if np.any(c[sel] < 0) else np.zeros(len(sel))
        if lam is not None and lam.max(initial=0.0) <= eta:
            w[sel] = lam / eta
        else:
            rest.append(sel)
    if rest:
        sel = np.concatenate(rest)
        w[sel] = _hinge_dual_lbfgs(G[sel], c[sel], f_idx[sel], n_frames, eta)
    return w


def _hinge_dual_lbfgs(G, c, f_idx, n_frames, eta):
    P = len(c)
    S = csr_matrix((np.ones(P), (f_idx, np.arange(P))), shape=(n_frames, P))

    def fun(w):
        v = S @ (w[:, None] * G)
        val = 0.5 * eta * np.sum(v * v) + c @ w
        grad = eta * np.einsum("pj,pj->p", G, v[f_idx]) + c
        return val, grad

    w0 = (c < 0).astype(float)
    res = minimize(fun, w0, jac=True, method="L-BFGS-B", bounds=[(0.0, 1.0)] * len(c),
                   options={"maxiter": 500, "ftol": 1e-12, "gtol": 1e-10})
    return np.clip(res.x, 0.0, 1.0)


def apply_alignment(x0_hat, g, skel, cfg: GuidanceConfig):
    if g is None or cfg.lam == 0:
        return np.array(x0_hat, dtype=float, copy=True)
    if cfg.step_mode == "explicit":
        _, grad = align_loss(x0_hat, g, skel)
        return np.asarray(x0_hat, float) - cfg.lam * grad
    return _align_prox(x0_hat, g, skel, cfg.lam, cfg.align_iters).reshape(np.shape(x0_hat))


def apply_scene(x0_hat, field, skel, cfg: GuidanceConfig):
    if field is None or len(field) == 0 or cfg.eta == 0:
        return np.array(x0_hat, dtype=float, copy=True)
    if cfg.step_mode == "explicit":
        _, grad = scene_loss(x0_hat, field, skel, cfg)
        return np.asarray(x0_hat, float) - cfg.eta * grad
    return _scene_prox(x0_hat, field, skel, cfg.eta, cfg).reshape(np.shape(x0_hat))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def reverse_step(x_k, k, text, denoiser, g, field, cfg: GuidanceConfig,
                 schedule: DiffusionSchedule, rng, skel=None, trace=None):
    """One guided reverse step ``x_k -> x_{k-1}``; step 1 returns the mean."""
    if not 1 <= k <= schedule.n_steps:
        raise ValueError(f"k must lie in [1, {schedule.n_steps}], got {k}")
    x0_hat = denoiser.predict(x_k, k, text, schedule)
    if g is not None and cfg.lam > 0:
        x0_hat = apply_alignment(x0_hat, g, skel or default_skeleton(), cfg)
    if field is not None and len(field) and cfg.eta > 0:
        x0_hat = apply_scene(x0_hat, field, skel or default_skeleton(), cfg)
    mu = schedule.posterior_mean(x0_hat, x_k, k)
    if trace is not None:
        trace.append({"k": k, "x0_hat": x0_hat})
    if k == 1:
        return mu
    return mu + schedule.sigmas[k - 1] * rng.standard_normal(np.shape(x_k))


def run_reverse(denoiser, text, shape, schedule: DiffusionSchedule, cfg: GuidanceConfig, seed,
                g=None, field=None, skel=None, trace=None):
    """Draw ``x_K ~ N(0, I)`` of ``shape`` and denoise it down to ``x_0``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    for k in range(schedule.n_steps, 0, -1):
        x = reverse_step(x, k, text, denoiser, g, field, cfg, schedule, rng, skel, trace)
    return x


def rest_prior_mean(skel, n_frames, root_height=0.0):
    mean = np.zeros((n_frames, skel.pose_dim))
    mean[:, 2] = root_height
    return mean


def sample(denoiser, text, g, field, schedule: DiffusionSchedule, cfg: GuidanceConfig, seed,
           skel=None, n_frames=None, fps=20.0) -> MotionSequence:
    skel = skel or default_skeleton()
    if n_frames is None:
        if g is None:
            raise ValueError("n_frames is required without guidance")
        n_frames = g.n_frames
    x0 = run_reverse(denoiser, text, (n_frames, skel.pose_dim), schedule, cfg, seed, g, field, skel)
    return MotionSequence.from_array(x0, skel.n_joints, fps, skel.name)


class GuidedMotionSampler(BaseEstimator):
    """Estimator wrapper around :func:`sample`.

    ``fit`` binds the conditioning (guidance spec, scene field, skeleton);
    ``sample`` draws a motion. Without an explicit denoiser a Gaussian prior
    centred on the rest pose (root at ``root_height``) is used.
    """

    def __init__(self, lam=2.0, eta=0.5, n_steps=100, beta_start=1e-4, beta_end=0.02,
                 samples_per_bone=4, step_mode="proximal", prior_sigma=0.5, root_height=0.9,
                 n_frames=120, fps=20.0, denoiser=None, random_state=None):
        self.lam = lam
        self.eta = eta
        self.n_steps = n_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.samples_per_bone = samples_per_bone
        self.step_mode = step_mode
        self.prior_sigma = prior_sigma
        self.root_height = root_height
        self.n_frames = n_frames
        self.fps = fps
        self.denoiser = denoiser
        self.random_state = random_state

    def fit(self, guidance=None, field=None, skeleton=None):
        self.skeleton_ = skeleton or default_skeleton()
        self.config_ = GuidanceConfig(lam=float(self.lam), eta=float(self.eta),
                                      samples_per_bone=int(self.samples_per_bone),
                                      step_mode=self.step_mode)
        self.schedule_ = DiffusionSchedule.linear(int(self.n_steps), self.beta_start, self.beta_end)
        n = guidance.n_frames if guidance is not None else int(self.n_frames)
        self.n_frames_ = n
        self.fps_ = float(getattr(guidance, "fps", self.fps))
        if self.denoiser is None:
            self.denoiser_ = GaussianPriorDenoiser(
                rest_prior_mean(self.skeleton_, n, self.root_height), self.prior_sigma)
        else:
            self.denoiser_ = self.denoiser
        self.guidance_ = guidance
        self.field_ = field if field is not None else SceneField()
        return self

    def sample(self, text="", random_state=None):
        seed = self.random_state if random_state is None else random_state
        return sample(self.denoiser_, text, self.guidance_, self.field_, self.schedule_,
                      self.config_, seed, self.skeleton_, self.n_frames_, self.fps_)

    def predict(self, texts):
        """One motion per text, all drawn with the configured seed."""
        if isinstance(texts, str):
            return self.sample(texts)
        return [self.sample(t) for t in texts]
