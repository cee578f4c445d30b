"""Material and lighting recovery with frozen geometry.

The mesh is converted to Gaussians once; per view the compositing weights
form a constant sparse matrix ``M`` (image = M @ colors), so every step is
loss -> pixels -> per-Gaussian colors -> BRDF / lighting -> field parameters
with hand-written adjoints. The first stage shades with the split-sum
approximation, the second with frozen Monte Carlo sample bundles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import binfmt, rng
from .adapter import GaussianSet, adapt
from .geometry import Mesh, ScalarGrid, entropy_loss
from .lighting import (EnvironmentLight, IndirectLight, brdf_lut, downsample, irradiance_operator, lut_lookup,
                       mip_weights, precompute_splitsum, prefilter_operator, sh_basis, tap_matrix)
from .losses_metrics import LossReport, l1, light_regularizer, mask_mse, ssim
from .material_field import CHANNELS, MaterialField, logistic, logistic_grad
from .scene_io import RunConfig, View
from .splat import gbuffer, splat_weights
from .transport import build_bvh, draw_samples, estimate_radiance, shade_bundle

log = logging.getLogger(__name__)

WARMUP, MONTECARLO = "warmup_splitsum", "montecarlo"
STAGES = (WARMUP, MONTECARLO)
BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class FitDiverged(RuntimeError):
    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class FitState:
    field: MaterialField
    env_log: np.ndarray | None      # (h, w, 3) log radiance when the environment is learned
    sh: np.ndarray                  # ((deg+1)^2, 3)
    iteration: int = 0
    stage: str = WARMUP
    moments: dict = field(default_factory=dict)
    lr: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def parameters(self, learn_env=True, learn_indirect=True):
        p = {"material": self.field.params}
        if learn_env and self.env_log is not None:
            p["env"] = self.env_log
        if learn_indirect:
            p["sh"] = self.sh
        return p

    def copy(self):
        return FitState(self.field.copy(), None if self.env_log is None else self.env_log.copy(), self.sh.copy(),
                        self.iteration, self.stage,
                        {k: (m.copy(), v.copy()) for k, (m, v) in self.moments.items()},
                        dict(self.lr), [dict(h) for h in self.history])

    def environment(self, fallback=None):
        if self.env_log is None:
            return fallback
        return EnvironmentLight(np.exp(self.env_log))

    def indirect(self):
        return IndirectLight(self.sh)

    def save(self, path):
        arrays = {"material": self.field.params, "sh": self.sh}
        if self.env_log is not None:
            arrays["env_log"] = self.env_log
        for k, (m, v) in self.moments.items():
            arrays[f"m_{k}"], arrays[f"v_{k}"] = m, v
        binfmt.write(path, {"kind": "fit_state", "iteration": self.iteration, "stage": self.stage,
                            "lr": self.lr, "history": self.history, "moments": sorted(self.moments),
                            "field": {"lo": self.field.lo.tolist(), "hi": self.field.hi.tolist(),
                                      "resolutions": list(self.field.resolutions)}}, arrays)

    @classmethod
    def load(cls, path):
        h, a = binfmt.read(path)
        if h.get("kind") != "fit_state":
            raise ValueError("file does not hold a fit checkpoint")
        f = MaterialField(h["field"]["lo"], h["field"]["hi"], h["field"]["resolutions"], a["material"])
        moments = {k: (a[f"m_{k}"].copy(), a[f"v_{k}"].copy()) for k in h["moments"]}
        return cls(f, a.get("env_log"), a["sh"].copy(), h["iteration"], h["stage"], moments, h["lr"], h["history"])


def adam_step(params: dict, grads: dict, state: FitState, t: int):
    """In-place Adam update of every array in ``params`` that has a gradient."""
    b1, b2 = BETAS
    for name, g in grads.items():
        p = params[name]
        m, v = state.moments.get(name, (np.zeros_like(p), np.zeros_like(p)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.moments[name] = (m, v)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p -= state.lr[name] * mhat / (np.sqrt(vhat) + ADAM_EPS)


# ---------------------------------------------------------------------------
# lighting tables as linear maps of the environment texels

class LightModel:
    def __init__(self, env: EnvironmentLight | None, learnable: bool, res=(16, 32), mips=6, lut_n=64):
        self.learnable = learnable
        self.mips = mips
        self.lut = brdf_lut(lut_n)
        if learnable:
            h, w = res
            self.shapes = {"radiance": (h, w), "irradiance": (h, w), "mips": [(h, w)] * mips}
            self.irr_op = irradiance_operator(h, w)
            self.pref_ops = [None] + [prefilter_operator(h, w, level / (mips - 1)) for level in range(1, mips)]
        else:
            if env is None:
                raise ValueError("a fixed environment must be given")
            if env.prefiltered is None or len(env.prefiltered) != mips:
                precompute_splitsum(env, mips, lut_n)
            self.env = env
            self.shapes = {"radiance": env.shape, "irradiance": env.irradiance.shape[:2],
                           "mips": [m.shape[:2] for m in env.prefiltered]}

    def tables(self, env_log):
        if self.learnable:
            E = np.exp(env_log).reshape(-1, 3)
            mips = [E] + [op @ E for op in self.pref_ops[1:]]
            return {"radiance": E, "irradiance": self.irr_op @ E, "mips": mips}
        e = self.env
        return {"radiance": e.radiance.reshape(-1, 3), "irradiance": e.irradiance.reshape(-1, 3),
                "mips": [m.reshape(-1, 3) for m in e.prefiltered]}

    def backprop(self, g, env_log):
        """Gradient w.r.t. the log-radiance texels from table cotangents."""
        gE = g["radiance"] + self.irr_op.T @ g["irradiance"] + g["mips"][0]
        for op, gm in zip(self.pref_ops[1:], g["mips"][1:]):
            gE = gE + op.T @ gm
        return gE.reshape(env_log.shape) * np.exp(env_log)

    def zero_grads(self):
        z = lambda s: np.zeros((s[0] * s[1], 3))
        return {"radiance": z(self.shapes["radiance"]), "irradiance": z(self.shapes["irradiance"]),
                "mips": [z(s) for s in self.shapes["mips"]]}


# ---------------------------------------------------------------------------
# per-view constants

@dataclass
class ViewData:
    view: View
    index: int
    M: sp.csr_matrix      # (H*W, P) restricted to visible Gaussians
    vis: np.ndarray       # (P,) Gaussian ids
    alpha: np.ndarray     # (H, W, 1)
    x: np.ndarray
    n: np.ndarray
    wo: np.ndarray
    nv: np.ndarray
    T_irr: sp.csr_matrix
    T_mips: list
    target: np.ndarray
    mask: np.ndarray


def prepare_view(gs: GaussianSet, view: View, index: int, light: LightModel, blur=0.0) -> ViewData:
    if view.target_image is None:
        raise ValueError(f"view {view.name or index} has no target image")
    sw = splat_weights(gs, view, blur)
    vis = np.unique(sw.gaussian)
    cols = np.searchsorted(vis, sw.gaussian)
    M = sp.csr_matrix((sw.weight, (sw.pixel, cols)), shape=(view.height * view.width, len(vis)))
    x, n = gs.positions[vis], gs.normals[vis]
    wo = view.position[None, :] - x
    wo /= np.linalg.norm(wo, axis=1, keepdims=True)
    nv = np.clip(np.sum(n * wo, axis=1), 0.0, 1.0)
    r = 2 * np.sum(n * wo, axis=1, keepdims=True) * n - wo
    T_irr = tap_matrix(n, *light.shapes["irradiance"])
    T_mips = [tap_matrix(r, *s) for s in light.shapes["mips"]]
    mask = view.target_mask
    if mask is None:
        mask = np.ones((view.height, view.width, 1))
    mask = np.asarray(mask, dtype=np.float64).reshape(view.height, view.width, 1)
    return ViewData(view, index, M, vis, sw.alpha, x, n, wo, nv, T_irr, T_mips,
                    np.asarray(view.target_image, dtype=np.float64)[..., :3], mask)


@dataclass
class McData:
    bundle: object
    T_rad: sp.csr_matrix   # (P*S, K) taps into the radiance table
    Y: np.ndarray          # (P, S, n_sh)
    Li: np.ndarray | None = None   # cached incident light when lighting is not learned


@dataclass
class StepContext:
    stage: str
    step: int
    views: list                          # indices into Objective.views
    mc: dict = field(default_factory=dict)  # view index -> McData
    mc_key: int = -1


# ---------------------------------------------------------------------------
# shading with adjoints

def _splitsum(vd: ViewData, light: LightModel, tab, a, r, m):
    E = vd.T_irr @ tab["irradiance"]
    prefs = np.stack([T @ t for T, t in zip(vd.T_mips, tab["mips"])])
    L = light.mips
    lo, hi, t = mip_weights(r, L)
    idx = np.arange(len(r))
    Plo, Phi = prefs[lo, idx], prefs[hi, idx]
    tt = t[:, None]
    pref = (1 - tt) * Plo + tt * Phi
    dpref = (L - 1) * (Phi - Plo) if L > 1 else np.zeros_like(pref)
    AB, dAB = lut_lookup(light.lut, vd.nv, r, True)
    A, B, dA, dB = AB[:, 0:1], AB[:, 1:2], dAB[:, 0:1], dAB[:, 1:2]
    mm = m[:, None]
    F0 = 0.04 * (1 - mm) + a * mm
    color = (1 - mm) * a * E + pref * (F0 * A + B)
    Ld = (1 - mm) * E
    Ls = pref * (A + B)

    def back(gc, gLd, gLs):
        g_a = gc * ((1 - mm) * E + pref * A * mm)
        g_m = np.sum(gc * (-a * E + pref * A * (a - 0.04)), axis=1) - np.sum(gLd * E, axis=1)
        g_r = (np.sum(gc * (dpref * (F0 * A + B) + pref * (F0 * dA + dB)), axis=1)
               + np.sum(gLs * (dpref * (A + B) + pref * (dA + dB)), axis=1))
        gt = None
        if light.learnable:
            gE = gc * (1 - mm) * a + gLd * (1 - mm)
            gp = gc * (F0 * A + B) + gLs * (A + B)
            gt = light.zero_grads()
            gt["irradiance"] = vd.T_irr.T @ gE
            for level in range(L):
                wl = np.where(lo == level, 1 - t, 0.0) + np.where(hi == level, t, 0.0)
                if np.any(wl):
                    gt["mips"][level] = vd.T_mips[level].T @ (gp * wl[:, None])
        return g_a, g_r, g_m, gt, None

    return color, Ld, Ls, back


def _montecarlo(vd: ViewData, mc: McData, light: LightModel, tab, sh, a, r, m, need_light_grads):
    b = mc.bundle
    P, S = b.weight.shape
    O = b.occluded[..., None]
    Yc = mc.Y @ sh
    if mc.Li is not None:
        Li = mc.Li
    else:
        Ldir = (mc.T_rad @ tab["radiance"]).reshape(P, S, 3)
        Li = (1 - O) * Ldir + O * np.maximum(Yc, 0.0)
        if not need_light_grads:
            mc.Li = Li
    d, s, gr = shade_bundle(b, Li, a, r, m, with_grad=True)
    color = d + s
    mm = m[:, None]
    Ld = (1 - mm) * gr["irradiance"]
    Ls = gr["spec_b"]

    def back(gc, gLd, gLs):
        g_a = gc * gr["d_albedo"]
        g_m = np.sum(gc * gr["d_metal"], axis=1) - np.sum(gLd * gr["irradiance"], axis=1)
        g_r = np.sum(gc * gr["d_rho"], axis=1) + np.sum(gLs * gr["d_spec_b"], axis=1)
        gt = g_sh = None
        if need_light_grads:
            k = gr["k"][..., None]
            sv, fw = gr["s"][..., None], gr["fw"][..., None]
            F0 = (0.04 * (1 - mm) + a * mm)[:, None]
            per = (1 - mm)[:, None] * a[:, None] / np.pi + sv * (F0 * (1 - fw) + fw)
            gLi = k * (gc[:, None] * per + gLd[:, None] * (1 - mm)[:, None] / np.pi + gLs[:, None] * sv)
            if light.learnable:
                gt = light.zero_grads()
                gt["radiance"] = mc.T_rad.T @ ((1 - O) * gLi).reshape(-1, 3)
            g_sh = np.einsum("psk,psc->kc", mc.Y, O * gLi * (Yc > 0))
        return g_a, g_r, g_m, gt, g_sh

    return color, Ld, Ls, back


# ---------------------------------------------------------------------------
# objective

class Objective:
    """Total loss and gradient for a fixed set of views and Gaussians."""

    def __init__(self, gs: GaussianSet, mesh: Mesh, views, config: RunConfig, env=None, indirect=None,
                 grid: ScalarGrid | None = None, field_: MaterialField | None = None):
        if len(views) < 1:
            raise ValueError("need at least one view with a target image")
        self.gs = gs
        self.mesh = mesh
        self.config = config
        self.grid = grid
        self.learn_env = config.learn_env
        self.learn_indirect = config.learn_indirect and config.indirect
        self.light = LightModel(env, self.learn_env, config.env_resolution, config.mips, config.lut_size)
        self.views = [prepare_view(gs, v, i, self.light, config.blur) for i, v in enumerate(views)]
        self.field_template = field_ or MaterialField.for_mesh(mesh, config.field_resolutions)
        self.Q, _ = self.field_template.interpolation_matrix(gs.positions)
        self.bvh = build_bvh(mesh) if config.occlusion else None
        self.env = env
        self.entropy = entropy_loss(grid) if grid is not None else 0.0

    # -- state ------------------------------------------------------------
    def initial_state(self, indirect: IndirectLight | None = None) -> FitState:
        c = self.config
        n_sh = (c.sh_degree + 1) ** 2
        sh = np.zeros((n_sh, 3)) if indirect is None else np.array(indirect.coeffs[:n_sh], dtype=np.float64)
        env_log = None
        if self.learn_env:
            h, w = c.env_resolution
            if self.env is not None:
                small = downsample(self.env.radiance, h)
                if small.shape[:2] != (h, w):
                    import cv2
                    small = cv2.resize(small, (w, h), interpolation=cv2.INTER_LINEAR).astype(np.float64)
                env_log = np.log(np.maximum(small, 1e-4))
            else:
                env_log = np.full((h, w, 3), np.log(0.5))
        lr = {"material": c.lr_material, "env": c.lr_light, "sh": c.lr_light}
        return FitState(self.field_template.copy(), env_log, sh, 0, WARMUP, {}, lr, [])

    def lambda_sdf(self, step):
        c = self.config
        half = max(c.iterations // 2, 1)
        f = min(step / half, 1.0)
        return c.lambda_sdf + (c.lambda_sdf_final - c.lambda_sdf) * f

    def weights(self, step):
        c = self.config
        return {"ssim": c.lambda_ssim, "mask": c.lambda_mask, "sdf": self.lambda_sdf(step),
                "smooth": c.lambda_smooth, "light": c.lambda_light}

    def stage_at(self, step):
        warm = int(round(self.config.iterations * self.config.warmup_fraction))
        return WARMUP if step < warm else MONTECARLO

    def materials(self, state: FitState):
        raw = self.Q @ state.field.params
        out = logistic(raw)
        return out, logistic_grad(raw)

    # -- sampling context ------------------------------------------------
    def context(self, state: FitState, step: int, previous: StepContext | None = None) -> StepContext:
        c = self.config
        stage = self.stage_at(step)
        ids = list(range(len(self.views)))
        if 0 < c.views_per_step < len(ids):
            keys = rng.uniform(c.rng_seed, np.arange(len(ids)), step, 0x7100)
            ids = sorted(np.argsort(keys, kind="stable")[:c.views_per_step].tolist())
        ctx = StepContext(stage, step, ids)
        if stage != MONTECARLO:
            return ctx
        warm = int(round(c.iterations * c.warmup_fraction))
        key = (step - warm) // c.mc_resample_every
        if previous is not None and previous.stage == MONTECARLO and previous.mc_key == key:
            ctx.mc = previous.mc
        ctx.mc_key = key
        if any(i not in ctx.mc for i in ids):
            mats, _ = self.materials(state)
            mc = dict(ctx.mc)
            for i in ids:
                if i not in mc:
                    mc[i] = self._draw(self.views[i], mats[:, 3], key)
            ctx.mc = mc
        return ctx

    def _draw(self, vd: ViewData, rho_all, key):
        c = self.config
        G = len(self.gs)
        b = draw_samples(vd.x, vd.n, vd.wo, rho_all[vd.vis], c.mc_samples_fit, seed=c.rng_seed,
                         point_ids=vd.vis + G * vd.index, bvh=self.bvh, occlusion_enabled=c.occlusion,
                         stream=1000 + key)
        T_rad = tap_matrix(b.wi.reshape(-1, 3), *self.light.shapes["radiance"])
        Y = sh_basis(b.wi, self.config.sh_degree)
        return McData(b, T_rad, Y)

    # -- loss and gradient ----------------------------------------------
    def evaluate(self, state: FitState, ctx: StepContext, with_grad=True):
        c = self.config
        w = self.weights(ctx.step)
        mats, dsig = self.materials(state)
        G = len(self.gs)
        g_out = np.zeros((G, CHANNELS))
        tab = self.light.tables(state.env_log)
        g_tab = self.light.zero_grads() if self.learn_env else None
        g_sh = np.zeros_like(state.sh)
        need_light = self.learn_env or self.learn_indirect
        rep = LossReport(weights=w)
        nviews = len(ctx.views)
        sh = state.sh if c.indirect else np.zeros_like(state.sh)
        for i in ctx.views:
            vd = self.views[i]
            a, r, m = mats[vd.vis, :3], mats[vd.vis, 3], mats[vd.vis, 4]
            if ctx.stage == WARMUP:
                color, Ld, Ls, back = _splitsum(vd, self.light, tab, a, r, m)
            else:
                color, Ld, Ls, back = _montecarlo(vd, ctx.mc[i], self.light, tab, sh, a, r, m, need_light)
            H, W = vd.view.height, vd.view.width
            img = (vd.M @ color).reshape(H, W, 3)
            v_l1, g_l1 = l1(img, vd.target, True)
            v_ss, g_ss = ssim(img, vd.target, True)
            rep.l1 += v_l1 / nviews
            rep.ssim_term += (1.0 - v_ss) / nviews
            rep.mask += mask_mse(vd.alpha, vd.mask) / nviews
            g_img = (g_l1 - w["ssim"] * g_ss) / nviews
            gLd = gLs = np.zeros_like(color)
            if w["light"] > 0:
                Ld_img = (vd.M @ Ld).reshape(H, W, 3)
                Ls_img = (vd.M @ Ls).reshape(H, W, 3)
                v_lr, g_lr = light_regularizer(Ld_img, Ls_img, vd.target, True)
                rep.light_reg += v_lr / nviews
                if with_grad:
                    gpix = vd.M.T @ (w["light"] * g_lr / nviews).reshape(-1, 3)
                    gLd = gLs = gpix
            if not with_grad:
                continue
            gc = vd.M.T @ g_img.reshape(-1, 3)
            g_a, g_r, g_m, gt, gs_ = back(gc, gLd, gLs)
            g_out[vd.vis, :3] += g_a
            g_out[vd.vis, 3] += g_r
            g_out[vd.vis, 4] += g_m
            if gt is not None and g_tab is not None:
                g_tab["radiance"] += gt["radiance"]
                g_tab["irradiance"] += gt["irradiance"]
                for k in range(len(g_tab["mips"])):
                    g_tab["mips"][k] += gt["mips"][k]
            if gs_ is not None:
                g_sh += gs_
        rep.entropy = self.entropy
        if w["smooth"] > 0:
            res = state.field.smoothness_loss(self.gs.positions, c.smooth_sigma, c.rng_seed, ctx.step, with_grad)
            if with_grad:
                rep.smoothness, g_smooth = res
            else:
                rep.smoothness = res
        if not with_grad:
            return rep, None
        grads = {"material": self.Q.T @ (g_out * dsig)}
        if w["smooth"] > 0:
            grads["material"] = grads["material"] + w["smooth"] * g_smooth
        if self.learn_env:
            grads["env"] = self.light.backprop(g_tab, state.env_log)
        if self.learn_indirect and ctx.stage == MONTECARLO:
            grads["sh"] = g_sh
        elif self.learn_indirect:
            grads["sh"] = np.zeros_like(state.sh)
        return rep, grads


# ---------------------------------------------------------------------------
# driver

@dataclass
class FitResult:
    state: FitState
    objective: Objective

    @property
    def losses(self):
        return np.array([h["total"] for h in self.state.history])


def fit(views, mesh: Mesh, config: RunConfig, env: EnvironmentLight | None = None,
        indirect: IndirectLight | None = None, grid: ScalarGrid | None = None, state: FitState | None = None,
        gaussians: GaussianSet | None = None, callback=None, checkpoint=None, checkpoint_every=0) -> FitResult:
    """Optimize the material field (and optionally lighting) against the view targets."""
    if len(views) < 2:
        raise ValueError("fit needs at least two views")
    if not config.learn_env and env is None:
        raise ValueError("a known environment is required when learn_env is off")
    gs = gaussians if gaussians is not None else adapt(mesh, "face", config.adapter_constants())
    obj = Objective(gs, mesh, views, config, env, indirect, grid)
    if state is None:
        state = obj.initial_state(indirect)
    run(obj, state, callback, checkpoint, checkpoint_every)
    return FitResult(state, obj)


def run(obj: Objective, state: FitState, callback=None, checkpoint=None, checkpoint_every=0):
    c = obj.config
    ctx = None
    while state.iteration < c.iterations:
        step = state.iteration
        ctx = obj.context(state, step, ctx)
        state.stage = ctx.stage
        rep, grads = obj.evaluate(state, ctx)
        total = rep.total
        finite = np.isfinite(total) and all(np.all(np.isfinite(g)) for g in grads.values())
        if not finite:
            snap = {"iteration": step, "stage": ctx.stage, "report": rep.as_dict(),
                    "nonfinite_grads": [k for k, g in grads.items() if not np.all(np.isfinite(g))]}
            raise FitDiverged(f"loss diverged at iteration {step}: {snap}", snap)
        params = state.parameters(obj.learn_env, obj.learn_indirect)
        adam_step(params, {k: g for k, g in grads.items() if k in params}, state, step + 1)
        entry = rep.as_dict()
        entry.pop("weights")
        entry.update(iteration=step, stage=ctx.stage)
        state.history.append(entry)
        state.iteration += 1
        if callback is not None:
            callback(state, rep)
        if checkpoint is not None and checkpoint_every and state.iteration % checkpoint_every == 0:
            state.save(checkpoint)
    return state


# ---------------------------------------------------------------------------
# gradient check

def gradient_check(obj: Objective, state: FitState, probes=64, eps=1e-4, step=None, seed=0, corrupt=False,
                   atol=1e-8):
    """Central differences of the total loss along single-parameter probes.

    Probes are drawn among parameters with a non-negligible analytic
    gradient when any exist. MC stage checks reuse one frozen sample bundle.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-5, 1e-2]")
    step = state.iteration if step is None else step
    ctx = obj.context(state, step)
    _, grads = obj.evaluate(state, ctx)
    names = sorted(k for k in grads if k in state.parameters(obj.learn_env, obj.learn_indirect))
    flat_g = np.concatenate([grads[n].ravel() for n in names])
    if corrupt:
        flat_g = -flat_g
    sizes = np.cumsum([0] + [grads[n].size for n in names])
    scale = np.max(np.abs(flat_g)) if flat_g.size else 0.0
    active = np.nonzero(np.abs(flat_g) > 1e-6 * scale)[0] if scale > 0 else np.arange(flat_g.size)
    gen = np.random.default_rng(seed)
    picks = gen.choice(active, size=min(probes, len(active)), replace=False)
    params = state.parameters(obj.learn_env, obj.learn_indirect)
    rows = []
    for j in np.sort(picks):
        b = int(np.searchsorted(sizes, j, side="right") - 1)
        arr = params[names[b]].reshape(-1)
        k = j - sizes[b]
        old = arr[k]
        arr[k] = old + eps
        lp = obj.evaluate(state, ctx, with_grad=False)[0].total
        arr[k] = old - eps
        lm = obj.evaluate(state, ctx, with_grad=False)[0].total
        arr[k] = old
        fd = (lp - lm) / (2 * eps)
        an = float(flat_g[j])
        big = max(abs(an), abs(fd))
        err = abs(an - fd) / big if big > atol else abs(an - fd)
        rows.append({"param": names[b], "index": int(k), "analytic": an, "fd": fd, "rel_error": err})
    errs = np.array([r["rel_error"] for r in rows]) if rows else np.zeros(1)
    med, mx = float(np.median(errs)), float(np.max(errs))
    return {"stage": ctx.stage, "probes": rows, "median": med, "max": mx, "eps": eps,
            "passed": bool(med < 1e-3 and mx < 1e-2)}


# ---------------------------------------------------------------------------
# rendering with fitted (or ground-truth) materials

def shade_points(x, n, wo, albedo, rho, metal, env: EnvironmentLight, indirect=None, bvh=None,
                 lighting="monte_carlo", spp=256, seed=0, point_ids=None, occlusion_enabled=True, chunk=4096):
    """RGB outgoing radiance at surface points, evaluated in chunks."""
    P = len(x)
    out = np.zeros((P, 3))
    if lighting == "split_sum":
        if env.prefiltered is None:
            precompute_splitsum(env)
        from .lighting import shade_splitsum

        return shade_splitsum(albedo, rho, metal, n, wo, env)
    if indirect is None:
        indirect = IndirectLight.constant(0.0)
    ids = np.arange(P) if point_ids is None else np.asarray(point_ids)
    step = max(1, chunk * 32 // max(spp, 1))
    for s in range(0, P, step):
        e = min(P, s + step)
        out[s:e] = estimate_radiance(x[s:e], n[s:e], wo[s:e], albedo[s:e], rho[s:e], metal[s:e], env, indirect,
                                     bvh, spp, seed, ids[s:e], occlusion_enabled)
    return out


def render_view(gs: GaussianSet, view: View, env: EnvironmentLight, indirect=None, bvh=None,
                lighting="monte_carlo", shading="forward", spp=256, seed=0, occlusion_enabled=True, blur=0.0,
                weights=None):
    """Render a Gaussian set carrying material attributes; returns (image, alpha)."""
    if gs.attributes is None:
        raise ValueError("Gaussian set carries no material attributes")
    sw = weights if weights is not None else splat_weights(gs, view, blur)
    at = gs.attributes
    if shading == "forward":
        vis = np.unique(sw.gaussian)
        x, n = gs.positions[vis], gs.normals[vis]
        wo = view.position[None] - x
        wo /= np.linalg.norm(wo, axis=1, keepdims=True)
        col = np.zeros((len(gs), 3))
        col[vis] = shade_points(x, n, wo, at["albedo"][vis], at["roughness"][vis], at["metalness"][vis], env,
                                indirect, bvh, lighting, spp, seed, vis, occlusion_enabled)
        return sw.apply(col), sw.alpha
    gb = gbuffer(gs, view, sw)
    a = gb.alpha[..., 0]
    px = np.nonzero(a.ravel() > 0)[0]
    x = gb.position.reshape(-1, 3)[px]
    n = gb.normal.reshape(-1, 3)[px]
    n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    wo = view.position[None] - x
    wo /= np.linalg.norm(wo, axis=1, keepdims=True)
    col = shade_points(x, n, wo, np.clip(gb.albedo.reshape(-1, 3)[px], 0, 1), gb.roughness.reshape(-1)[px],
                       gb.metalness.reshape(-1)[px], env, indirect, bvh, lighting, spp, seed, px,
                       occlusion_enabled)
    img = np.zeros((view.height * view.width, 3))
    img[px] = col * a.ravel()[px, None]
    return img.reshape(view.height, view.width, 3), gb.alpha


def fitted_gaussians(result_or_state, gs: GaussianSet, field_: MaterialField | None = None):
    f = field_ if field_ is not None else result_or_state.field
    out = f.query(gs.positions)
    return gs.with_attributes(out[:, :3], out[:, 3], out[:, 4])


def render_modes(state: FitState, obj: Objective, view: View, relight_env: EnvironmentLight | None = None,
                 lighting=None, shading=None, spp=None, seed=0):
    """Novel view, attribute maps, and (optionally) a relit render with fitted materials."""
    c = obj.config
    lighting = lighting or c.lighting_mode
    shading = shading or c.shading_mode
    spp = spp or c.mc_samples_render
    gs = fitted_gaussians(state, obj.gs)
    env = state.environment(obj.env)
    sw = splat_weights(gs, view, c.blur)
    gb = gbuffer(gs, view, sw)
    bvh = obj.bvh if obj.bvh is not None else build_bvh(obj.mesh)
    ind = state.indirect() if c.indirect else IndirectLight.constant(0.0, c.sh_degree)
    nvs, alpha = render_view(gs, view, env, ind, bvh, lighting, shading, spp, seed, c.occlusion, weights=sw)
    out = {"nvs": nvs, "alpha": alpha, "albedo": gb.albedo, "roughness": gb.roughness,
           "metalness": gb.metalness, "normal": gb.normal}
    if relight_env is not None:
        out["relit"], _ = render_view(gs, view, relight_env, ind, bvh, lighting, shading, spp, seed, c.occlusion,
                                      weights=sw)
    return out
