"""Two-phase semi-supervised training for rotation regression.

Phase1 fits the student on labeled data with the Fisher NLL and clones the
best validation checkpoint into the teacher. Phase2 mixes that supervised
loss with a filtered teacher-to-student cross entropy on unlabeled data; the
teacher follows the student by EMA and the entropy threshold is refreshed
from a percentile of teacher entropies at the start of each of K stages.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from rotssl import augment, fisher, net, so3
from rotssl.config import ExperimentConfig, FilterPolicy

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "stage", "tau", "keep_rate", "sup_loss", "unsup_loss",
               "val_geodesic_deg", "val_mae_deg", "val_frobenius")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss. ``last_good`` holds the last finite state."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainState:
    student: net.NetParams
    teacher: net.NetParams
    ema_decay: float = 0.999
    stage_k: int = 0
    tau: float = float("nan")
    iter: int = 0
    opt: net.OptimState | None = None
    tau_history: list = field(default_factory=list)


def ema_update(state):
    """Teacher <- decay * teacher + (1 - decay) * student, entrywise."""
    d = state.ema_decay
    t, s = state.teacher, state.student
    teacher = net.NetParams([d * tw + (1 - d) * sw for tw, sw in zip(t.weights, s.weights)],
                            [d * tb + (1 - d) * sb for tb, sb in zip(t.biases, s.biases)])
    return replace(state, teacher=teacher)


def predict(params, images, chunk=1024):
    """Fisher parameters for a stack of images, computed in chunks."""
    images = np.asarray(images, dtype=float)
    if len(images) == 0:
        return np.zeros((0, 3, 3))
    return np.concatenate([net.forward(params, images[i:i + chunk])
                           for i in range(0, len(images), chunk)])


def entropy_sweep(teacher, images):
    """Teacher prediction entropy for every image (plain, un-augmented views)."""
    if len(images) == 0:
        raise ValueError("entropy sweep needs at least one sample")
    return fisher.stats(predict(teacher, images)).entropy


def update_threshold(entropies, delta):
    """``delta``-percentile of the entropies, linear interpolation."""
    entropies = np.asarray(entropies, dtype=float)
    if entropies.size == 0:
        raise ValueError("cannot take a percentile of an empty entropy list")
    if not 0.0 < delta <= 1.0:
        raise ValueError("delta must lie in (0, 1]")
    return float(np.percentile(entropies, 100.0 * delta))


def geodesic_filter(r1, r2, thresh):
    """Keep where the two rotations are within ``thresh`` degrees."""
    return so3.geodesic_angle(r1, r2) <= thresh


def total_loss(sup, unsup, lam=1.0):
    return sup + lam * unsup


def sup_loss_batch(student, images, labels, cfg, rng, mode="weak"):
    """Mean NLL over a labeled batch after augmenting images and labels together.

    Returns ``(loss, grads)``; gradients are for the mean.
    """
    images = np.asarray(images, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if mode != "none":
        views, targets = [], []
        for i, (img, lab) in enumerate(zip(images, labels)):
            if mode == "weak":
                out, rec = augment.weak_augment(img, cfg, rng)
            else:
                donors = [images[j] for j in range(len(images)) if j != i]
                out, rec = augment.strong_augment(img, donors, cfg, rng)
            views.append(out.pixels)
            targets.append(augment.transform_label(lab, rec))
        images, labels = np.array(views), np.array(targets)
    n = len(images)

    def fn(a):
        loss, grad = fisher.nll_loss(a, labels)
        return loss, grad / n

    losses, _, grads = net.forward_backward(student, images, fn)
    return float(np.mean(losses)), grads


@dataclass
class UnsupResult:
    loss: float
    grads: net.NetParams
    keep_rate: float
    kept: np.ndarray
    teacher_entropy: np.ndarray


def aligned_teacher_expectation(teacher_a, theta):
    """``E[R]`` of the teacher distribution after left-multiplying ``A`` by ``M_theta``.

    ``M_theta A`` has singular vectors ``M_theta U`` and the same singular
    values, so its expected rotation is ``M_theta E[R]``.
    """
    m = so3.inplane_rotation(np.asarray(theta, dtype=float))
    return m @ fisher.expected_rotation(teacher_a)


def unsup_loss_batch(state, images, policy, tau, cfg, rng, target="distribution"):
    """Filtered consistency loss on one unlabeled batch.

    For each image: teacher on a weak view, student on a strong view (which
    may be rotated by ``theta``), gate by teacher entropy or by teacher /
    student mode agreement, align the teacher by ``M_theta``, cross entropy.
    The loss is the mean over kept samples; zero with zero gradients if none
    survive.

    ``target="distribution"`` matches the teacher's full distribution;
    ``"mode"`` uses its mode as a hard pseudo-label (the loss is then an NLL).
    """
    images = np.asarray(images, dtype=float)
    n = len(images)
    weak, strong, thetas, mirror = [], [], [], []
    for i in range(n):
        donors = [images[j] for j in range(n) if j != i]
        w_img, w_rec, s_img, s_rec = augment.augment_pair(images[i], donors, cfg, rng)
        weak.append(w_img.pixels)
        strong.append(s_img.pixels)
        thetas.append(s_rec.theta)
        mirror.append(w_rec.flipped != s_rec.flipped)
    weak, strong, thetas = np.array(weak), np.array(strong), np.array(thetas)
    mirror = np.array(mirror, dtype=bool)
    a_t = net.forward(state.teacher, weak)
    st_t = fisher.stats(a_t)
    if policy.kind == "dynamic_entropy" and policy.delta >= 1.0:
        # tau is the sweep maximum; the EMA teacher may drift past it mid-stage.
        keep = np.ones(n, dtype=bool)
    elif policy.kind in ("dynamic_entropy", "fixed_entropy"):
        keep = st_t.entropy <= tau
    elif policy.kind == "geodesic":
        a_sw = net.forward(state.student, weak)
        keep = geodesic_filter(st_t.mode, fisher.mode(a_sw), policy.geo_thresh)
    else:
        keep = np.ones(n, dtype=bool)
    n_keep = int(keep.sum())
    if n_keep == 0:
        return UnsupResult(0.0, state.student.zeros_like(), 0.0, keep, st_t.entropy)
    expected = (st_t.mode if target == "mode" else st_t.expected).copy()
    # Views flipped differently: mirror the teacher (D E D is linear in E).
    expected[mirror] = augment.flip_label(expected[mirror])
    target = so3.inplane_rotation(thetas[keep]) @ expected[keep]

    def fn(a):
        loss, grad = fisher.cross_entropy(None, a, teacher_expected=target)
        return loss, grad / n_keep

    losses, _, grads = net.forward_backward(state.student, strong[keep], fn)
    return UnsupResult(float(np.mean(losses)), grads, n_keep / n, keep, st_t.entropy)


def evaluate_params(params, dataset):
    """Pose error metrics of the mode prediction on a labeled dataset."""
    a = predict(params, dataset.images)
    return pose_metrics(fisher.mode(a), dataset.labels)


def pose_metrics(pred, labels):
    geo = so3.geodesic_angle(pred, labels)
    ep, el = so3.matrix_to_euler(pred), so3.matrix_to_euler(labels)
    mae = [float(np.mean(np.abs(so3.wrap_degrees(getattr(ep, k) - getattr(el, k)))))
           for k in ("pitch", "yaw", "roll")]
    return {
        "count": int(len(geo)),
        "mean_geodesic_deg": float(np.mean(geo)),
        "median_geodesic_deg": float(np.median(geo)),
        "mae_pitch_deg": mae[0],
        "mae_yaw_deg": mae[1],
        "mae_roll_deg": mae[2],
        "mae_mean_deg": float(np.mean(mae)),
        "mean_frobenius": float(np.mean(so3.frobenius_metric(pred, labels))),
    }


class CsvLog:
    """Append-only training log with the fixed column set."""

    def __init__(self, path=None):
        self.path = path
        self.rows = []
        if path is not None:
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)

    def write(self, **row):
        values = [row.get(c, "") for c in LOG_COLUMNS]
        values = [f"{v:.10g}" if isinstance(v, float) else v for v in values]
        self.rows.append(dict(zip(LOG_COLUMNS, values)))
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(values)


def _phase_rngs(seed, phase):
    return np.random.default_rng(np.random.SeedSequence([seed, phase]))


def _check_finite(value, state, what):
    if not np.isfinite(value):
        raise DivergenceError(f"{what} became non-finite", last_good=state)


def run_phase1(cfg: ExperimentConfig, data, init=None, iters=None, log_to=None, stream=1):
    """Supervised training; the best validation student becomes the teacher.

    ``data`` is the split dict from ``synth.gen_dataset``. ``iters`` overrides
    ``cfg.train.phase1_iters``. ``stream`` picks the random stream; passing 2
    replays the labeled draws of Phase2, which is how the ``lam = 0``
    degeneration is checked.
    """
    tc = cfg.train
    rng = _phase_rngs(tc.seed, stream)
    params = init.copy() if init is not None else net.init_params(_phase_rngs(tc.seed, 0))
    opt = net.OptimState.for_params(params, lr=tc.lr_phase1)
    lab = data["labeled"]
    val = data.get("val")
    if len(lab) == 0:
        raise ValueError("phase1 needs a non-empty labeled split")
    logger = log_to if log_to is not None else CsvLog()
    n_iters = tc.phase1_iters if iters is None else iters

    def score(p):
        return evaluate_params(p, val) if val is not None and len(val) else None

    best, best_err = params.copy(), np.inf
    first = score(params)
    if first is not None:
        best_err = first["mean_geodesic_deg"]
    acc = []
    for it in range(1, n_iters + 1):
        idx = rng.integers(0, len(lab), size=tc.batch_labeled)
        last_good = TrainState(best, best.copy(), tc.ema_decay)
        try:
            loss, grads = sup_loss_batch(params, lab.images[idx], lab.labels[idx], cfg.aug, rng,
                                         tc.labeled_aug)
        except FloatingPointError as exc:
            raise DivergenceError(f"phase1 iteration {it}: {exc}", last_good=last_good) from exc
        _check_finite(loss, last_good, "phase1 loss")
        params, opt = net.adam_update(params, grads, opt)
        acc.append(loss)
        if it % tc.eval_every == 0 or it == n_iters:
            m = score(params)
            row = {"iter": it, "stage": 0, "sup_loss": float(np.mean(acc))}
            if m is not None:
                row.update(val_geodesic_deg=m["mean_geodesic_deg"], val_mae_deg=m["mae_mean_deg"],
                           val_frobenius=m["mean_frobenius"])
                if m["mean_geodesic_deg"] < best_err:
                    best, best_err = params.copy(), m["mean_geodesic_deg"]
            else:
                best = params.copy()
            logger.write(**row)
            acc = []
    if val is None or not len(val):
        best = params.copy()
    return TrainState(student=best, teacher=best.copy(), ema_decay=tc.ema_decay)


def stage_boundaries(total, k):
    """Iteration indices (0-based) at which stages 1..K begin."""
    return [(j * total) // k for j in range(k)]


def run_phase2(cfg: ExperimentConfig, data, state, log_to=None):
    """Semi-supervised phase. Returns the final ``TrainState`` (student kept)."""
    tc, pol = cfg.train, cfg.filter
    # Labeled and unlabeled draws use separate streams so the supervised path
    # consumes randomness exactly as Phase1 does.
    rng, rng_u = _phase_rngs(tc.seed, 2), _phase_rngs(tc.seed, 3)
    lab, unl, val = data["labeled"], data["unlabeled"], data.get("val")
    if len(lab) == 0 or len(unl) == 0:
        raise ValueError("phase2 needs labeled and unlabeled samples")
    logger = log_to if log_to is not None else CsvLog()
    state = replace(state, teacher=state.teacher.copy(), student=state.student.copy(),
                    opt=net.OptimState.for_params(state.student, lr=tc.lr_phase2),
                    ema_decay=tc.ema_decay, tau_history=[])
    T = tc.phase2_iters
    starts = stage_boundaries(T, pol.K)
    acc_sup, acc_unsup, acc_keep = [], [], []
    for it in range(T):
        if it in starts:
            k = starts.index(it) + 1
            if pol.kind == "dynamic_entropy" or (pol.kind == "fixed_entropy" and k == 1):
                ent = entropy_sweep(state.teacher, unl.images)
                tau = update_threshold(ent, pol.delta)
            else:
                tau = state.tau
            if pol.kind == "fixed_entropy" and pol.fixed_tau is not None:
                tau = float(pol.fixed_tau)
            state = replace(state, stage_k=k, tau=tau, tau_history=state.tau_history + [tau])
            log.info("phase2 stage %d/%d: tau=%.4f", k, pol.K, tau)
        li = rng.integers(0, len(lab), size=tc.batch_labeled)
        ui = rng_u.integers(0, len(unl), size=tc.batch_unlabeled)
        try:
            sup, g_sup = sup_loss_batch(state.student, lab.images[li], lab.labels[li], cfg.aug, rng,
                                        tc.labeled_aug)
            if pol.lam > 0:
                un = unsup_loss_batch(state, unl.images[ui], pol, state.tau, cfg.aug, rng_u,
                                      tc.unsup_target)
                grads = net.add_grads(g_sup, un.grads, pol.lam)
                unsup, keep_rate = un.loss, un.keep_rate
            else:
                grads, unsup, keep_rate = g_sup, 0.0, 0.0
        except FloatingPointError as exc:
            raise DivergenceError(f"phase2 iteration {it + 1}: {exc}", last_good=state) from exc
        _check_finite(total_loss(sup, unsup, pol.lam), state, "phase2 loss")
        student, opt = net.adam_update(state.student, grads, state.opt)
        state = ema_update(replace(state, student=student, opt=opt, iter=it + 1))
        acc_sup.append(sup)
        acc_unsup.append(unsup)
        acc_keep.append(keep_rate)
        if (it + 1) % tc.eval_every == 0 or it + 1 == T:
            row = {"iter": it + 1, "stage": state.stage_k, "tau": state.tau,
                   "keep_rate": float(np.mean(acc_keep)), "sup_loss": float(np.mean(acc_sup)),
                   "unsup_loss": float(np.mean(acc_unsup))}
            if val is not None and len(val):
                m = evaluate_params(state.student, val)
                row.update(val_geodesic_deg=m["mean_geodesic_deg"], val_mae_deg=m["mae_mean_deg"],
                           val_frobenius=m["mean_frobenius"])
            logger.write(**row)
            acc_sup, acc_unsup, acc_keep = [], [], []
    return state


def filter_stats(params, dataset, delta, bins=20):
    """Entropy histogram, percentile threshold and OOD-vs-kept confusion counts."""
    ent = entropy_sweep(params, dataset.images)
    tau = update_threshold(ent, delta)
    keep = ent <= tau
    ood = dataset.is_ood.astype(bool)
    counts, edges = np.histogram(ent, bins=bins)
    return {
        "entropies": ent,
        "tau": tau,
        "kept_ids": dataset.ids[keep],
        "rejected_ids": dataset.ids[~keep],
        "histogram_counts": counts,
        "histogram_edges": edges,
        "kept_ood": int(np.sum(keep & ood)),
        "kept_id": int(np.sum(keep & ~ood)),
        "rejected_ood": int(np.sum(~keep & ood)),
        "rejected_id": int(np.sum(~keep & ~ood)),
    }


def policy_with(policy: FilterPolicy, **kw):
    return replace(policy, **kw)
