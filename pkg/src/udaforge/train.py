"""The adaptation training loop and its two supervised baselines.

One iteration in uda mode: forward the extractor on a half-labeled batch,
run the critic's inner loop on detached features (ascending the estimated
distance minus the gradient penalty), then update extractor + predictor on
cross-entropy + center loss + the gamma-weighted distance term. The critic
never moves the extractor and the predictor step never moves the critic.

Target labels are never read on the uda path; stripping them from the
dataset leaves the run bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import graph as gr
from .dataset import MODE_KSPACE, MODE_SPATIAL, UNLABELED, Dataset
from .metrics import PredictionSet
from .nets import NetSpec, build_critic, build_extractor, build_predictor
from .optim import adam_step, lr_schedule

MODES = ("uda", "source_only", "target_supervised")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "uda"
    input_mode: str = MODE_SPATIAL
    epochs: int = 30
    batch_size: int = 64  # labeled half + unlabeled half
    base_lr: float = 0.01
    lr_step_size: int = 20
    lr_decay: float = 0.5
    lam: float = 10.0
    n_critic: int = 5
    critic_lr: float | None = None  # None: follow the scheduled rate
    gamma_ramp_on: bool = True
    critic_on: bool = True
    attention_on: bool = True
    center_loss_on: bool = True
    center_weight: float = 1.0
    center_alpha: float = 0.5
    center_space: str = "feature"  # feature | penultimate
    feature_dim: int = 64
    channels: tuple = (8, 16, 32)
    n_classes: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.input_mode not in (MODE_SPATIAL, MODE_KSPACE):
            raise ValueError(f"unknown input mode {self.input_mode!r}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be an even integer >= 2")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.center_space not in ("feature", "penultimate"):
            raise ValueError(f"unknown center space {self.center_space!r}")

    def to_dict(self):
        d = dict(self.__dict__)
        d["channels"] = list(self.channels)
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return TrainConfig(**d)


@dataclass
class CenterBank:
    """Running per-class centers of the representation space."""

    c: np.ndarray
    counts: np.ndarray

    @staticmethod
    def empty(n_classes, dim):
        return CenterBank(
            np.zeros((n_classes, dim)), np.zeros(n_classes, dtype=np.int64)
        )

    def copy(self):
        return CenterBank(self.c.copy(), self.counts.copy())


def update_centers(z_batch, labels, bank, alpha):
    """EMA pull of each observed class center towards its batch mean.

    alpha=1 makes centers the literal batch class means; a class's first
    observation initialises its center to the batch mean outright.
    """
    z_batch = np.asarray(z_batch, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= bank.c.shape[0]:
        raise ValueError("label out of range")
    for cls in np.unique(labels):
        zc = z_batch[labels == cls]
        m = zc.mean(axis=0)
        if bank.counts[cls] == 0:
            bank.c[cls] = m
        else:
            bank.c[cls] = (1.0 - alpha) * bank.c[cls] + alpha * m
        bank.counts[cls] += len(zc)
    return bank


def gamma(iteration, total_iterations, ramp_on=True):
    """The ramp coefficient on the distance term; 1.0 when the ramp is off."""
    if total_iterations < 1:
        raise ValueError("total_iterations must be >= 1")
    if not 0 <= iteration <= total_iterations:
        raise ValueError("iteration must lie in [0, total_iterations]")
    if not ramp_on:
        return 1.0
    return iteration / total_iterations


@dataclass
class Batch:
    """One assembled mini-batch; unlabeled-half labels are always UNLABELED."""

    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray | None = None

    @property
    def y_unlabeled(self):
        if self.x_unlabeled is None:
            return None
        return np.full(len(self.x_unlabeled), UNLABELED, dtype=np.uint8)


class _EpochStream:
    """Yields index chunks; reshuffles whenever its pool is exhausted."""

    def __init__(self, n, rng):
        self.n = n
        self.rng = rng
        self.pos = 0
        self.perm = None

    def reset(self):
        self.perm = None
        self.pos = 0

    def take(self, count):
        out = []
        while count:
            if self.perm is None or self.pos >= self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            grab = min(count, self.n - self.pos)
            out.append(self.perm[self.pos : self.pos + grab])
            self.pos += grab
            count -= grab
        return np.concatenate(out)


def assemble_minibatch(labeled, unlabeled, half, lab_stream, unlab_stream):
    idx_l = lab_stream.take(half)
    batch = Batch(
        x_labeled=labeled.net_input(idx_l),
        y_labeled=labeled.labels[idx_l].astype(np.int64),
    )
    if unlabeled is not None:
        idx_u = unlab_stream.take(half)
        batch.x_unlabeled = unlabeled.net_input(idx_u)
    return batch


def minibatches(labeled, unlabeled, batch_size, rng_labeled, rng_unlabeled):
    """One epoch of paired mini-batches (the spec-level assembly op)."""
    half = batch_size // 2
    lab = _EpochStream(len(labeled), rng_labeled)
    unlab = _EpochStream(len(unlabeled), rng_unlabeled) if unlabeled is not None else None
    for _ in range(len(labeled) // half):
        yield assemble_minibatch(labeled, unlabeled, half, lab, unlab)


def critic_inner_loop(z_s, z_t, critic_graph, critic_params, config, rng, lr):
    """Several ascent steps on (estimated distance - lam * gradient penalty).

    Features arrive detached; only the critic parameters move. The penalty
    is evaluated at random interpolates between shuffled source/target
    pairs. Returns (distance estimate, raw mean difference, objective).

    The estimate divides the raw mean difference by the critic's measured
    mean gradient norm on the interpolates (never below 1): the trained
    critic settles at slope 1 + W/(2*lam) rather than 1, and the division
    projects it back onto the 1-Lipschitz dual feasible set, removing that
    systematic inflation.
    """
    z_s = np.asarray(z_s, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    ns, nt = len(z_s), len(z_t)
    n_pairs = max(ns, nt)
    est_val = 0.0
    l_dist_val = 0.0
    obj_val = 0.0
    for _ in range(config.n_critic):
        ps = rng.permutation(ns)
        pt = rng.permutation(nt)
        ps = ps[np.arange(n_pairs) % ns]
        pt = pt[np.arange(n_pairs) % nt]
        eps = rng.random((n_pairs, 1))
        z_star = eps * z_s[ps] + (1.0 - eps) * z_t[pt]
        z_all = ad.leaf(np.concatenate([z_s, z_t, z_star], axis=0))
        out, pvars = gr.forward_vars(
            critic_graph, critic_params, {"z": z_all}, trainable=True
        )
        score = ad.reshape(out[critic_graph.output], (ns + nt + n_pairs,))
        l_dist = ad.sub(
            ad.mean(ad.narrow(score, 0, 0, ns)),
            ad.mean(ad.narrow(score, 0, ns, nt)),
        )
        (gz,) = ad.grad(ad.vsum(score), [z_all])
        gz_star = ad.narrow(gz, 0, ns + nt, n_pairs)
        norms = ad.sqrt(ad.vsum(ad.mul(gz_star, gz_star), axis=1) + gr.EPS_NORM)
        l_gp = ad.mean((norms - 1.0) ** 2.0)
        # ascend l_dist - lam*l_gp == descend its negation
        objective = ad.add(ad.neg(l_dist), ad.mul(l_gp, config.lam))
        names = list(pvars)
        gs = ad.grad(objective, [pvars[k] for k in names])
        adam_step(critic_params, {k: g.data for k, g in zip(names, gs)}, lr)
        l_dist_val = l_dist.item()
        est_val = l_dist_val / max(1.0, float(norms.data.mean()))
        obj_val = l_dist_val - config.lam * l_gp.item()
    return est_val, l_dist_val, obj_val


@dataclass
class StepRecord:
    iteration: int
    epoch: int
    gamma: float
    lr: float
    ce: float
    center: float
    stat_dist: float
    critic_loss: float
    wasserstein: float
    wasserstein_raw: float
    total: float
    labeled_acc: float


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    ce: float
    wasserstein: float
    labeled_acc: float


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def add_step(self, rec):
        if self.steps and rec.iteration != self.steps[-1].iteration + 1:
            raise ValueError("iteration indices must be consecutive")
        self.steps.append(rec)

    def wasserstein_series(self):
        return np.array([r.wasserstein for r in self.steps])


STEP_COLUMNS = (
    "iteration",
    "epoch",
    "gamma",
    "lr",
    "ce",
    "center",
    "stat_dist",
    "critic_loss",
    "wasserstein",
    "wasserstein_raw",
    "total",
    "labeled_acc",
)


@dataclass
class TrainState:
    """Everything needed to continue a run from an epoch boundary."""

    config: TrainConfig
    specs: dict
    params: dict
    centers: CenterBank
    epoch: int
    iteration: int
    total_steps: int
    rng_labeled: np.random.Generator
    rng_unlabeled: np.random.Generator
    rng_critic: np.random.Generator


@dataclass
class TrainResult:
    config: TrainConfig
    specs: dict
    params: dict
    centers: CenterBank
    log: TrainLog
    total_steps: int
    state: TrainState


def _seed_ints(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def build_networks(config, hw):
    """The three nets for a config; seeds derive from config.seed."""
    s_ext, s_pred, s_crit, *_ = _seed_ints(config.seed, 6)
    channels = 1 if config.input_mode == MODE_SPATIAL else 2
    scale = 1.0 if config.input_mode == MODE_SPATIAL else 1.0 / np.sqrt(hw[0] * hw[1])
    ext_spec = NetSpec(
        "extractor",
        input_shape=(channels, hw[0], hw[1]),
        feature_dim=config.feature_dim,
        channels=config.channels,
        input_scale=scale,
    )
    pred_variant = (
        "predictor_spatial" if config.input_mode == MODE_SPATIAL else "predictor_kspace"
    )
    pred_spec = NetSpec(pred_variant, feature_dim=config.feature_dim,
                        n_classes=config.n_classes)
    crit_spec = NetSpec("critic", feature_dim=config.feature_dim,
                        attention=config.attention_on)
    specs = {"extractor": ext_spec, "predictor": pred_spec, "critic": crit_spec}
    ext_g, ext_p = build_extractor(ext_spec, s_ext)
    pred_g, pred_p = build_predictor(pred_spec, s_pred)
    crit_g, crit_p = build_critic(crit_spec, s_crit)
    graphs = {"extractor": ext_g, "predictor": pred_g, "critic": crit_g}
    params = {"extractor": ext_p, "predictor": pred_p, "critic": crit_p}
    return specs, graphs, params


def _pick_sets(config, source, target):
    if config.mode == "uda":
        if source is None or target is None or not len(source) or not len(target):
            raise ValueError("uda mode needs non-empty source and target sets")
        if np.any(source.labels == UNLABELED):
            raise ValueError("uda mode needs a fully labeled source set")
        return source, target
    if config.mode == "source_only":
        if source is None or not len(source):
            raise ValueError("source_only mode needs a non-empty source set")
        if np.any(source.labels == UNLABELED):
            raise ValueError("source_only mode needs a fully labeled source set")
        return source, None
    if target is None or not len(target):
        raise ValueError("target_supervised mode needs a non-empty target set")
    if np.any(target.labels == UNLABELED):
        raise ValueError("target_supervised mode rejects unlabeled target samples")
    return target, None


def _fresh_state(config, labeled, hw):
    specs, graphs, params = build_networks(config, hw)
    seeds = _seed_ints(config.seed, 6)
    half = config.batch_size // 2
    steps_per_epoch = len(labeled) // half
    if steps_per_epoch == 0:
        raise ValueError(
            f"labeled set of {len(labeled)} is smaller than half batch {half}"
        )
    dim = config.feature_dim if config.center_space == "feature" else None
    if dim is None:
        # penultimate width comes from the predictor spec
        dim = specs["predictor"].hidden_dims()[-1]
    state = TrainState(
        config=config,
        specs=specs,
        params=params,
        centers=CenterBank.empty(config.n_classes, dim),
        epoch=0,
        iteration=0,
        total_steps=config.epochs * steps_per_epoch,
        rng_labeled=np.random.default_rng(seeds[3]),
        rng_unlabeled=np.random.default_rng(seeds[4]),
        rng_critic=np.random.default_rng(seeds[5]),
    )
    return state, graphs


def graphs_from_specs(specs, config):
    """Rebuild the (structure-only) graphs matching a spec set."""
    s_ext, s_pred, s_crit, *_ = _seed_ints(config.seed, 6)
    return {
        "extractor": build_extractor(specs["extractor"], s_ext)[0],
        "predictor": build_predictor(specs["predictor"], s_pred)[0],
        "critic": build_critic(specs["critic"], s_crit)[0],
    }


def train(config, source, target=None, resume=None, epoch_callback=None):
    """Run one training mode end to end and return params plus the log.

    `resume` accepts a TrainState captured at an epoch boundary; the
    continued run reproduces the unbroken run's remaining steps exactly.
    `epoch_callback(state)` fires after every epoch.
    """
    labeled, unlabeled = _pick_sets(config, source, target)
    hw = labeled.hw
    if resume is None:
        state, graphs = _fresh_state(config, labeled, hw)
    else:
        if resume.config != config:
            raise ValueError("resume state was produced by a different config")
        state = resume
        graphs = graphs_from_specs(state.specs, config)

    half = config.batch_size // 2
    steps_per_epoch = len(labeled) // half
    log = TrainLog()
    use_critic = config.mode == "uda" and config.critic_on
    gamma_total = max(1, state.total_steps - 1)

    for epoch in range(state.epoch, config.epochs):
        lr = lr_schedule(config.base_lr, epoch, config.lr_step_size, config.lr_decay)
        lab = _EpochStream(len(labeled), state.rng_labeled)
        unlab = (
            _EpochStream(len(unlabeled), state.rng_unlabeled)
            if config.mode == "uda"
            else None
        )
        ep_ce, ep_acc, ep_w = [], [], []
        for _ in range(steps_per_epoch):
            batch = assemble_minibatch(
                labeled, unlabeled if config.mode == "uda" else None, half, lab, unlab
            )
            g_t = gamma(
                min(state.iteration, gamma_total), gamma_total, config.gamma_ramp_on
            )
            rec = _train_step(
                state, log, batch, graphs, lr, g_t, use_critic, epoch
            )
            ep_ce.append(rec.ce)
            ep_acc.append(rec.labeled_acc)
            ep_w.append(rec.wasserstein)
        log.epochs.append(
            EpochRecord(
                epoch=epoch,
                lr=lr,
                ce=float(np.mean(ep_ce)),
                wasserstein=float(np.mean(ep_w)),
                labeled_acc=float(np.mean(ep_acc)),
            )
        )
        state.epoch = epoch + 1
        if epoch_callback is not None:
            epoch_callback(state)

    return TrainResult(
        config=config,
        specs=state.specs,
        params=state.params,
        centers=state.centers,
        log=log,
        total_steps=state.total_steps,
        state=state,
    )


def _train_step(state, log, batch, graphs, lr, g_t, use_critic, epoch):
    config = state.config
    ext_g, pred_g, crit_g = graphs["extractor"], graphs["predictor"], graphs["critic"]
    ext_p, pred_p, crit_p = (
        state.params["extractor"],
        state.params["predictor"],
        state.params["critic"],
    )
    n_l = len(batch.x_labeled)
    has_unlabeled = batch.x_unlabeled is not None

    xb = (
        np.concatenate([batch.x_labeled, batch.x_unlabeled])
        if has_unlabeled
        else batch.x_labeled
    )
    eout, epv = gr.forward_vars(ext_g, ext_p, {"x": xb}, trainable=True)
    z = eout["feat"]
    z_l = ad.narrow(z, 0, 0, n_l) if has_unlabeled else z
    z_u = ad.narrow(z, 0, n_l, len(batch.x_unlabeled)) if has_unlabeled else None

    w_est, w_raw, crit_obj = 0.0, 0.0, 0.0
    if use_critic:
        # inner loop on detached features: only e moves here
        c_lr = config.critic_lr if config.critic_lr is not None else lr
        w_est, w_raw, crit_obj = critic_inner_loop(
            z_l.data, z_u.data, crit_g, crit_p, config, state.rng_critic, c_lr
        )

    pout, ppv = gr.forward_vars(pred_g, pred_p, {"z": z_l}, trainable=True)
    logits = pout["logits"]
    onehot = np.zeros((n_l, config.n_classes))
    onehot[np.arange(n_l), batch.y_labeled] = 1.0
    ce = ad.neg(ad.mean(ad.vsum(ad.mul(ad.log_softmax(logits), ad.const(onehot)), axis=1)))
    total = ce

    center_val = 0.0
    if config.center_loss_on:
        cvec = z_l if config.center_space == "feature" else pout["penultimate"]
        update_centers(cvec.data, batch.y_labeled, state.centers, config.center_alpha)
        cmat = ad.const(state.centers.c[batch.y_labeled])
        diff = ad.sub(cvec, cmat)
        closs = ad.mul(ad.mean(ad.vsum(ad.mul(diff, diff), axis=1)), 0.5)
        center_val = closs.item()
        total = ad.add(total, ad.mul(closs, config.center_weight))

    stat_val = 0.0
    if use_critic:
        # critic scores the live features, but its own parameters stay put
        cout, _ = gr.forward_vars(crit_g, crit_p, {"z": z}, trainable=False)
        s = ad.reshape(cout[crit_g.output], (z.shape[0],))
        stat = ad.sub(
            ad.mean(ad.narrow(s, 0, 0, n_l)),
            ad.mean(ad.narrow(s, 0, n_l, z.shape[0] - n_l)),
        )
        stat_val = stat.item()
        total = ad.add(total, ad.mul(stat, g_t))

    enames, pnames = list(epv), list(ppv)
    gs = ad.grad(total, [epv[k] for k in enames] + [ppv[k] for k in pnames])
    egrads = {k: g.data for k, g in zip(enames, gs[: len(enames)])}
    pgrads = {k: g.data for k, g in zip(pnames, gs[len(enames):])}
    adam_step(ext_p, egrads, lr)
    adam_step(pred_p, pgrads, lr)

    acc = float(np.mean(np.argmax(logits.data, axis=1) == batch.y_labeled))
    rec = StepRecord(
        iteration=state.iteration,
        epoch=epoch,
        gamma=g_t,
        lr=lr,
        ce=ce.item(),
        center=center_val,
        stat_dist=stat_val,
        critic_loss=crit_obj,
        wasserstein=w_est,
        wasserstein_raw=w_raw,
        total=total.item(),
        labeled_acc=acc,
    )
    log.add_step(rec)
    state.iteration += 1
    return rec


def predict_dataset(graphs, params, dataset, batch=256):
    """Frozen-model predictions over a whole dataset."""
    ext_g, pred_g = graphs["extractor"], graphs["predictor"]
    ext_p, pred_p = params["extractor"], params["predictor"]
    probs = np.empty((len(dataset), pred_g.shapes["probs"][1]))
    feats = np.empty((len(dataset), ext_g.shapes["feat"][1]))
    for lo in range(0, len(dataset), batch):
        idx = np.arange(lo, min(lo + batch, len(dataset)))
        x = dataset.net_input(idx)
        z = gr.forward(ext_g, ext_p, {"x": x})["feat"]
        probs[idx] = gr.forward(pred_g, pred_p, {"z": z})["probs"]
        feats[idx] = z
    return (
        PredictionSet(
            y_true=dataset.labels.astype(np.int64),
            y_pred=probs.argmax(axis=1),
            probs=probs,
            patients=dataset.patients.copy(),
            domains=dataset.domains.copy(),
        ),
        feats,
    )
