"""Composite loss, LR schedule, noise injection and the two-phase training loop.

Training-loss convention: squared error summed over pixels and channels,
averaged over the batch ("loss_sse"). Evaluation metrics in
:mod:`multistego.metrics` use the per-element mean instead.
"""
import bisect
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import DEFAULT_MILESTONES
from .image_data import BatchIterator, StegoBatch
from .stego_net import NetworkSpec, decode_all, encode_forward, init_params

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class LossReport:
    total: float
    cover_term: float
    secret_terms: list = field(default_factory=list)

    @classmethod
    def from_terms(cls, cover_term, secret_terms):
        secret_terms = [float(t) for t in secret_terms]
        return cls(float(cover_term) + sum(secret_terms), float(cover_term), secret_terms)

    @property
    def k(self):
        return len(self.secret_terms)

    def is_finite(self):
        return all(math.isfinite(v) for v in [self.total, self.cover_term, *self.secret_terms])

    def as_row(self):
        return [self.total, self.cover_term, *self.secret_terms]


def mean_report(reports, weights=None):
    """Weighted mean of LossReports, term by term."""
    if weights is None:
        weights = [1] * len(reports)
    w = np.asarray(weights, dtype=np.float64) / float(sum(weights))
    cover = float(np.dot(w, [r.cover_term for r in reports]))
    secrets = np.asarray([r.secret_terms for r in reports], dtype=np.float64)
    return LossReport.from_terms(cover, list(w @ secrets))


def _tensor(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def loss_sse(a, b):
    """Sum of squared differences per image, averaged over the batch."""
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).pow(2).sum() / a.shape[0]


def reveal_loss(secret, decoded, lambda_s=1.0):
    return lambda_s * loss_sse(secret, decoded)


def loss_terms(cover, container, secrets, decoded, lambda_c=1.0, lambda_s=1.0):
    """Differentiable (cover_term, [secret_terms]) tensors."""
    if len(secrets) != len(decoded):
        raise ValueError(f"{len(secrets)} secrets but {len(decoded)} decoded images")
    cover_term = lambda_c * loss_sse(cover, container)
    return cover_term, [reveal_loss(s, d, lambda_s) for s, d in zip(secrets, decoded)]


def full_loss(cover, container, secrets, decoded, lambda_c=1.0, lambda_s=1.0):
    cover_term, secret_terms = loss_terms(cover, container, secrets, decoded, lambda_c, lambda_s)
    return LossReport.from_terms(cover_term.item(), [t.item() for t in secret_terms])


def lr_schedule(epoch, milestones=DEFAULT_MILESTONES):
    """Piecewise-constant rate; milestone (e, r) applies from epoch e onward."""
    starts = [e for e, _ in milestones]
    i = bisect.bisect_right(starts, epoch) - 1
    return milestones[max(i, 0)][1]


def add_noise(container, sigma, rng=None):
    """Additive i.i.d. Gaussian noise; ``sigma == 0`` returns the input unchanged."""
    if sigma == 0:
        return container
    noise = torch.randn(container.shape, generator=rng, dtype=container.dtype)
    return container + sigma * noise


def epoch_seed(seed, epoch, stream):
    return int(np.random.SeedSequence([seed, epoch, stream]).generate_state(1)[0])


def _check_finite(report, what):
    if not report.is_finite():
        raise TrainingError(
            f"non-finite loss in {what} step: total={report.total} cover={report.cover_term} "
            f"secrets={report.secret_terms}"
        )


class Trainer:
    """Holds the two Adam optimizers.

    The reveal optimizer covers the k reveal networks; the encoder optimizer
    covers the prep and hiding networks. Adam uses the usual defaults
    (betas 0.9/0.999, eps 1e-8).
    """

    def __init__(self, model, lambda_c=1.0, lambda_s=1.0, noise_std=0.01, lr=1e-3):
        self.model = model
        self.lambda_c = lambda_c
        self.lambda_s = lambda_s
        self.noise_std = noise_std
        self.reveal_opt = torch.optim.Adam(model.reveal_parameters(), lr=lr)
        self.encoder_opt = torch.optim.Adam(model.encoder_parameters(), lr=lr)

    def set_lr(self, lr):
        for opt in (self.reveal_opt, self.encoder_opt):
            for group in opt.param_groups:
                group["lr"] = lr

    def train_step_reveal(self, batch, container, lr=None):
        """One Adam step on each reveal net against its secret term only.

        ``container`` is the (already noised) encoder output; it is detached so
        nothing reaches the prep/hiding parameters. The report's cover_term is 0.
        """
        if lr is not None:
            self.set_lr(lr)
        decoded = decode_all(self.model, container.detach())
        terms = [reveal_loss(s, d, self.lambda_s) for s, d in zip(batch.secrets, decoded)]
        report = LossReport.from_terms(0.0, [t.item() for t in terms])
        _check_finite(report, "reveal")
        self.reveal_opt.zero_grad(set_to_none=False)
        torch.stack(terms).sum().backward(inputs=self.model.reveal_parameters())
        self.reveal_opt.step()
        return report

    def train_step_full(self, batch, lr=None, rng=None, container=None):
        """One Adam step on the full loss w.r.t. prep and hiding parameters.

        Gradients flow through the reveal nets but their parameters are left
        untouched. Pass ``container`` to reuse an encoder output computed with
        the current encoder weights.
        """
        if lr is not None:
            self.set_lr(lr)
        if container is None:
            container = encode_forward(self.model, batch)
        noisy = add_noise(container, self.noise_std, rng)
        decoded = decode_all(self.model, noisy)
        cover_term, secret_terms = loss_terms(
            batch.cover, container, batch.secrets, decoded, self.lambda_c, self.lambda_s
        )
        report = LossReport.from_terms(cover_term.item(), [t.item() for t in secret_terms])
        _check_finite(report, "full")
        total = cover_term + torch.stack(secret_terms).sum()
        self.encoder_opt.zero_grad(set_to_none=False)
        total.backward(inputs=self.model.encoder_parameters())
        self.encoder_opt.step()
        return report

    def step(self, batch, lr, rng=None):
        """encode -> add noise -> reveal step -> full step; returns the full-step report."""
        self.set_lr(lr)
        container = encode_forward(self.model, batch)
        self.train_step_reveal(batch, add_noise(container.detach(), self.noise_std, rng))
        # encoder weights are unchanged by the reveal step, so the graph is reusable
        return self.train_step_full(batch, rng=rng, container=container)

    def optimizer_state(self):
        return {"reveal": self.reveal_opt.state_dict(), "encoder": self.encoder_opt.state_dict()}

    def load_optimizer_state(self, state):
        self.reveal_opt.load_state_dict(state["reveal"])
        self.encoder_opt.load_state_dict(state["encoder"])


@dataclass
class Checkpoint:
    model: torch.nn.Module
    config: object
    epoch: int = 0
    history: list = field(default_factory=list)
    optimizer_state: dict = None
    format_version: int = 1

    @property
    def k(self):
        return self.model.k


def run_epoch(trainer, batches, lr, rng=None):
    reports, sizes = [], []
    for batch in batches:
        reports.append(trainer.step(batch, lr, rng))
        sizes.append(len(batch))
    if not reports:
        raise TrainingError("epoch produced no batches (empty split)")
    return mean_report(reports, sizes)


def train(config, split, out_dir=None, resume=None, dtype=torch.float32, on_epoch=None):
    """Two-phase training; returns the final Checkpoint.

    Epochs ``[0, phase1_epochs)`` use ``phase1_batch``, the rest use
    ``phase2_batch``; the LR schedule follows the global epoch counter. Shuffle
    order and noise are seeded from ``(config.seed, epoch)``, so a run resumed
    from a checkpoint matches an uninterrupted one.
    """
    from .checkpoint import save_checkpoint

    if split.k != config.k:
        raise TrainingError(f"config.k={config.k} but split has {split.k} secret pools")
    if resume is not None:
        model, start, history = resume.model, resume.epoch, list(resume.history)
    else:
        model = init_params(NetworkSpec(k=config.k), seed=config.init_seed, dtype=dtype)
        start, history = 0, []
    trainer = Trainer(model, config.lambda_c, config.lambda_s, config.noise_std)
    if resume is not None and resume.optimizer_state:
        trainer.load_optimizer_state(resume.optimizer_state)
    iterators = {}
    out_dir = Path(out_dir) if out_dir else None

    def snapshot(epoch):
        return Checkpoint(model, config, epoch, list(history), trainer.optimizer_state())

    model.train()
    for epoch in range(start, config.total_epochs):
        bs = config.batch_size(epoch)
        if bs not in iterators:
            iterators[bs] = BatchIterator(split, bs, seed=config.seed, shuffle=True, dtype=dtype)
        lr = lr_schedule(epoch, config.lr_milestones)
        rng = torch.Generator().manual_seed(epoch_seed(config.seed, epoch, 1))
        report = run_epoch(trainer, iterators[bs].epoch(epoch), lr, rng)
        history.append(report)
        log.info("epoch %d lr=%g total=%.4f cover=%.4f secrets=%s", epoch, lr,
                 report.total, report.cover_term, [round(t, 4) for t in report.secret_terms])
        if on_epoch is not None:
            on_epoch(epoch, report, model)
        done = epoch + 1
        if out_dir and config.checkpoint_every and done % config.checkpoint_every == 0:
            save_checkpoint(snapshot(done), out_dir / "checkpoint.mstg")
    ckpt = snapshot(config.total_epochs if config.total_epochs > start else start)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, out_dir / "checkpoint.mstg")
        write_history_csv(ckpt.history, out_dir / "history.csv")
    return ckpt


def write_history_csv(history, path):
    k = history[0].k if history else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "total", "cover_term", *[f"secret_{i + 1}" for i in range(k)]])
        for epoch, rep in enumerate(history):
            w.writerow([epoch, *(repr(float(v)) for v in rep.as_row())])


def read_history_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        secrets = [float(row[c]) for c in row if c.startswith("secret_")]
        out.append(LossReport(float(row["total"]), float(row["cover_term"]), secrets))
    return out


# -- gradient checking ------------------------------------------------------

def central_difference(f, theta, h):
    return (f(theta + h) - f(theta - h)) / (2 * h)


def relative_error(analytic, numeric, floor=1e-8):
    """|analytic - numeric| / max(|numeric|, floor), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)


def _activation_patterns(model):
    """Attach hooks recording which ReLU units are active; returns (list, handles)."""
    from .stego_net import AggregatedConv

    patterns = []
    handles = [m.register_forward_hook(lambda mod, inp, out: patterns.append(out > 0))
               for m in model.modules() if isinstance(m, AggregatedConv)]
    return patterns, handles


def grad_check(model, batch, probe_count=50, h=1e-3, seed=0, lambda_c=1.0, lambda_s=1.0,
               skip_kinks=True, return_details=False):
    """Max relative error between autograd and central differences of the full loss.

    The loss is evaluated on the noiseless path. Scalar parameters are drawn
    uniformly at random until ``probe_count`` usable probes are collected.
    With ``skip_kinks`` a probe is discarded when the ReLU activation pattern
    at theta +/- h differs from the one at theta: the loss is not
    differentiable across such a kink and the difference quotient is not a
    valid reference there. Along one parameter with a fixed pattern the loss
    is quadratic, so central differences are exact up to rounding.
    """
    params = dict(model.named_parameters())
    patterns, handles = _activation_patterns(model)

    def loss():
        patterns.clear()
        container = encode_forward(model, batch)
        decoded = decode_all(model, container)
        c, s = loss_terms(batch.cover, container, batch.secrets, decoded, lambda_c, lambda_s)
        return c + torch.stack(s).sum()

    def same(a, b):
        return all(torch.equal(x, y) for x, y in zip(a, b))

    try:
        model.zero_grad(set_to_none=True)
        loss().backward()
        names = list(params)
        sizes = np.array([params[n].numel() for n in names])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        order = np.random.default_rng(seed).permutation(int(sizes.sum()))

        analytic, numeric, where, skipped = [], [], [], 0
        with torch.no_grad():
            for idx in order:
                if len(analytic) == probe_count:
                    break
                j = int(np.searchsorted(offsets, idx, side="right") - 1)
                p = params[names[j]]
                i = int(idx - offsets[j])
                view = p.view(-1)
                orig = view[i].item()
                seen = {}

                def f(value):
                    view[i] = value
                    out = loss().item()
                    seen[value] = list(patterns)
                    return out

                base = None
                if skip_kinks:
                    loss()
                    base = list(patterns)
                num = central_difference(f, orig, h)
                view[i] = orig
                if skip_kinks and not all(same(base, pat) for pat in seen.values()):
                    skipped += 1
                    continue
                numeric.append(num)
                analytic.append(p.grad.view(-1)[i].item())
                where.append((names[j], i))
    finally:
        for hd in handles:
            hd.remove()
        model.zero_grad(set_to_none=True)
    err = relative_error(analytic, numeric)
    worst = float(err.max()) if len(err) else 0.0
    if return_details:
        return worst, {"analytic": analytic, "numeric": numeric, "probes": where,
                       "errors": err, "skipped": skipped}
    return worst


def fixed_batch(k, batch_size=4, size=64, seed=0, dtype=torch.float32):
    """Smooth random StegoBatch for tests and demos (not real images)."""
    from .synthetic import smooth_images

    imgs = smooth_images((k + 1) * batch_size, size, seed)
    t = torch.from_numpy(imgs).to(dtype)
    parts = list(t.split(batch_size))
    return StegoBatch(parts[0], parts[1:])
