"""Joint ASR + text-only LM training of the CTC-prompted decoder-only model."""

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoder import ctc_feasible, greedy_path
from .model import build_external_lm

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    "step", "loss_ctc", "loss_att", "loss_lm", "loss_lm_pseudo", "lr", "tau_mean",
    "immature_count",
)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    ctc_lambda: float = 0.3
    theta: float = 2.0
    use_threshold: bool = True
    lm_batch_fraction: float = 0.10
    pseudo_split: str = "1:1"
    batch_size: int = 32
    epochs: int = 100
    max_steps: int = 0
    warmup_steps: int = 25000
    noam_scale: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float = 5.0
    schedule: str = "joint"
    save_every_epochs: int = 1
    lm_steps: int = 1000
    lm_batch_size: int = 32
    lm_heldout_fraction: float = 0.1
    pair_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ctc_lambda <= 1.0:
            raise ValueError(f"ctc_lambda must lie in [0, 1], got {self.ctc_lambda}")
        if not 0.0 <= self.lm_batch_fraction <= 1.0:
            raise ValueError(f"lm_batch_fraction must lie in [0, 1], got {self.lm_batch_fraction}")
        if not self.theta > 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if self.schedule not in ("joint", "pretrain_finetune"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0.0 <= self.lm_heldout_fraction < 1.0:
            raise ValueError("lm_heldout_fraction must lie in [0, 1)")
        if not 0.0 < self.pair_fraction <= 1.0:
            raise ValueError(f"pair_fraction must lie in (0, 1], got {self.pair_fraction}")
        self.split_ratio()

    def split_ratio(self):
        """(plain LM, pseudo-prompt LM) integer shares."""
        try:
            plain, pseudo = (int(x) for x in self.pseudo_split.split(":"))
        except ValueError:
            raise ValueError(f"pseudo_split must look like 'a:b', got {self.pseudo_split!r}") from None
        if plain < 0 or pseudo < 0 or plain + pseudo == 0:
            raise ValueError(f"invalid pseudo_split {self.pseudo_split!r}")
        return plain, pseudo


def subsample_pairs(items, fraction, seed):
    """A seeded subset of ``ceil(fraction * n)`` items in their original order."""
    if fraction >= 1.0:
        return list(items)
    n = max(1, math.ceil(fraction * len(items)))
    keep = np.sort(np.random.default_rng([seed, 3]).choice(len(items), size=n, replace=False))
    return [items[i] for i in keep]


def noam_lr(step, model_dim, warmup, scale=1.0):
    if step < 1:
        raise ValueError("noam_lr is defined for step >= 1")
    return scale * model_dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def immature_check(tau, target_len, theta):
    """True when a CTC prompt is too long to trust: tau > theta * I."""
    return tau > theta * target_len


class Adam:
    def __init__(self, named_params, beta1=0.9, beta2=0.98, eps=1e-9):
        named_params = list(named_params)
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self, lr, grads):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                g = np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"step": self.step_count, "m": list(self.m), "v": list(self.v)}

    def load_state_dict(self, state):
        self.step_count = int(state["step"])
        self.m = [np.array(a, dtype=np.float64) for a in state["m"]]
        self.v = [np.array(a, dtype=np.float64) for a in state["v"]]


def clip_gradients(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        grads = [None if g is None else g * factor for g in grads]
    return grads, total


# ---------------------------------------------------------------------------
# batch planning
# ---------------------------------------------------------------------------


@dataclass
class BatchPlan:
    """One training step: either ASR items or LM items split by prompt form."""

    asr_items: list = field(default_factory=list)
    lm_items: list = field(default_factory=list)
    pseudo_lm_items: list = field(default_factory=list)
    ctc_lambda: float = None

    @property
    def kind(self):
        return "asr" if self.asr_items else "lm"


class _IndexStream:
    """Endless reshuffled passes over range(n)."""

    def __init__(self, n, rng):
        self.n, self.rng = n, rng
        self.order, self.pos = np.array([], dtype=np.int64), 0
        self.passes = 0

    def take(self, k):
        out = []
        while len(out) < k:
            if self.pos >= len(self.order):
                self.order, self.pos = self.rng.permutation(self.n), 0
                self.passes += 1
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out


def make_batch_plan(n_pair, n_text, config, rng, n_steps):
    """Per-step Bernoulli(lm_batch_fraction) task choice; LM items split round-robin."""
    fraction = config.lm_batch_fraction
    if fraction > 0 and n_text == 0:
        raise ValueError("text-only data is empty but lm_batch_fraction > 0")
    if fraction < 1 and n_pair == 0:
        raise ValueError("paired data is empty")
    plain, pseudo = config.split_ratio()
    cycle = [False] * plain + [True] * pseudo
    pair_stream = _IndexStream(n_pair, rng)
    text_stream = _IndexStream(n_text, rng) if n_text else None
    plans, slot = [], 0
    for _ in range(n_steps):
        plan = BatchPlan()
        if rng.random() < fraction:
            for idx in text_stream.take(config.batch_size):
                (plan.pseudo_lm_items if cycle[slot % len(cycle)] else plan.lm_items).append(idx)
                slot += 1
        else:
            plan.asr_items = pair_stream.take(config.batch_size)
        plans.append(plan)
    if config.schedule == "pretrain_finetune":
        _two_phase(plans, n_pair, rng, config)
    return plans


def _two_phase(plans, n_pair, rng, config):
    """First half: CTC-only ASR steps and LM steps; second half: joint ASR only."""
    half = len(plans) // 2
    stream = _IndexStream(n_pair, rng)
    for k, plan in enumerate(plans):
        if k < half:
            if plan.kind == "asr":
                plan.ctc_lambda = 1.0
        elif plan.kind == "lm":
            plans[k] = BatchPlan(asr_items=stream.take(config.batch_size))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass
class LossTerms:
    ctc_sum: object = None
    ctc_tokens: int = 0
    att_sum: object = None
    att_tokens: int = 0
    taus: list = field(default_factory=list)
    immature: int = 0
    skipped: int = 0


def _accumulate(total, term):
    return term if total is None else ad.add(total, term)


def prompt_length(model, n_frames, path):
    mode = model.config.compression
    if mode == "remove":
        return int(np.count_nonzero(path))
    if mode == "average":
        return int(np.count_nonzero((path != 0) & np.r_[True, path[1:] != path[:-1]]))
    return n_frames // model.config.downsample_factor


def asr_terms(model, items, theta=2.0, use_threshold=True, rng=None):
    """Per-item CTC and decoder NLL sums for paired ``(features, ids)`` items."""
    terms = LossTerms()
    for features, ids in items:
        h, lp = model.encode(features, rng=rng)
        if not ctc_feasible(lp.shape[0], ids):
            terms.skipped += 1
            continue
        terms.ctc_sum = _accumulate(terms.ctc_sum, ad.ctc_loss(lp, ids))
        terms.ctc_tokens += len(ids)
        path = greedy_path(lp)
        tau = prompt_length(model, lp.shape[0], path)
        terms.taus.append(tau)
        if use_threshold and immature_check(tau, len(ids), theta):
            terms.immature += 1
            nll, n = model.decoder.teacher_forced_nll(None, ids, lm=True, rng=rng)
        else:
            prompt = model.decoder.map_prompt(model.compress(h, path))
            nll, n = model.decoder.teacher_forced_nll(prompt, ids, rng=rng)
        terms.att_sum = _accumulate(terms.att_sum, nll)
        terms.att_tokens += n
    if terms.skipped:
        log.info("skipped %d CTC-infeasible items", terms.skipped)
    return terms


def _mean(total, count):
    return ad.scale(total, 1.0 / count)


def asr_loss(model, items, ctc_lambda=0.3, theta=2.0, use_threshold=True, rng=None):
    """lambda * L_ctc + (1 - lambda) * L_att, each a per-token mean over the batch.

    Returns ``(loss, terms)``; ``loss`` is None when every item was skipped.
    """
    terms = asr_terms(model, items, theta, use_threshold, rng)
    if terms.ctc_sum is None:
        return None, terms
    ctc = _mean(terms.ctc_sum, terms.ctc_tokens)
    att = _mean(terms.att_sum, terms.att_tokens)
    return ad.add(ad.scale(ctc, ctc_lambda), ad.scale(att, 1.0 - ctc_lambda)), terms


def lm_loss(decoder, items, rng=None):
    """Summed -log p(y_i | y_<i) without any prompt; returns (sum, n_predictions)."""
    total, count = None, 0
    for ids in items:
        if not len(ids):
            continue
        nll, n = decoder.teacher_forced_nll(None, ids, lm=True, rng=rng)
        total, count = _accumulate(total, nll), count + n
    return total, count


def pseudo_prompt_lm_loss(decoder, items, rng=None):
    """As :func:`lm_loss` but with the sentence's own embeddings as the prompt."""
    total, count = None, 0
    for ids in items:
        if not len(ids):
            continue
        nll, n = decoder.teacher_forced_nll(decoder.pseudo_prompt(ids), ids, rng=rng)
        total, count = _accumulate(total, nll), count + n
    return total, count


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    metrics: list
    steps: int
    checkpoints: list = field(default_factory=list)


def format_metrics(row):
    def fmt(v):
        return repr(float(v)) if isinstance(v, float) else str(v)

    return ",".join(fmt(row[k]) for k in METRIC_FIELDS)


def _finite(t):
    return t is None or bool(np.isfinite(t.data).all())


def _dump_state(out_dir, step, row, model):
    if not out_dir:
        return None
    path = os.path.join(out_dir, f"diverged_step{step}.json")
    norms = {n: float(np.linalg.norm(p.data)) for n, p in model.named_parameters()}
    with open(path, "w") as f:
        json.dump({"step": step, "metrics": row, "param_norms": norms}, f, indent=1)
    return path


def steps_per_epoch(n_pair, batch_size):
    return max(1, math.ceil(n_pair / batch_size))


def train(model, pair_data, text_data, config, out_dir=None, tokenizer=None, on_step=None):
    """Train ``model`` on paired ``(features, ids)`` and text-only ``ids`` lists.

    Writes ``metrics.csv`` and epoch checkpoints into ``out_dir`` when given.
    """
    from .checkpoint import save_checkpoint

    per_epoch = steps_per_epoch(len(pair_data), config.batch_size)
    n_steps = config.max_steps or config.epochs * per_epoch
    plan_rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng([config.seed, 1]) if model.config.dropout_rate > 0 else None
    plans = make_batch_plan(len(pair_data), len(text_data), config, plan_rng, n_steps)
    named = list(model.named_parameters())
    params = [p for _, p in named]
    opt = Adam(named, config.adam_beta1, config.adam_beta2, config.adam_eps)
    metrics, checkpoints = [], []
    metrics_file = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_file = open(os.path.join(out_dir, "metrics.csv"), "w")
        metrics_file.write(",".join(METRIC_FIELDS) + "\n")
    nan = float("nan")
    try:
        for step, plan in enumerate(plans, start=1):
            model.zero_grad()
            lr = noam_lr(step, model.config.model_dim, config.warmup_steps, config.noam_scale)
            row = dict(step=step, loss_ctc=nan, loss_att=nan, loss_lm=nan, loss_lm_pseudo=nan,
                       lr=lr, tau_mean=nan, immature_count=0)
            if plan.kind == "asr":
                lam = config.ctc_lambda if plan.ctc_lambda is None else plan.ctc_lambda
                loss, terms = asr_loss(model, [pair_data[i] for i in plan.asr_items], lam,
                                       config.theta, config.use_threshold, drop_rng)
                if loss is None:
                    log.warning("step %d: every item in the batch is CTC-infeasible", step)
                    continue
                row["loss_ctc"] = terms.ctc_sum.item() / terms.ctc_tokens
                row["loss_att"] = terms.att_sum.item() / terms.att_tokens
                row["tau_mean"] = float(np.mean(terms.taus))
                row["immature_count"] = terms.immature
            else:
                plain, n_plain = lm_loss(model.decoder, [text_data[i] for i in plan.lm_items],
                                         drop_rng)
                pseudo, n_pseudo = pseudo_prompt_lm_loss(
                    model.decoder, [text_data[i] for i in plan.pseudo_lm_items], drop_rng)
                if plain is not None:
                    row["loss_lm"] = plain.item() / n_plain
                if pseudo is not None:
                    row["loss_lm_pseudo"] = pseudo.item() / n_pseudo
                total = plain if pseudo is None else _accumulate(plain, pseudo)
                if total is None:
                    continue
                loss = _mean(total, n_plain + n_pseudo)
            if not _finite(loss):
                dump = _dump_state(out_dir, step, row, model)
                raise TrainingDivergedError(f"non-finite loss at step {step}; state dump: {dump}")
            loss.backward()
            grads, _ = clip_gradients([p.grad for p in params], config.grad_clip)
            opt.step(lr, grads)
            metrics.append(row)
            if metrics_file:
                metrics_file.write(format_metrics(row) + "\n")
            if on_step is not None:
                on_step(step, row)
            if out_dir and config.save_every_epochs > 0 and step % per_epoch == 0:
                epoch = step // per_epoch
                if epoch % config.save_every_epochs == 0 or step == n_steps:
                    path = os.path.join(out_dir, f"epoch{epoch:04d}.ckpt")
                    save_checkpoint(path, model, tokenizer, step=step, seed=config.seed,
                                    optimizer=opt, train_config=config)
                    checkpoints.append(path)
        if out_dir:
            path = os.path.join(out_dir, "final.ckpt")
            save_checkpoint(path, model, tokenizer, step=n_steps, seed=config.seed,
                            optimizer=opt, train_config=config)
            checkpoints.append(path)
    finally:
        if metrics_file:
            metrics_file.close()
    return TrainResult(metrics, n_steps, checkpoints)


@dataclass
class LMResult:
    lm: object
    perplexity: float
    losses: list


def heldout_perplexity(lm, items):
    with ad.no_grad():
        total, count = lm_loss(lm, items)
    if total is None:
        return float("nan")
    return math.exp(total.item() / count)


def train_external_lm(text_data, vocab_size, model_config, config):
    """A shallower decoder-architecture LM on text-only ``ids`` lists."""
    text_data = [ids for ids in text_data if len(ids)]
    if not text_data:
        raise ValueError("external LM needs a non-empty text corpus")
    rng = np.random.default_rng([config.seed, 2])
    order = rng.permutation(len(text_data))
    n_held = int(len(text_data) * config.lm_heldout_fraction)
    held = [text_data[i] for i in order[:n_held]]
    train_items = [text_data[i] for i in order[n_held:]] or held
    lm = build_external_lm(vocab_size, model_config, seed=config.seed + 7919)
    named = list(lm.named_parameters())
    opt = Adam(named, config.adam_beta1, config.adam_beta2, config.adam_eps)
    stream = _IndexStream(len(train_items), rng)
    losses = []
    for step in range(1, config.lm_steps + 1):
        lm.zero_grad()
        total, count = lm_loss(lm, [train_items[i] for i in stream.take(config.lm_batch_size)])
        loss = _mean(total, count)
        loss.backward()
        grads, _ = clip_gradients([p.grad for _, p in named], config.grad_clip)
        opt.step(noam_lr(step, model_config.model_dim, config.warmup_steps, config.noam_scale),
                 grads)
        losses.append(loss.item())
    ppl = heldout_perplexity(lm, held or train_items)
    return LMResult(lm, ppl, losses)
