"""Self-supervised pretraining loop, metrics and collapse diagnostics."""

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import astuple, dataclass, fields

import numpy as np

from . import tensor as tn
from .augment import AugmentationSpec, augment
from .checkpoint import config_digest, load_checkpoint, save_checkpoint
from .config import Config, parse, render
from .exceptions import BatchSizeError, ConfigurationError, NumericalError
from .model import EncoderConfig, ExpanderConfig, LossWeights, OptimlModel, OTConfig
from .optim import make_optimizer

METRICS_HEADER = "step,l_ot,l_var,l_cov,total,feat_std,sink_iters,marg_err,ms"


@dataclass
class MetricsRow:
    step: int
    l_ot: float
    l_var: float
    l_cov: float
    total: float
    feat_std: float
    sink_iters: int
    marg_err: float
    ms: float

    def to_csv(self):
        cells = []
        for value in astuple(self):
            cells.append(str(value) if isinstance(value, int) else repr(float(value)))
        return ",".join(cells)


def thread_count():
    """Worker threads for batch assembly, capped by ``OTML_THREADS``."""
    try:
        return max(1, int(os.environ.get("OTML_THREADS", "1")))
    except ValueError:
        return 1


def build_model(config):
    size = config["model.image_size"]
    return OptimlModel(
        encoder=EncoderConfig(blocks=config["model.blocks"], image_size=(size, size)),
        expander=ExpanderConfig(widths=config["model.expander"]),
        n_tokens=config["model.n_tokens"],
        n_heads=config["model.n_heads"],
        temperature=config["model.temperature"],
        seed=config["train.seed"],
    )


def augmentation_spec(config):
    a = config.section("augment")
    if not a["enabled"]:
        return AugmentationSpec.disabled()
    return AugmentationSpec(
        crop_scale=(a["crop_lo"], a["crop_hi"]),
        flip_prob=a["flip_prob"],
        brightness=a["brightness"],
        contrast=a["contrast"],
        blur_prob=a["blur_prob"],
        blur_sigma=(a["blur_sigma_lo"], a["blur_sigma_hi"]),
        use_crop=a["use_crop"],
        use_flip=a["use_flip"],
        use_jitter=a["use_jitter"],
        use_blur=a["use_blur"],
    )


def _rng(*entropy):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


class TrainState:
    """Model, optimizer and bookkeeping of one pretraining run.

    Parameters
    ----------
    config : Config
    images : ndarray
        Unlabeled training pool of shape ``(n, 1, h, w)``.
    model : OptimlModel, optional
        Built from ``config`` when omitted.
    """

    def __init__(self, config, images, model=None):
        if config["train.batch_size"] < 2:
            raise ConfigurationError("batch size must be at least 2")
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1] != 1:
            raise ConfigurationError(f"expected (n, 1, h, w) training images, got {images.shape}")
        if len(images) < 2:
            raise BatchSizeError("need at least two training images")
        self.config = config
        self.images = images
        self.model = model or build_model(config)
        lr = config["train.lr"]
        self.optimizer = make_optimizer(
            config["train.optimizer"],
            self.model.params,
            lr=None if lr == "auto" else lr,
            weight_decay=config["train.weight_decay"],
            momentum=config["train.momentum"],
            trust_coeff=config["train.trust_coeff"],
            warmup_steps=config["train.warmup_steps"],
        )
        self.weights = LossWeights(config["model.alpha"], config["model.beta"], config["model.eta"])
        self.ot = OTConfig(
            epsilon=config["ot.epsilon"],
            iterations=config["ot.iterations"],
            mode=config["ot.mode"],
            tol=config["ot.tol"],
        )
        self.spec = augmentation_spec(config)
        self.step = 0
        self.history = []

    @property
    def seed(self):
        return self.config["train.seed"]

    def sample_batch(self, step):
        """Indices and two augmented views for ``step``; independent of thread count."""
        size = min(self.config["train.batch_size"], len(self.images))
        index = _rng(self.seed, step, 0).choice(len(self.images), size=size, replace=False)

        def views(slot):
            image = self.images[index[slot]]
            rng = _rng(self.seed, step, 1, slot)
            return augment(image, self.spec, rng), augment(image, self.spec, rng)

        workers = thread_count()
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                pairs = list(pool.map(views, range(size)))
        else:
            pairs = [views(slot) for slot in range(size)]
        return index, np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def train_step(state, batch=None):
    """One optimization step; returns the :class:`MetricsRow`.

    ``batch`` may supply the two view batches directly; by default they are
    drawn from the state's image pool with per-step seeded streams.
    """
    started = time.perf_counter()
    if batch is None:
        _, view_s, view_t = state.sample_batch(state.step)
    else:
        view_s, view_t = batch
    state.optimizer.zero_grad()
    tn.reset_graph()
    try:
        cfg = state.config
        breakdown, total = state.model.forward_loss(
            view_s, view_t, state.weights, state.ot, cfg["model.var_gamma"], cfg["model.var_eps"]
        )
        tn.backward(total)
    except NumericalError as exc:
        module = getattr(exc, "module", "unknown")
        raise NumericalError(f"step {state.step} aborted in module {module}: {exc}", op=exc.op) from exc
    finally:
        tn.reset_graph()
    state.optimizer.step()
    elapsed = (time.perf_counter() - started) * 1000 if cfg["train.record_time"] else 0.0
    row = MetricsRow(
        step=state.step,
        l_ot=breakdown.l_ot,
        l_var=breakdown.l_var,
        l_cov=breakdown.l_cov,
        total=breakdown.total,
        feat_std=breakdown.feat_std,
        sink_iters=int(breakdown.sinkhorn_iterations),
        marg_err=breakdown.marginal_error,
        ms=round(elapsed, 3),
    )
    state.step += 1
    state.history.append(row)
    return row


def save_model(path, model, config, step=0):
    save_checkpoint(path, model.state_dict(), step=step, config_text=render(config))


def save_state(state, path):
    save_model(path, state.model, state.config, state.step)


def load_model(path, config=None):
    """Rebuild a model from a checkpoint.

    The embedded config is used unless ``config`` is given, in which case a
    digest mismatch is surfaced as a warning.
    """
    expected = config_digest(render(config)) if config is not None else None
    ckpt = load_checkpoint(path, expected_digest=expected)
    if config is None:
        config = parse(ckpt.config_text) if ckpt.config_text else Config()
    model = build_model(config)
    model.load_state_dict(ckpt.tensors)
    return model, config, ckpt


def pretrain(config, images, out=None, log=None):
    """Run ``train.steps`` steps; write metrics and checkpoints when ``out`` is given.

    ``out`` is the final checkpoint path; the metrics CSV goes next to it.
    Returns the final :class:`TrainState`.
    """
    state = TrainState(config, images)
    metrics_file = None
    if out is not None:
        directory = os.path.dirname(os.path.abspath(out))
        os.makedirs(directory, exist_ok=True)
        metrics_path = os.path.join(directory, config["train.metrics"])
        metrics_file = open(metrics_path, "w", encoding="utf-8", newline="\n")
        metrics_file.write(METRICS_HEADER + "\n")
    every = config["train.checkpoint_every"]
    try:
        for _ in range(config["train.steps"]):
            row = train_step(state)
            if metrics_file is not None:
                metrics_file.write(row.to_csv() + "\n")
            if log is not None:
                log(row)
            if out is not None and every and state.step % every == 0 and state.step < config["train.steps"]:
                save_state(state, f"{out}.step{state.step}")
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if out is not None:
        save_state(state, out)
    return state


def read_metrics(path):
    """Parse a metrics CSV back into :class:`MetricsRow` objects."""
    rows = []
    types = [f.type for f in fields(MetricsRow)]
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {header!r}")
        for line in fh:
            cells = line.strip().split(",")
            rows.append(MetricsRow(*[int(c) if t is int else float(c) for c, t in zip(cells, types)]))
    return rows


def effective_rank(embeddings):
    """``exp`` of the entropy of the normalized singular values (rows uncentered)."""
    singular = np.linalg.svd(np.asarray(embeddings, dtype=float), compute_uv=False)
    total = singular.sum()
    if total <= 0:
        return 1.0
    p = singular / total
    p = p[p > 0]
    return float(np.exp(-(p * np.log(p)).sum()))


def collapse_report(model, images):
    """Mean per-dimension std and effective rank of eval-mode embeddings.

    Returns
    -------
    dict
        ``{"feat_std": float, "effective_rank": float}``
    """
    q = model.embed(images)
    std = q.std(axis=0, ddof=1).mean() if len(q) > 1 else 0.0
    return {"feat_std": float(std), "effective_rank": effective_rank(q)}
