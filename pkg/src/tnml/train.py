"""Training loop, loss head, optimizer, checkpoints and evaluation for MPS classifiers."""

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tnml import mps
from tnml.dataset import ImageDataset, batches, preprocess
from tnml.errors import DimensionError, DivergenceError, StructuralError
from tnml.initializers import CopyInitPlan, InitSpec, copy_node_init, init_dense, init_per_tensor
from tnml.netgraph import (
    TensorNetwork,
    build_mps,
    dumps_topology,
    loads_topology,
    mps_from_tensors,
    param_count,
)
from tnml.rankreg import (
    RankRegularizer,
    clamp_soft_dim,
    insert_regularizers,
    mask_derivative,
    mask_diagonal,
    penalty,
    penalty_grad,
    truncate_and_absorb,
    truncated_dims,
)

log = logging.getLogger(__name__)

# |logit| outside [COLLAPSE, BLOWUP] counts as divergence
BLOWUP = 1e100
COLLAPSE = 1e-100


@dataclass
class TrainConfig:
    # data
    data_dir: str = "data/mnist"
    subset: int | None = 10000
    val_fraction: float = 0.2
    feature: str = "trig"
    # optimisation
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_runs: int = 1
    seed: int = 0
    # model
    bond_dim: int = 4
    output_site: int = 0
    n_classes: int = 10
    # initialization
    init: str = "copy"  # copy | dense | per_tensor
    scheme: str = "glorot"
    distribution: str = "normal"
    target_variance: float | None = None
    n_dense: int = 4
    pin_vector: tuple = (1.0, 0.0)
    selection: str = "contiguous"
    # rank regularization
    rank_reg: bool = False
    gamma: float = 10.0
    gamma_final: float | None = None
    lam: float = 0.0
    penalty: str = "params"
    threshold: float = 0.5
    soft_dim_lr: float | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.n_runs < 1:
            raise ValueError("epochs, batch_size and n_runs must be positive")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.init not in ("copy", "dense", "per_tensor"):
            raise ValueError(f"unknown init {self.init!r}")
        self.pin_vector = tuple(float(v) for v in self.pin_vector)

    @classmethod
    def full_scale(cls, **overrides):
        """Settings of the original experiments: all training images, 100 epochs, 10 runs."""
        base = dict(subset=None, epochs=100, n_runs=10)
        base.update(overrides)
        return cls(**base)

    def init_spec(self, seed=None) -> InitSpec:
        return InitSpec(self.scheme, self.distribution, self.seed if seed is None else seed,
                        self.target_variance)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_error: list = field(default_factory=list)
    params: list = field(default_factory=list)
    max_abs_intermediate: list = field(default_factory=list)
    soft_dims: list = field(default_factory=list)
    test_accuracy: float | None = None
    final_params: int | None = None
    diverged: str | None = None
    initial_max_abs_logit: float | None = None
    seconds: float = 0.0

    def rows(self):
        for i, e in enumerate(self.epochs):
            yield {"epoch": e, "train_loss": self.train_loss[i], "val_error": self.val_error[i],
                   "params": self.params[i],
                   "max_abs_intermediate": self.max_abs_intermediate[i]}


@dataclass
class Model:
    """MPS parameters plus optional soft bond dimensions."""

    tensors: list
    output_site: int
    regs: list | None = None  # RankRegularizer per bond, or None

    @property
    def n_sites(self):
        return len(self.tensors)

    def masks(self):
        if not self.regs:
            return None
        return [r.mask() for r in self.regs]

    def network(self) -> TensorNetwork:
        return mps_from_tensors(self.tensors, self.output_site)

    def regularized_network(self):
        net, regs = insert_regularizers(self.network(), self.regs[0].gamma if self.regs else 10.0)
        if self.regs:
            for r, mine in zip(regs, self.regs):
                r.soft_dim, r.gamma = mine.soft_dim, mine.gamma
        return net, regs

    def param_count(self) -> int:
        return int(sum(np.size(t) for t in self.tensors))

    def copy(self):
        regs = [dataclasses.replace(r) for r in self.regs] if self.regs else None
        return Model([t.copy() for t in self.tensors], self.output_site, regs)


# ----------------------------------------------------------------------------
# loss and optimizer


def softmax_cross_entropy(logits, labels):
    """Mean categorical cross-entropy of softmax(logits) and its gradient.

    ``logits`` is (C,) with an integer ``labels`` or (B, C) with (B,) labels;
    the gradient is taken with respect to the mean.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DivergenceError("non-finite logits entering the loss")
    single = z.ndim == 1
    z2 = z[None] if single else z
    y = np.atleast_1d(np.asarray(labels))
    shifted = z2 - z2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    rows = np.arange(len(y))
    loss = float(-np.mean(logp[rows, y]))
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad /= len(y)
    return loss, (grad[0] if single else grad)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0


def adam_init(params) -> AdamState:
    return AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, t=None, lr=1e-3, beta1=0.9, beta2=0.999,
              eps=1e-8, lrs=None):
    """Bias-corrected Adam update, in place.  ``lrs`` gives per-parameter step sizes."""
    state.t = state.t + 1 if t is None else t
    if state.t < 1:
        raise ValueError("Adam step counter starts at 1")
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = lr if lrs is None else lrs[i]
        p -= step * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ----------------------------------------------------------------------------
# model construction


def build_model(cfg: TrainConfig, n_sites: int, seed: int) -> Model:
    net = build_mps(n_sites, 2, cfg.bond_dim, cfg.n_classes, cfg.output_site)
    spec = cfg.init_spec(seed)
    if cfg.init == "copy":
        plan = CopyInitPlan(cfg.n_dense, cfg.pin_vector, selection=cfg.selection, seed=seed)
        net = copy_node_init(net, plan, spec)
    elif cfg.init == "dense":
        net = init_dense(net, spec)
    else:
        net = init_per_tensor(net, spec)
    tensors = [np.array(net[i].data) for i in range(n_sites)]
    regs = None
    if cfg.rank_reg:
        regs = [RankRegularizer(f"b{i}", cfg.bond_dim, cfg.bond_dim, cfg.gamma, ("reg", f"b{i}"))
                for i in range(n_sites - 1)]
    return Model(tensors, cfg.output_site, regs)


def _check_logits(logits, where):
    peak = float(np.max(np.abs(logits))) if logits.size else 0.0
    if not np.all(np.isfinite(logits)):
        return f"non-finite logits {where}"
    if peak > BLOWUP:
        return f"logits exploded to {peak:.3g} {where}"
    if peak < COLLAPSE:
        return f"logits collapsed to {peak:.3g} {where}"
    return None


# ----------------------------------------------------------------------------
# evaluation


def inference_tensors(model: Model, threshold=0.5) -> list:
    """Site tensors used at test time: truncated and absorbed when soft dims are present."""
    if not model.regs:
        return model.tensors
    net, regs = model.regularized_network()
    compiled = truncate_and_absorb(net, regs, threshold)
    out = []
    n = model.n_sites
    from tnml.netgraph import mps_site_labels

    for i in range(n):
        out.append(np.array(compiled[i].aligned(mps_site_labels(i, n, model.output_site))))
    return out


def evaluate(model: Model, feats: np.ndarray, labels: np.ndarray, threshold=0.5,
             batch_size=500) -> tuple:
    """(accuracy, parameter count) of the model as deployed."""
    tensors = inference_tensors(model, threshold)
    logits = mps.predict(tensors, feats, model.output_site, batch_size=batch_size)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels)) if len(labels) else float("nan")
    return acc, int(sum(np.size(t) for t in tensors))


def _val_error(model: Model, feats, labels):
    logits = mps.predict(model.tensors, feats, model.output_site, model.masks())
    return float(np.mean(np.argmax(logits, axis=1) != labels))


# ----------------------------------------------------------------------------
# training


def train_model(cfg: TrainConfig, train_feats, train_labels, val_feats, val_labels,
                seed: int = None, model: Model | None = None, progress=None):
    """One training run.  Returns ``(record, model)``.

    Divergence (non-finite or collapsed/exploded logits) stops the run; the
    record keeps every epoch completed so far and ``record.diverged`` says why.
    """
    seed = cfg.seed if seed is None else seed
    n_sites = train_feats.shape[1]
    model = build_model(cfg, n_sites, seed) if model is None else model
    rec = RunRecord()
    t0 = time.time()

    first = mps.forward(model.tensors, train_feats[:cfg.batch_size], model.output_site,
                        model.masks())
    rec.initial_max_abs_logit = float(np.max(np.abs(first.logits)))
    problem = _check_logits(first.logits, "at initialization")
    if problem:
        rec.diverged = problem
        rec.final_params = model.param_count()
        return rec, model

    params = list(model.tensors)
    has_regs = bool(model.regs)
    soft = np.array([r.soft_dim for r in model.regs]) if has_regs else None
    all_params = params + ([soft] if has_regs else [])
    state = adam_init(all_params)
    lrs = None
    if has_regs and cfg.soft_dim_lr is not None:
        lrs = [cfg.lr] * len(params) + [cfg.soft_dim_lr]
    rng = np.random.default_rng(seed + 7919)
    total_epochs = cfg.epochs

    for epoch in range(1, total_epochs + 1):
        if has_regs and cfg.gamma_final is not None and total_epochs > 1:
            g = cfg.gamma + (cfg.gamma_final - cfg.gamma) * (epoch - 1) / (total_epochs - 1)
            for r in model.regs:
                r.gamma = g
        losses, peak = [], 0.0
        for idx in batches(len(train_labels), cfg.batch_size, rng):
            masks = model.masks()
            cache = mps.forward(params, train_feats[idx], model.output_site, masks)
            problem = _check_logits(cache.logits, f"in epoch {epoch}")
            if problem:
                rec.diverged = problem
                break
            peak = max(peak, cache.max_abs)
            loss, g_logits = softmax_cross_entropy(cache.logits, train_labels[idx])
            site_grads, mask_grads = mps.backward(cache, g_logits)
            grads = site_grads
            if has_regs:
                net_like = _count_proxy(model)
                pen_grad = penalty_grad(net_like[0], net_like[1], cfg.lam, cfg.penalty)
                gsoft = np.array([
                    float(np.dot(mg, mask_derivative(r.soft_dim, r.max_dim, r.gamma)))
                    + pen_grad[r.edge]
                    for r, mg in zip(model.regs, mask_grads)])
                loss += penalty(net_like[0], net_like[1], cfg.lam, cfg.penalty)
                grads = site_grads + [gsoft]
            adam_step(all_params, grads, state, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                      eps=cfg.eps, lrs=lrs)
            if has_regs:
                np.clip(soft, 0.0, cfg.bond_dim, out=soft)
                for r, d in zip(model.regs, soft):
                    r.soft_dim = float(d)
            losses.append(loss)
        if rec.diverged:
            break
        rec.epochs.append(epoch)
        rec.train_loss.append(float(np.mean(losses)))
        rec.val_error.append(_val_error(model, val_feats, val_labels))
        rec.params.append(model.param_count() if not has_regs else
                          int(sum(np.size(t) for t in inference_tensors(model, cfg.threshold))))
        rec.max_abs_intermediate.append(peak)
        rec.soft_dims.append([r.soft_dim for r in model.regs] if has_regs else [])
        if progress:
            progress(epoch, rec)
    rec.final_params = int(sum(np.size(t) for t in inference_tensors(model, cfg.threshold)))
    rec.seconds = time.time() - t0
    return rec, model


_PROXY_CACHE: dict = {}


def _count_proxy(model: Model):
    """Zero-valued regularized network with the model's shapes, for parameter counting."""
    key = (tuple(np.shape(t) for t in model.tensors), model.output_site)
    if key not in _PROXY_CACHE:
        net = mps_from_tensors([np.zeros(np.shape(t)) for t in model.tensors], model.output_site)
        _PROXY_CACHE[key] = insert_regularizers(net)
    net, regs = _PROXY_CACHE[key]
    for r, mine in zip(regs, model.regs):
        r.soft_dim, r.gamma = mine.soft_dim, mine.gamma
    return net, regs


def prepare_data(cfg: TrainConfig, train_ds: ImageDataset, test_ds: ImageDataset | None = None,
                 split_seed: int | None = None):
    """Subset, split 80:20 and embed; returns dict of feature/label arrays."""
    from tnml.dataset import train_val_split

    ds = train_ds.head(cfg.subset) if cfg.subset else train_ds
    tr, va = train_val_split(ds, cfg.val_fraction, cfg.seed if split_seed is None else split_seed)
    data = {
        "train": (preprocess(tr.images, cfg.feature), tr.labels),
        "val": (preprocess(va.images, cfg.feature), va.labels),
    }
    if test_ds is not None:
        data["test"] = (preprocess(test_ds.images, cfg.feature), test_ds.labels)
    return data


def train(cfg: TrainConfig, train_ds: ImageDataset, test_ds: ImageDataset | None = None,
          progress=None):
    """All ``cfg.n_runs`` runs (seeds ``seed, seed + 1, ...``).

    Returns ``(records, models)``; test accuracy is filled in when a test
    set is given.
    """
    data = prepare_data(cfg, train_ds, test_ds)
    records, models = [], []
    for k in range(cfg.n_runs):
        rec, model = train_model(cfg, *data["train"], *data["val"], seed=cfg.seed + k,
                                 progress=progress)
        if "test" in data:
            rec.test_accuracy, rec.final_params = evaluate(model, *data["test"],
                                                           threshold=cfg.threshold)
        records.append(rec)
        models.append(model)
    return records, models


def aggregate(records) -> list:
    """Per-epoch mean and standard deviation across runs (epochs all runs reached)."""
    n = min(len(r.epochs) for r in records) if records else 0
    rows = []
    for i in range(n):
        row = {"epoch": records[0].epochs[i]}
        for key in ("train_loss", "val_error", "params", "max_abs_intermediate"):
            vals = np.array([getattr(r, key)[i] for r in records], dtype=np.float64)
            row[key] = float(vals.mean())
            row[key + "_std"] = float(vals.std())
        rows.append(row)
    return rows


METRIC_COLUMNS = ["epoch", "train_loss", "val_error", "params", "max_abs_intermediate"]


def write_metrics(path, records):
    """metrics.csv: the standard columns (mean over runs) followed by their std columns."""
    rows = aggregate(records)
    extra = [c + "_std" for c in METRIC_COLUMNS[1:]] if len(records) > 1 else []
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS + extra, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model, cfg: TrainConfig | None = None):
    """``.npz`` with the topology text, every site tensor and the soft-dim states."""
    arrays = {f"site_{i}": np.asarray(t) for i, t in enumerate(model.tensors)}
    arrays["topology"] = np.frombuffer(dumps_topology(model.network()).encode(), dtype=np.uint8)
    regs = [dict(edge=r.edge, soft_dim=r.soft_dim, max_dim=r.max_dim, gamma=r.gamma)
            for r in model.regs] if model.regs else []
    header = {"output_site": model.output_site, "regs": regs,
              "config": cfg.to_dict() if cfg else None}
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(model, config_dict_or_None)``."""
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        topo = bytes(z["topology"]).decode()
        n = sum(1 for k in z.files if k.startswith("site_"))
        tensors = [np.array(z[f"site_{i}"]) for i in range(n)]
    net = loads_topology(topo, {i: t for i, t in enumerate(tensors)})
    if len(net) != n:
        raise StructuralError("checkpoint topology and tensors disagree")
    regs = [RankRegularizer(r["edge"], r["soft_dim"], r["max_dim"], r["gamma"], ("reg", r["edge"]))
            for r in header["regs"]] or None
    model = Model(tensors, header["output_site"], regs)
    _check_against_config(model, header.get("config"))
    return model, header.get("config")


def _check_against_config(model: Model, cfg):
    if not cfg:
        return
    out = model.tensors[model.output_site]
    if cfg.get("output_site") != model.output_site:
        raise DimensionError(f"checkpoint output site {model.output_site} but config says "
                             f"{cfg.get('output_site')}")
    if out.shape[1 if model.output_site else 0] != cfg.get("n_classes"):
        raise DimensionError("output leg extent does not match n_classes")
    widest = max(max(np.shape(t)[0], np.shape(t)[-1]) for t in model.tensors[1:-1]) \
        if model.n_sites > 2 else 0
    if model.n_sites > 2 and widest > cfg.get("bond_dim", widest):
        raise DimensionError("bond extents exceed the configured bond dimension")
