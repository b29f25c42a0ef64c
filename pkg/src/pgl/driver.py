"""Run orchestration: source pre-training, PGL, SF-PGL and evaluation.

Every public entry point takes a :class:`RunConfig`. Datasets may be passed
in directly; otherwise they are read from the paths in the config. Runs that
set ``run_dir`` leave behind::

    config.txt          snapshot of the effective config
    metrics.log         step<TAB>loss<TAB>value lines
    pseudo/step_<m>.tsv pseudo-label snapshots
    model.ckpt          final (or pre-trained) parameters
    report.txt          flat key = value metrics
    reliability.csv     calibration bins
    predictions.tsv     id, truth, prediction, confidence per target sample
"""
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import diagnostics
from .data import Dataset, FeatureRecord, OpenSetSplit, UNLABELED, load_feature_file, load_truth_file
from .episodic import build_batch_initial, build_batch_mixup, build_batch_sfpgl, episodes_to_batch
from .gnn import GraphBatch, ModelBundle, ModelConfig, forward_graph, load_checkpoint, read_checkpoint, save_checkpoint
from .losses import (EdgeTruth, LossWeights, adversarial_loss, edge_bce_loss, entropy_loss,
                     focal_node_loss, pretrain_ce_loss, total_objective, weighted_node_loss)
from .metrics import full_report, reliability_csv
from .optim import AdamState, adam_step
from .pseudolabel import (PseudoLabelState, balanced_select, finalize_predictions, global_rank_select,
                          snapshot_lines)

logger = logging.getLogger("pgl")

MODES = ("pgl", "sfpgl", "pretrain", "eval")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "pgl"
    source_path: str = ""
    target_path: str = ""
    truth_path: str = ""
    labeled_target_path: str = ""
    checkpoint: str = ""
    run_dir: str = ""
    C: int = 0
    alpha: float = 0.05
    beta: float = 0.6
    mu: float = 0.3
    gamma_adv: float = 0.4
    rho: float = 2.0
    entropy_coeff: float = 0.0
    grl_scale: float = 1.0
    standard_minimax: bool = False
    lr_backbone: float = 1e-5
    lr_gnn: float = 1e-4
    lr_classifier: float = 1e-4
    lr_discriminator: float = 1e-4
    weight_decay: float = 5e-5
    lr_decay: float = 0.5
    lr_decay_every: int = 4
    depth: int = 1
    hidden: int = 256
    edge_hidden: int = 0
    disc_hidden: int = 0
    dropout: float = 0.2
    slope: float = 0.01
    batch_size: int = 4
    epochs_per_step: int = 10
    iters_per_epoch: int = 0
    pretrain_epochs: int = 20
    pretrain_batch: int = 32
    stop_step: int = 0
    balanced: bool = True
    freeze_labels: bool = False
    mask_unknown_pairs: bool = True
    ece_bins: int = 10
    seed: int = 0

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("alpha must lie in (0, 1]")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError("beta must lie in (0, 1)")
        for name in ("mu", "gamma_adv", "rho", "entropy_coeff", "grl_scale", "weight_decay",
                     "lr_backbone", "lr_gnn", "lr_classifier", "lr_discriminator"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        for name in ("depth", "hidden", "batch_size", "epochs_per_step", "lr_decay_every", "ece_bins"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.stop_step < 0 or self.iters_per_epoch < 0:
            raise ConfigError("stop_step and iters_per_epoch must be >= 0")
        return self

    def require(self, *names):
        missing = [n for n in names if not getattr(self, n)]
        if missing:
            raise ConfigError(f"mode {self.mode} needs {', '.join(missing)}")

    @property
    def loss_weights(self):
        return LossWeights(self.mu, self.gamma_adv, self.rho, self.entropy_coeff)

    @property
    def steps(self):
        M = max(1, round(1.0 / self.alpha))
        return min(M, self.stop_step) if self.stop_step else M

    def adam(self):
        return AdamState(base_lr={"backbone": self.lr_backbone, "gnn": self.lr_gnn,
                                  "classifier": self.lr_classifier,
                                  "discriminator": self.lr_discriminator},
                         weight_decay=self.weight_decay, decay_factor=self.lr_decay,
                         decay_every=self.lr_decay_every)

    def model_config(self, in_dim):
        return ModelConfig(in_dim=in_dim, n_classes=self.C, hidden=self.hidden,
                           edge_hidden=self.edge_hidden, disc_hidden=self.disc_hidden,
                           depth=self.depth, dropout=self.dropout, slope=self.slope)

    def to_text(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _coerce(ftype, raw):
    if ftype in (bool, "bool"):
        if isinstance(raw, bool):
            return raw
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    conv = {int: int, "int": int, float: float, "float": float}.get(ftype, str)
    try:
        return conv(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {conv.__name__}") from None


def config_from_mapping(values, base=None):
    base = base or RunConfig()
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    kw = {}
    for k, v in values.items():
        key = k.replace("-", "_")
        if key not in types:
            raise ConfigError(f"unknown config key {k!r}")
        kw[key] = _coerce(types[key], v)
    return dataclasses.replace(base, **kw)


def parse_config_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def load_config(path, overrides=None):
    with open(path, encoding="utf-8") as fh:
        values = parse_config_text(fh.read())
    values.update(overrides or {})
    return config_from_mapping(values)


# ---------------------------------------------------------------- run output

@dataclass
class RunResult:
    model: ModelBundle
    state: PseudoLabelState = None
    report: object = None
    predictions: np.ndarray = None
    confidences: np.ndarray = None
    probs: np.ndarray = None
    logs: list = field(default_factory=list)


class RunWriter:
    """Collects metric lines and writes run artifacts when ``run_dir`` is set."""

    def __init__(self, run_dir):
        self.run_dir = run_dir
        self.lines = []
        if run_dir:
            os.makedirs(os.path.join(run_dir, "pseudo"), exist_ok=True)

    def path(self, *parts):
        return os.path.join(self.run_dir, *parts)

    def log(self, step, name, value):
        self.lines.append(f"{step}\t{name}\t{float(value)!r}")

    def write(self, name, text):
        if self.run_dir:
            with open(self.path(name), "w", encoding="utf-8") as fh:
                fh.write(text)

    def close(self):
        self.write("metrics.log", "".join(line + "\n" for line in self.lines))


def prediction_dump(ids, truth, predictions, confidences):
    lines = ["# id\ttruth\tprediction\tconfidence"]
    for i, t, p, c in zip(ids, truth, predictions, confidences):
        lines.append(f"{i}\t{int(t)}\t{int(p)}\t{float(c)!r}")
    return "\n".join(lines) + "\n"


def report_from_dump(text, C, n_bins=10):
    """Recompute a full metrics report from a prediction dump."""
    truth, pred, conf = [], [], []
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        _, t, p, c = line.split("\t")
        truth.append(int(t))
        pred.append(int(p))
        conf.append(float(c))
    return full_report(pred, truth, conf, C, n_bins)


def _finish(writer, result, ids, truth, config):
    if truth is not None:
        result.report = full_report(result.predictions, truth, result.confidences, config.C,
                                    config.ece_bins)
        writer.write("report.txt", result.report.to_text())
        writer.write("reliability.csv", reliability_csv(result.report.bins))
        writer.write("predictions.tsv", prediction_dump(ids, truth, result.predictions,
                                                        result.confidences))
    writer.close()
    result.logs = writer.lines
    return result


# ---------------------------------------------------------------- data

def _strip_target(records):
    return Dataset(FeatureRecord(r.id, "target", UNLABELED, r.features) for r in records)


def prepare_source(records, split):
    split.check_source(records)
    return Dataset(FeatureRecord(r.id, r.domain, split.map(r.label), r.features) for r in records)


def load_target(config, split=None):
    """Target records (labels stripped) and open-set truth, touching only target files."""
    config.require("target_path")
    records = load_feature_file(config.target_path)
    truth = None
    if config.truth_path:
        table = load_truth_file(config.truth_path)
        try:
            truth = np.array([table[r.id] for r in records], dtype=int)
        except KeyError as e:
            raise ConfigError(f"truth file lacks id {e.args[0]}") from None
    elif split is not None and records and all(r.labeled for r in records):
        truth = split.map_many([r.label for r in records])
    return _strip_target(records), truth


def load_source(config):
    config.require("source_path")
    records = load_feature_file(config.source_path)
    split = OpenSetSplit.from_labels([r.label for r in records], config.C)
    return prepare_source(records, split), split


def _labeled_target(config, split):
    if not config.labeled_target_path:
        return None
    recs = load_feature_file(config.labeled_target_path)
    return [FeatureRecord(r.id, "target", split.map(r.label), r.features) for r in recs
            if r.labeled and split.map(r.label) < config.C]


# ---------------------------------------------------------------- training pieces

def _rngs(seed):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def iterations_per_epoch(config, n_target):
    if config.iters_per_epoch:
        return config.iters_per_epoch
    return max(1, math.ceil(n_target / (config.batch_size * config.C)))


def train_step(model, adam, batch, config, mode, epoch, rng, class_w=None, groups=None):
    """One optimizer step on one graph batch; returns the loss parts as floats."""
    weights = config.loss_weights
    out = forward_graph(batch, model, training=True, rng=rng, grl_scale=config.grl_scale,
                        with_domain=(mode == "pgl"))
    mask = batch.labeled_mask
    if mode == "pgl":
        node = focal_node_loss(out.class_probs, batch.labels, mask, weights.rho)
    else:
        node = weighted_node_loss(out.class_probs, batch.labels, mask, class_w)
    truth = EdgeTruth.from_labels(batch.labels, unknown_label=config.C,
                                  include_unknown_pairs=not config.mask_unknown_pairs)
    parts = {"node": node, "edge": edge_bce_loss(out.state.edge_matrices, truth)}
    if mode == "pgl":
        adv = adversarial_loss(out.domain_probs, batch.domain)
        # standard_minimax: D ascends the log-likelihood (descends the domain BCE)
        parts["adv"] = -adv if config.standard_minimax else adv
    elif weights.entropy_coeff:
        parts["entropy"] = entropy_loss(ad.take(out.class_probs[-1], np.flatnonzero(~mask)))
    total = total_objective(parts, weights, mode)
    model.params.zero_grad()
    ad.backward(total)
    adam_step(model.params, adam, epoch, groups=groups)
    values = {k: ad.as_tensor(v).item() for k, v in parts.items()}
    values["total"] = total.item()
    return values


def _support_pools(pools, C):
    return {c: [r.features for r in pools.get(c, [])] for c in range(C)}


def score_target(model, X, config, support=None, use_graph=True, seed=0):
    """Class probabilities for every target row.

    With ``use_graph`` the target is processed in chunks of ``B*C`` nodes,
    each joined in one graph with ``B`` support nodes per class drawn from
    ``support`` (class -> feature vectors), and the last GNN layer is read.
    Without it, the classifier reads the backbone embedding directly.
    """
    X = np.asarray(X, dtype=np.float64)
    if not use_graph:
        return model.classify(model.backbone(X)).data
    rng = np.random.default_rng(seed)
    chunk = config.batch_size * config.C
    classes = [c for c in range(config.C) if support and support.get(c)]
    probs = np.empty((X.shape[0], config.C))
    for start in range(0, X.shape[0], chunk):
        rows = X[start:start + chunk]
        sup = []
        for c in classes:
            pool = support[c]
            sup += [pool[int(k)] for k in rng.integers(len(pool), size=config.batch_size)]
        nodes = np.vstack([np.array(sup).reshape(-1, X.shape[1]), rows]) if sup else rows
        out = forward_graph(GraphBatch(nodes, np.full(len(nodes), -1), np.ones(len(nodes), int)),
                            model, training=False, with_domain=False)
        probs[start:start + len(rows)] = out.class_probs[-1].data[len(sup):]
    return probs


def _pseudo_pools(state, target):
    pools = {c: [] for c in range(state.C)}
    for i in sorted(state.known):
        pools[state.known[i]].append(target[i])
    return pools


def _write_snapshot(writer, state, conf, ids):
    writer.write(os.path.join("pseudo", f"step_{state.m}.tsv"),
                 "".join(line + "\n" for line in snapshot_lines(state, conf, ids)))


def _run_epochs(model, adam, config, mode, make_batch, writer, tag, n_target, rng_sample,
                rng_drop, class_w=None, groups=None, epochs=None):
    iters = iterations_per_epoch(config, n_target)
    for epoch in range(config.epochs_per_step if epochs is None else epochs):
        sums = {}
        for _ in range(iters):
            batch = episodes_to_batch(make_batch(rng_sample))
            vals = train_step(model, adam, batch, config, mode, epoch, rng_drop, class_w, groups)
            for k, v in vals.items():
                sums[k] = sums.get(k, 0.0) + v
        for k, v in sums.items():
            writer.log(f"{tag}.{epoch}", k, v / iters)


# ---------------------------------------------------------------- entry points

def pretrain_source(config, source=None, checkpoint_path=None):
    """Train backbone + classifier on labeled source data with cross-entropy.

    Returns the model; writes a checkpoint holding only the backbone and
    classifier groups to ``checkpoint_path`` (default ``run_dir/model.ckpt``).
    """
    config.validate()
    if source is None:
        source, _ = load_source(config)
    rng_init, rng_sample, _, _ = _rngs(config.seed)
    model = ModelBundle(config.model_config(source.dim), seed=int(rng_init.integers(2**31)))
    adam = config.adam()
    X, y = source.X, source.labels
    writer = RunWriter(config.run_dir)
    groups = ("backbone", "classifier")
    for epoch in range(config.pretrain_epochs):
        order = rng_sample.permutation(len(y))
        total = 0.0
        nb = 0
        for start in range(0, len(y), config.pretrain_batch):
            idx = order[start:start + config.pretrain_batch]
            loss = pretrain_ce_loss(model.classify(model.backbone(X[idx])), y[idx])
            model.params.zero_grad()
            ad.backward(loss)
            adam_step(model.params, adam, epoch, groups=groups)
            total += loss.item()
            nb += 1
        writer.log(f"pretrain.{epoch}", "ce", total / nb)
    path = checkpoint_path or (writer.path("model.ckpt") if config.run_dir else None)
    if path:
        save_checkpoint(path, model, groups=groups, meta={"stage": "pretrain"})
    writer.write("config.txt", config.to_text())
    writer.close()
    return model


def source_only_baseline(config, source, target, truth):
    """Pre-train on source, then split the target at ``beta`` by confidence rank."""
    model = pretrain_source(config.replace(run_dir=""), source)
    probs = score_target(model, target.X, config, use_graph=False)
    conf, pred = probs.max(axis=1), probs.argmax(axis=1)
    state = PseudoLabelState(config.alpha, config.beta, config.C)
    result = RunResult(model, state, predictions=finalize_predictions(state, conf, pred, target.ids),
                       confidences=conf, probs=probs)
    return _finish(RunWriter(""), result, target.ids, truth, config)


def train_pgl(config, source=None, target=None, truth=None, labeled_target=None, on_step=None):
    """Progressive graph learning: episodic training alternated with global-rank pseudo-labeling.

    ``on_step(state, probs)`` is called after every pseudo-labeling step.
    """
    config.validate()
    if config.C < 2:
        raise ConfigError("C must be >= 2")
    if source is None:
        source, split = load_source(config)
        target, truth = load_target(config, split)
        labeled_target = _labeled_target(config, split)
    if target.dim != source.dim:
        raise ConfigError("source and target feature dimensions differ")
    rng_init, rng_sample, rng_drop, _ = _rngs(config.seed)
    model = ModelBundle(config.model_config(source.dim), seed=int(rng_init.integers(2**31)))
    adam = config.adam()
    writer = RunWriter(config.run_dir)
    writer.write("config.txt", config.to_text())
    state = PseudoLabelState(config.alpha, config.beta, config.C, freeze=config.freeze_labels)
    ids, n_t, C, B = target.ids, len(target), config.C, config.batch_size
    source_pools = _support_pools(source.by_class(), C)
    pseudo = {c: [] for c in range(C)}
    conf = pred = probs = None

    for m in range(config.steps):
        if m == 0:
            def make(rng):
                return build_batch_initial(source, target, C, B, rng, labeled_target)
        else:
            def make(rng, m=m, pseudo=pseudo):
                return build_batch_mixup(source, pseudo, target, C, B, m, config.alpha, rng,
                                         labeled_target)
        _run_epochs(model, adam, config, "pgl", make, writer, f"step{m}", n_t, rng_sample, rng_drop)
        probs = score_target(model, target.X, config, support=source_pools, seed=config.seed + m)
        conf, pred = probs.max(axis=1), probs.argmax(axis=1)
        global_rank_select(conf, pred, state, ids)
        _write_snapshot(writer, state, conf, ids)
        pseudo = _pseudo_pools(state, target)
        if on_step:
            on_step(state, probs)
        logger.info("pgl step %d/%d: %d known, %d unknown", state.m, config.steps,
                    len(state.known), len(state.unknown))

    if config.run_dir:
        save_checkpoint(writer.path("model.ckpt"), model, meta={"stage": "pgl"})
    result = RunResult(model, state, predictions=finalize_predictions(state, conf, pred, ids),
                       confidences=conf, probs=probs)
    return _finish(writer, result, ids, truth, config)


def train_sfpgl(config, checkpoint, target=None, truth=None, on_step=None):
    """Source-free adaptation from a pre-trained checkpoint.

    Only the target data and the checkpoint are read. Each step scores the
    target, refills the pseudo-label banks and trains on target-only episodes
    with class-importance-weighted node loss.
    """
    config.validate()
    if target is None:
        target, truth = load_target(config)
    meta, _ = read_checkpoint(checkpoint)
    mcfg = meta["model"]
    if mcfg["in_dim"] != target.dim:
        raise ConfigError(f"checkpoint expects dim {mcfg['in_dim']}, target has {target.dim}")
    if mcfg["n_classes"] != config.C:
        raise ConfigError(f"checkpoint has {mcfg['n_classes']} classes, config C={config.C}")
    rng_init, rng_sample, rng_drop, _ = _rngs(config.seed)
    model, _ = load_checkpoint(checkpoint, seed=int(rng_init.integers(2**31)),
                               depth=config.depth, dropout=config.dropout, slope=config.slope)
    adam = config.adam()
    writer = RunWriter(config.run_dir)
    writer.write("config.txt", config.to_text())
    state = PseudoLabelState(config.alpha, config.beta, config.C)
    ids, n_t, C, B = target.ids, len(target), config.C, config.batch_size
    groups = ("backbone", "gnn", "classifier")
    select = balanced_select if config.balanced else global_rank_select
    pseudo = {}

    def weights_of(st):
        return st.weights if config.balanced else np.full(C, 1.0 / C)

    for m in range(config.steps):
        probs = score_target(model, target.X, config, support=_support_pools(pseudo, C),
                             use_graph=m > 0, seed=config.seed + m)
        conf, pred = probs.max(axis=1), probs.argmax(axis=1)
        select(conf, pred, state, ids)
        _write_snapshot(writer, state, conf, ids)
        pseudo = _pseudo_pools(state, target)
        if on_step:
            on_step(state, probs)
        w = weights_of(state)
        for c in range(C):
            writer.log(f"step{m}", f"class_weight_{c}", w[c])
        logger.info("sfpgl step %d/%d: %d known, %d unknown", state.m, config.steps,
                    len(state.known), len(state.unknown))

        def make(rng, pseudo=pseudo):
            return build_batch_sfpgl(pseudo, target, C, B, rng)
        _run_epochs(model, adam, config, "sfpgl", make, writer, f"step{m}", n_t, rng_sample,
                    rng_drop, class_w=w, groups=groups)

    # final labeling with the adapted model at the last step's quota
    probs = score_target(model, target.X, config, support=_support_pools(pseudo, C),
                         seed=config.seed + config.steps)
    conf, pred = probs.max(axis=1), probs.argmax(axis=1)
    state.m -= 1
    select(conf, pred, state, ids)
    if config.run_dir:
        save_checkpoint(writer.path("model.ckpt"), model, groups=groups, meta={"stage": "sfpgl"})
    result = RunResult(model, state, predictions=finalize_predictions(state, conf, pred, ids),
                       confidences=conf, probs=probs)
    return _finish(writer, result, ids, truth, config)


def evaluate(checkpoint, config, target=None, truth=None, support=None):
    """Score a checkpoint on a target set with known truth.

    Predictions split the target at ``beta`` by confidence rank. Checkpoints
    with GNN parameters score through target graphs, optionally joined with
    ``support`` (class -> feature vectors).
    """
    config.validate()
    if target is None:
        target, truth = load_target(config)
    if truth is None:
        raise ConfigError("evaluation needs truth labels")
    meta, arrays = read_checkpoint(checkpoint)
    model, _ = load_checkpoint(checkpoint, seed=config.seed)
    has_gnn = any(g == "gnn" for g, _ in arrays.values())
    cfg = config.replace(C=meta["model"]["n_classes"])
    probs = score_target(model, target.X, cfg, support=support, use_graph=has_gnn, seed=config.seed)
    conf, pred = probs.max(axis=1), probs.argmax(axis=1)
    state = PseudoLabelState(cfg.alpha, cfg.beta, cfg.C)
    result = RunResult(model, state, predictions=finalize_predictions(state, conf, pred, target.ids),
                       confidences=conf, probs=probs)
    return _finish(RunWriter(config.run_dir), result, target.ids, truth, cfg)
