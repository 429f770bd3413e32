"""Stage plans: serial transfer across datasets, then classifier retraining.

A plan is an ordered list of stages.  Each stage trains the network on one
dataset (full network or only the final classifier), keeps the parameters
from the epoch with the lowest validation loss, and hands them to the
stages that name it in ``init_from``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import statistics
import zlib
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BUILTIN_DATASETS, AugmentOps, Dataset, SpecError, augment_batch, builtin_dataset, load_dataset, make_rng, stratified_split
from .losses import DEFAULT_BETA, ClassWeights, cbce_loss, ce_loss, class_balanced_weights, per_sample_ce
from .metrics import MetricsReport, confusion_matrix, metrics_report, recall
from .model import (
    Checkpoint,
    LayerSpec,
    Network,
    apply_checkpoint,
    build_network,
    default_layers,
    ensemble_checkpoints,
    freeze_all_except,
    load_checkpoint,
    reinit_layer,
    save_checkpoint,
    state_digest,
)

log = logging.getLogger(__name__)

SCOPES = ("all", "final_classifier_only")
# What the bundled plans use for every stage.
DEFAULT_AUGMENTATION = ("hflip", "vflip", "rot90", "jitter:0.05")


class PlanError(ValueError):
    pass


# --------------------------------------------------------------------------
# Specs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LossSpec:
    kind: str = "ce"
    beta: float = DEFAULT_BETA
    normalize: bool = True

    def to_dict(self) -> dict:
        if self.kind == "ce":
            return {"kind": "ce"}
        return {"kind": self.kind, "beta": self.beta, "normalize": self.normalize}

    @classmethod
    def parse(cls, raw) -> "LossSpec":
        if isinstance(raw, LossSpec):
            return raw
        if isinstance(raw, str):
            raw = {"kind": raw}
        if not isinstance(raw, dict):
            raise SpecError("loss", f"expected an object or 'ce'/'cbce', got {raw!r}")
        kind = raw.get("kind")
        if kind not in ("ce", "cbce"):
            raise SpecError("loss.kind", f"must be 'ce' or 'cbce', got {kind!r}")
        beta = raw.get("beta", DEFAULT_BETA)
        if isinstance(beta, bool) or not isinstance(beta, (int, float)) or not 0.0 <= beta <= 1.0:
            raise SpecError("loss.beta", f"must be a number in [0, 1], got {beta!r}")
        extra = set(raw) - {"kind", "beta", "normalize"}
        if extra:
            raise SpecError(f"loss.{sorted(extra)[0]}", "unknown field")
        return cls(kind, float(beta), bool(raw.get("normalize", True)))


@dataclass(frozen=True)
class StageSpec:
    name: str
    dataset: str
    epochs: int = 1
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 8
    loss: LossSpec = LossSpec()
    trainable_scope: str = "all"
    reinit_final: bool = False
    init_from: str | None = None
    augmentation: tuple[str, ...] = ()
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "loss", LossSpec.parse(self.loss))
        object.__setattr__(self, "augmentation", tuple(self.augmentation))
        self.validate()

    def validate(self) -> None:
        where = f"stages[{self.name}]"
        if not isinstance(self.name, str) or not self.name:
            raise SpecError("name", "stage name must be a non-empty string")
        if not isinstance(self.dataset, str) or not self.dataset:
            raise SpecError(f"{where}.dataset", "must be a dataset reference string")
        if isinstance(self.epochs, bool) or not isinstance(self.epochs, int) or self.epochs < 1:
            raise SpecError(f"{where}.epochs", f"must be an integer >= 1, got {self.epochs!r}")
        if isinstance(self.batch_size, bool) or not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise SpecError(f"{where}.batch_size", f"must be an integer >= 1, got {self.batch_size!r}")
        if not isinstance(self.learning_rate, (int, float)) or not self.learning_rate > 0:
            raise SpecError(f"{where}.learning_rate", f"must be > 0, got {self.learning_rate!r}")
        if not isinstance(self.momentum, (int, float)) or not 0.0 <= self.momentum < 1.0:
            raise SpecError(f"{where}.momentum", f"must lie in [0, 1), got {self.momentum!r}")
        if self.trainable_scope not in SCOPES:
            raise SpecError(f"{where}.trainable_scope", f"must be one of {SCOPES}, got {self.trainable_scope!r}")
        if not isinstance(self.reinit_final, bool):
            raise SpecError(f"{where}.reinit_final", "must be true or false")
        if self.init_from is not None and (not isinstance(self.init_from, str) or not self.init_from):
            raise SpecError(f"{where}.init_from", "must be null or a stage/checkpoint reference")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise SpecError(f"{where}.seed", f"must be a nonnegative integer, got {self.seed!r}")
        if not isinstance(self.val_fraction, (int, float)) or not 0.0 < self.val_fraction < 1.0:
            raise SpecError(f"{where}.val_fraction", f"must lie in (0, 1), got {self.val_fraction!r}")
        try:
            AugmentOps.parse(self.augmentation)
        except SpecError as exc:
            raise SpecError(f"{where}.augmentation", str(exc)) from None

    @property
    def augment_ops(self) -> AugmentOps:
        return AugmentOps.parse(self.augmentation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d["augmentation"] = list(self.augmentation)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "StageSpec":
        if not isinstance(raw, dict):
            raise SpecError("stages", f"each stage must be an object, got {raw!r}")
        known = {f for f in cls.__dataclass_fields__}
        for key in raw:
            if key not in known:
                raise SpecError(f"stages[{raw.get('name', '?')}].{key}", "unknown field")
        for key in ("name", "dataset"):
            if key not in raw:
                raise SpecError(f"stages[{raw.get('name', '?')}].{key}", "required field missing")
        kwargs = dict(raw)
        if "augmentation" in kwargs and not isinstance(kwargs["augmentation"], list):
            raise SpecError(f"stages[{raw['name']}].augmentation", "must be a list of op names")
        return cls(**kwargs)


def classifier_stage_spec(dataset: str = "synth-small", init_from: str | None = None, *, name: str = "classifier",
                          epochs: int = 30, learning_rate: float = 0.05, beta: float = DEFAULT_BETA,
                          **overrides) -> StageSpec:
    """Frozen-backbone head retraining with class-balanced CE."""
    overrides.setdefault("augmentation", DEFAULT_AUGMENTATION)
    return StageSpec(name=name, dataset=dataset, epochs=epochs, learning_rate=learning_rate,
                     loss=LossSpec("cbce", beta), trainable_scope="final_classifier_only",
                     reinit_final=True, init_from=init_from, **overrides)


@dataclass(frozen=True)
class EnsembleSpec:
    name: str
    sources: tuple[str, ...]
    mode: str = "average"

    @classmethod
    def from_dict(cls, raw: dict) -> "EnsembleSpec":
        if not isinstance(raw, dict) or "name" not in raw or "sources" not in raw:
            raise SpecError("ensembles", "each ensemble needs 'name' and 'sources'")
        extra = set(raw) - {"name", "sources", "mode"}
        if extra:
            raise SpecError(f"ensembles[{raw['name']}].{sorted(extra)[0]}", "unknown field")
        mode = raw.get("mode", "average")
        if mode not in ("sum", "average"):
            raise SpecError(f"ensembles[{raw['name']}].mode", f"must be 'sum' or 'average', got {mode!r}")
        return cls(raw["name"], tuple(raw["sources"]), mode)

    def to_dict(self) -> dict:
        return {"name": self.name, "sources": list(self.sources), "mode": self.mode}


@dataclass(frozen=True)
class StagePlan:
    """Ordered stages plus the dataset the final weights are scored on.

    ``evaluate`` names the stage or ensemble whose weights get scored; it
    defaults to the last stage.
    """

    name: str
    stages: tuple[StageSpec, ...]
    evaluation: str
    ensembles: tuple[EnsembleSpec, ...] = ()
    evaluate: str | None = None
    architecture: tuple[LayerSpec, ...] | None = None
    base_dir: str | None = field(default=None, compare=False)

    def layers(self, num_classes: int, in_channels: int = 1) -> list[LayerSpec]:
        if self.architecture is not None:
            return list(self.architecture)
        return default_layers(num_classes=num_classes, in_channels=in_channels)

    @property
    def target(self) -> str:
        return self.evaluate or self.stages[-1].name

    def to_dict(self) -> dict:
        d: dict = {"name": self.name, "stages": [s.to_dict() for s in self.stages], "evaluation": self.evaluation}
        if self.ensembles:
            d["ensembles"] = [e.to_dict() for e in self.ensembles]
        if self.evaluate is not None:
            d["evaluate"] = self.evaluate
        if self.architecture is not None:
            d["architecture"] = [l.to_dict() for l in self.architecture]
        return d

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str | None = None) -> "StagePlan":
        if not isinstance(raw, dict):
            raise SpecError("plan", "must be a JSON object")
        extra = set(raw) - {"name", "stages", "evaluation", "ensembles", "evaluate", "architecture", "description"}
        if extra:
            raise SpecError(sorted(extra)[0], "unknown field")
        for key in ("stages", "evaluation"):
            if key not in raw:
                raise SpecError(key, "required field missing")
        if not isinstance(raw["stages"], list) or not raw["stages"]:
            raise SpecError("stages", "must be a non-empty list")
        arch = raw.get("architecture")
        try:
            arch_t = tuple(LayerSpec.from_dict(d) for d in arch) if arch else None
        except TypeError as exc:
            raise SpecError("architecture", str(exc)) from None
        return cls(
            name=raw.get("name", "plan"),
            stages=tuple(StageSpec.from_dict(s) for s in raw["stages"]),
            evaluation=raw["evaluation"],
            ensembles=tuple(EnsembleSpec.from_dict(e) for e in raw.get("ensembles", ())),
            evaluate=raw.get("evaluate"),
            architecture=arch_t,
            base_dir=base_dir,
        )


def load_plan(path: str | Path) -> StagePlan:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecError("plan", f"{path.name} is not valid JSON: {exc}") from None
    return StagePlan.from_dict(raw, base_dir=str(path.parent))


def bundled_plan_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("mstl.plans").iterdir() if p.name.endswith(".json"))


def bundled_plan(name: str) -> StagePlan:
    ref = resources.files("mstl.plans") / f"{name}.json"
    return StagePlan.from_dict(json.loads(ref.read_text()))


# --------------------------------------------------------------------------
# Optimizer and stage training
# --------------------------------------------------------------------------

def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
                      velocity: Sequence[np.ndarray], lr: float, momentum: float):
    """Heavy-ball update in place: v <- momentum*v + g, p <- p - lr*v."""
    if not (len(params) == len(grads) == len(velocity)):
        raise ad.ShapeError("params, grads and velocity differ in length")
    for p, g, v in zip(params, grads, velocity):
        if p.shape != v.shape or (g is not None and g.shape != p.shape):
            raise ad.ShapeError(f"shape mismatch in SGD step: {p.shape}, {None if g is None else g.shape}, {v.shape}")
        v *= momentum
        if g is not None:
            v += g
        p -= lr * v
    return params, velocity


@dataclass
class RunRecord:
    stage: str
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int
    best_val_loss: float
    init_digest: str = ""
    best_digest: str = ""
    checkpoint: str | None = None
    class_weights: list[float] | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def best_epoch(val_losses: Sequence[float]) -> int:
    """1-based index of the lowest loss; the earliest epoch wins ties."""
    if not val_losses:
        raise ValueError("no validation losses recorded")
    best = 0
    for i, v in enumerate(val_losses):
        if v < val_losses[best]:
            best = i
    return best + 1


def _stage_weights(spec: StageSpec, train_ds: Dataset) -> ClassWeights | None:
    if spec.loss.kind != "cbce":
        return None
    return class_balanced_weights(train_ds.class_counts(), spec.loss.beta, normalize=spec.loss.normalize)


def dataset_loss(net: Network, ds: Dataset, weights: ClassWeights | None = None) -> float:
    """Stage loss over a whole dataset without touching parameters."""
    if len(ds) == 0:
        raise ValueError(f"dataset {ds.name!r} is empty")
    ce = per_sample_ce(net.predict(ds.images), ds.labels)
    if weights is None:
        return float(ce.mean())
    w = weights.as_array()[ds.labels]
    return float((w * ce).sum() / w.sum())


def train_stage(net: Network, train_ds: Dataset, val_ds: Dataset, spec: StageSpec,
                seed=0) -> tuple[Checkpoint, RunRecord]:
    """Minibatch SGD for ``spec.epochs``; ``net`` ends at the best-validation weights."""
    if len(train_ds) == 0:
        raise ValueError(f"training set {train_ds.name!r} is empty")
    if len(val_ds) == 0:
        raise ValueError(f"validation set {val_ds.name!r} is empty")
    if train_ds.num_classes != net.num_classes:
        raise PlanError(f"stage {spec.name!r}: dataset has {train_ds.num_classes} classes, network {net.num_classes}")
    rng = make_rng(seed)
    weights = _stage_weights(spec, train_ds)
    ops = spec.augment_ops
    params = net.trainable_parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    init_digest = state_digest(net.state())
    n = len(train_ds)
    train_hist, val_hist = [], []
    best_state, best_loss = None, math.inf

    for epoch in range(1, spec.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            images = train_ds.images[idx]
            if ops.active:
                images = augment_batch(images, ops, rng)
            labels = train_ds.labels[idx]
            logits = net.forward(Tensor(images))
            if weights is None:
                loss = ce_loss(logits, labels)
            else:
                loss = cbce_loss(logits, labels, weights)
            net.zero_grad()
            ad.backward(loss)
            sgd_momentum_step([p.data for p in params], [p.grad for p in params], velocity,
                              spec.learning_rate, spec.momentum)
            total += loss.item() * len(idx)
        train_hist.append(total / n)
        val = dataset_loss(net, val_ds, weights)
        val_hist.append(val)
        if val < best_loss:
            best_loss, best_state = val, net.state()
        log.debug("stage %s epoch %d train %.4f val %.4f", spec.name, epoch, train_hist[-1], val)

    for name, arrays in best_state.items():
        for p, a in zip(net.params[name], arrays):
            p.data = a
    net.zero_grad()
    chosen = best_epoch(val_hist)
    record = RunRecord(
        stage=spec.name,
        train_loss=train_hist,
        val_loss=val_hist,
        best_epoch=chosen,
        best_val_loss=val_hist[chosen - 1],
        init_digest=init_digest,
        best_digest=state_digest(net.state()),
        class_weights=list(weights.weights) if weights is not None else None,
    )
    ckpt = Checkpoint.from_network(net, stage=spec.name, epoch=chosen, val_loss=record.best_val_loss,
                                   seed=list(seed) if isinstance(seed, (list, tuple)) else seed)
    return ckpt, record


def classifier_stage(ckpt: Checkpoint, train_ds: Dataset, val_ds: Dataset, spec: StageSpec,
                     seed=0, layers: Sequence[LayerSpec] | None = None) -> tuple[Checkpoint, RunRecord]:
    """Retrain only a freshly initialized final classifier on top of ``ckpt``."""
    if spec.trainable_scope != "final_classifier_only":
        raise PlanError(f"stage {spec.name!r}: classifier stage requires trainable_scope=final_classifier_only")
    net = build_network(layers, seed=0) if layers is not None else ckpt.to_network()
    apply_checkpoint(net, ckpt)
    head = net.final_classifier
    freeze_all_except(net, head)
    if spec.reinit_final:
        reinit_layer(net, head, seed=[*_as_list(seed), 0xF1])
    return train_stage(net, train_ds, val_ds, spec, seed=seed)


def _as_list(seed) -> list[int]:
    return list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]


# --------------------------------------------------------------------------
# Plan execution
# --------------------------------------------------------------------------

def _is_builtin(ref: str) -> bool:
    return not ref.startswith("file:")


def _ref_path(plan: StagePlan, ref: str) -> Path:
    path = Path(ref[len("file:"):])
    if not path.is_absolute() and plan.base_dir:
        path = Path(plan.base_dir) / path
    return path


def validate_plan(plan: StagePlan) -> None:
    """Resolve every reference; raises before any training happens."""

    def check_dataset(ref: str, where: str) -> None:
        if _is_builtin(ref):
            if ref not in BUILTIN_DATASETS:
                raise PlanError(f"{where}: unknown dataset {ref!r} (builtins: {sorted(BUILTIN_DATASETS)})")
        elif not _ref_path(plan, ref).is_file():
            raise PlanError(f"{where}: dataset file {_ref_path(plan, ref)} not found")

    produced: set[str] = set()
    ensembles = {e.name: e for e in plan.ensembles}
    ready_ensembles: set[str] = set()

    def refresh_ensembles() -> None:
        for e in plan.ensembles:
            if e.name not in ready_ensembles and all(s in produced for s in e.sources):
                ready_ensembles.add(e.name)

    names = [s.name for s in plan.stages] + list(ensembles)
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise PlanError(f"duplicate stage/ensemble names: {dupes}")
    for e in plan.ensembles:
        if len(e.sources) < 2:
            raise PlanError(f"ensemble {e.name!r} needs at least two sources")
        for s in e.sources:
            if s not in {st.name for st in plan.stages}:
                raise PlanError(f"ensemble {e.name!r}: unknown source stage {s!r}")
    for stage in plan.stages:
        check_dataset(stage.dataset, f"stage {stage.name!r}")
        ref = stage.init_from
        if ref is not None:
            if ref.startswith("file:"):
                if not _ref_path(plan, ref).is_file():
                    raise PlanError(f"stage {stage.name!r}: checkpoint {_ref_path(plan, ref)} not found")
            elif ref not in produced and ref not in ready_ensembles:
                raise PlanError(f"stage {stage.name!r}: init_from {ref!r} is not an earlier stage or ensemble")
        if stage.trainable_scope == "final_classifier_only" and ref is None:
            raise PlanError(f"stage {stage.name!r}: classifier-only training needs init_from")
        produced.add(stage.name)
        refresh_ensembles()
    check_dataset(plan.evaluation, "evaluation")
    if plan.target not in produced and plan.target not in ready_ensembles:
        raise PlanError(f"evaluate: {plan.target!r} is not a stage or ensemble of this plan")


@dataclass
class PlanResult:
    plan: str
    seed: int
    records: list[RunRecord]
    checkpoints: dict[str, Checkpoint]
    metrics: MetricsReport

    def to_dict(self) -> dict:
        return {"plan": self.plan, "seed": self.seed, "stages": [r.to_dict() for r in self.records],
                "metrics": self.metrics.to_dict()}


class _Context:
    """Datasets and splits for one run seed, generated once."""

    def __init__(self, plan: StagePlan, seed: int):
        self.plan = plan
        self.seed = seed
        self._datasets: dict[str, Dataset] = {}
        self._splits: dict[str, tuple[Dataset, Dataset]] = {}

    def dataset(self, ref: str) -> Dataset:
        if ref not in self._datasets:
            if _is_builtin(ref):
                self._datasets[ref] = builtin_dataset(ref, self.seed)
            else:
                self._datasets[ref] = load_dataset(_ref_path(self.plan, ref))
        return self._datasets[ref]

    def split(self, ref: str, fraction: float) -> tuple[Dataset, Dataset]:
        key = f"{ref}@{fraction!r}"
        if key not in self._splits:
            self._splits[key] = stratified_split(self.dataset(ref), fraction, seed=[self.seed, zlib.crc32(ref.encode())])
        return self._splits[key]


def _stage_key(plan: StagePlan, stage: StageSpec, parent_key: str | None, seed: int) -> str:
    arch = [l.to_dict() for l in plan.architecture] if plan.architecture else None
    return json.dumps([seed, arch, stage.to_dict(), parent_key], sort_keys=True)


def _evaluate(net: Network, ds: Dataset) -> MetricsReport:
    preds = net.predict(ds.images).argmax(axis=1)
    return metrics_report(confusion_matrix(ds.labels, preds, ds.num_classes))


def run_plan(plan: StagePlan, seed: int = 0, out_dir: str | Path | None = None,
             cache: dict | None = None) -> PlanResult:
    """Run every stage in order and score the target weights on ``plan.evaluation``.

    ``cache`` may be shared between calls: a stage whose full ancestry and
    seed match an earlier run is reused instead of retrained.
    """
    validate_plan(plan)
    ctx = _Context(plan, seed)
    num_classes = ctx.dataset(plan.stages[0].dataset).num_classes
    in_channels = ctx.dataset(plan.stages[0].dataset).image_shape[0]
    layers = plan.layers(num_classes, in_channels)
    input_shape = ctx.dataset(plan.stages[0].dataset).image_shape

    ckpts: dict[str, Checkpoint] = {}
    keys: dict[str, str] = {}
    records: list[RunRecord] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def build_ensembles() -> None:
        for e in plan.ensembles:
            if e.name not in ckpts and all(s in ckpts for s in e.sources):
                ckpts[e.name] = ensemble_checkpoints([ckpts[s] for s in e.sources], e.mode)
                keys[e.name] = json.dumps([e.to_dict(), [keys[s] for s in e.sources]], sort_keys=True)
                if out is not None:
                    save_checkpoint(ckpts[e.name], out / f"{e.name}.ckpt")

    for index, stage in enumerate(plan.stages):
        ds = ctx.dataset(stage.dataset)
        if ds.num_classes != num_classes:
            raise PlanError(f"stage {stage.name!r}: dataset has {ds.num_classes} classes, plan uses {num_classes}")
        if stage.init_from is None:
            parent_key, init = None, None
        elif stage.init_from.startswith("file:"):
            path = _ref_path(plan, stage.init_from)
            init = load_checkpoint(path)
            parent_key = "file:" + hashlib.sha256(path.read_bytes()).hexdigest()
        else:
            init, parent_key = ckpts[stage.init_from], keys[stage.init_from]
        key = _stage_key(plan, stage, parent_key, seed)
        stage_seed = [seed, stage.seed, zlib.crc32(stage.name.encode())]

        if cache is not None and key in cache:
            ckpt, record = cache[key]
            record = replace(record)
        else:
            train_ds, val_ds = ctx.split(stage.dataset, stage.val_fraction)
            if stage.trainable_scope == "final_classifier_only":
                ckpt, record = classifier_stage(init, train_ds, val_ds, stage, seed=stage_seed, layers=layers)
            else:
                net = build_network(layers, seed=seed, input_shape=input_shape)
                if init is not None:
                    apply_checkpoint(net, init)
                if stage.reinit_final:
                    reinit_layer(net, net.final_classifier, seed=[*stage_seed, 0xF1])
                ckpt, record = train_stage(net, train_ds, val_ds, stage, seed=stage_seed)
            ckpt.metadata["seed"] = seed
            if cache is not None:
                cache[key] = (ckpt, replace(record))
        ckpts[stage.name], keys[stage.name] = ckpt, key
        if out is not None:
            path = out / f"{stage.name}.ckpt"
            save_checkpoint(ckpt, path)
            record.checkpoint = path.name
            (out / f"{stage.name}.json").write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n")
        records.append(record)
        log.info("plan %s seed %d: stage %d/%d %s best epoch %d val %.4f", plan.name, seed, index + 1,
                 len(plan.stages), stage.name, record.best_epoch, record.best_val_loss)
        build_ensembles()

    net = build_network(layers, seed=seed, input_shape=input_shape)
    apply_checkpoint(net, ckpts[plan.target])
    report = _evaluate(net, ctx.dataset(plan.evaluation))
    if out is not None:
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return PlanResult(plan.name, seed, records, ckpts, report)


# --------------------------------------------------------------------------
# Ablation
# --------------------------------------------------------------------------

def _stats(values: Sequence[float]) -> tuple[float, float]:
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


@dataclass
class AblationRow:
    name: str
    runs: list[dict]
    mean_accuracy: float
    std_accuracy: float
    mean_kappa: float
    std_kappa: float

    def to_dict(self) -> dict:
        return asdict(self)

    def kappas(self) -> list[float]:
        return [r["kappa"] for r in self.runs]


@dataclass
class AblationReport:
    rows: list[AblationRow]
    seeds: list[int]

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"seeds": self.seeds, "rows": [r.to_dict() for r in self.rows]}

    def render(self) -> str:
        width = max([len("Method")] + [len(r.name) for r in self.rows])
        lines = [f"{'Method':<{width}}  {'Acc':>15}  {'Kappa':>15}  runs"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.mean_accuracy:.4f} ± {r.std_accuracy:.4f}  "
                         f"{r.mean_kappa:.4f} ± {r.std_kappa:.4f}  {len(r.runs)}")
        return "\n".join(lines)


def ensemble_plans(sources: Sequence[str] = ("synth-large", "synth-medium"), target: str = "synth-small",
                   evaluation: str = "synth-small-test", template: StagePlan | None = None) -> dict[str, StagePlan]:
    """Parallel-transfer variants: sources trained independently from one init,
    merged by sum or average, scored zero-shot and after classifier retraining."""
    template = template or bundled_plan("multistage")
    by_dataset = {s.dataset: s for s in template.stages}
    src_stages = []
    for i, ref in enumerate(sources):
        base = by_dataset.get(ref) or StageSpec(name=f"src{i}", dataset=ref, epochs=4)
        src_stages.append(replace(base, name=f"src{i}", init_from=None))
    out = {}
    for mode in ("sum", "average"):
        ens = EnsembleSpec(f"ensemble_{mode}", tuple(s.name for s in src_stages), mode)
        zero = StagePlan(f"Parallel ensemble ({mode})", tuple(src_stages), evaluation, (ens,), evaluate=ens.name)
        head = classifier_stage_spec(target, init_from=ens.name)
        tuned = StagePlan(f"Parallel ensemble ({mode}) + CBCE loss", tuple(src_stages) + (head,), evaluation, (ens,))
        out[zero.name] = zero
        out[tuned.name] = tuned
    return out


def ablate(plans: Mapping[str, StagePlan] | Iterable[StagePlan], seeds: Sequence[int],
           ensembles: bool = False, cache: dict | None = None) -> AblationReport:
    """Run every plan for every seed; rows sorted by mean kappa (ascending)."""
    if isinstance(plans, Mapping):
        named = list(plans.items())
    else:
        named = [(p.name, p) for p in plans]
    if not named:
        raise PlanError("ablation needs at least one plan")
    if ensembles:
        named += list(ensemble_plans().items())
    evals = {p.evaluation for _, p in named}
    if len(evals) > 1:
        raise PlanError(f"plans disagree on the evaluation dataset: {sorted(evals)}")
    for _, p in named:
        validate_plan(p)
    cache = {} if cache is None else cache
    seeds = sorted(int(s) for s in seeds)
    rows = []
    for name, plan in named:
        runs = []
        for seed in seeds:
            result = run_plan(plan, seed=seed, cache=cache)
            m = result.metrics
            cm = m.matrix
            runs.append({
                "seed": seed,
                "accuracy": m.accuracy,
                "kappa": m.kappa if m.kappa is not None else 0.0,
                "recall": [recall(cm, k) for k in range(cm.num_classes)],
            })
        acc_mean, acc_std = _stats([r["accuracy"] for r in runs])
        k_mean, k_std = _stats([r["kappa"] for r in runs])
        rows.append(AblationRow(name, runs, acc_mean, acc_std, k_mean, k_std))
    rows.sort(key=lambda r: (r.mean_kappa, r.name))
    return AblationReport(rows, seeds)
