"""Model assembly, the adversarial training loop, evaluation, and the EM timing bench."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, Node
from .critic import (CRITICS, CriticWeights, DegenerateClusterError, Discriminator,
                     adversarial_loss, discriminator_loss, kmeans_critic)
from .data import MultiLabelDataset, ShiftSpec, paired_batches
from .deepem import EBlock, consistency_loss, deepem_estimate
from .gmm_em import DegenerateComponentError, default_init, fit_em
from .metrics import MetricReport, evaluate
from .nn import AdamState, Mlp, adam_step, init_params, load_tensors, save_tensors, LinearLayer

FEATURE_SIZES = (64, 32)
ASL_CLAMP = 1e-7


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    d: int = 16
    C: int = 8
    n_per_domain: int = 2000
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    batch_size: int = 64
    epochs: int = 25
    max_lr: float = 1e-3
    lambda_adv: float = 1.0
    alpha1: float = 0.5
    alpha2: float = 0.5
    beta: float = 1.0
    tau: float = 0.5
    sigma_floor: float = 1e-4
    critic: str = "w2"
    asl_gamma_pos: float = 0.0
    asl_gamma_neg: float = 4.0
    asl_margin: float = 0.05
    grl_schedule: str = "constant"
    grl_coefficient: float = 1.0
    adversary: str = "features"

    def __post_init__(self):
        if isinstance(self.shift, dict):
            self.shift = _shift_from_dict(self.shift)
        if self.critic not in CRITICS:
            raise ConfigError(f"critic: unknown value {self.critic!r}, expected one of {CRITICS}")
        if self.grl_schedule not in ("constant", "ramp"):
            raise ConfigError(f"grl_schedule: unknown value {self.grl_schedule!r}")
        if self.adversary not in ("features", "classifier"):
            raise ConfigError(f"adversary: unknown value {self.adversary!r}")
        if self.lambda_adv < 0:
            raise ConfigError("lambda_adv: must be >= 0")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigError("alpha1/alpha2: must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size: must be >= 2")
        if not 0 < self.tau < 1:
            raise ConfigError("tau: must lie in (0, 1)")
        if self.beta < 0:
            raise ConfigError("beta: must be >= 0")

    @property
    def weights(self) -> CriticWeights:
        return CriticWeights(self.alpha1, self.alpha2)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(f"{key}: unknown config field")
        kwargs = dict(raw)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)


def _shift_from_dict(raw: dict) -> ShiftSpec:
    known = {f.name for f in fields(ShiftSpec)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"shift.{key}: unknown config field")
    try:
        return ShiftSpec(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"shift: {exc}") from None


# -------------------------------------------------------------------- model

@dataclass
class Model:
    f_g: Mlp
    f_c: Mlp
    e_block: EBlock
    discriminator: Discriminator | None = None

    @classmethod
    def create(cls, cfg: ExperimentConfig) -> "Model":
        s = np.random.SeedSequence(cfg.seed).generate_state(4)
        f_g = init_params([cfg.d, *FEATURE_SIZES], int(s[0]), hidden="relu", output="relu")
        f_c = init_params([FEATURE_SIZES[-1], cfg.C], int(s[1]), output="identity")
        disc = Discriminator.create(FEATURE_SIZES[-1], int(s[3])) if cfg.critic == "discriminator" else None
        return cls(f_g, f_c, EBlock.create(int(s[2])), disc)

    def parameters(self) -> list[Node]:
        out = self.f_g.parameters() + self.f_c.parameters() + self.e_block.parameters()
        if self.discriminator is not None:
            out += self.discriminator.parameters()
        return out

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        named = (self.f_g.named_parameters("f_g") + self.f_c.named_parameters("f_c")
                 + self.e_block.net.named_parameters("e_block"))
        if self.discriminator is not None:
            named += self.discriminator.net.named_parameters("discriminator")
        return [(n, p.value) for n, p in named]

    def predict(self, x) -> np.ndarray:
        return ad.sigmoid(self.f_c(self.f_g(Node(x)))).value


_ACTIVATIONS = {"f_g": ("relu", "relu"), "f_c": ("relu", "identity"),
                "e_block": ("relu", "identity"), "discriminator": ("relu", "identity")}


def save_model(model: Model, path) -> None:
    save_tensors(path, model.named_tensors())


def load_model(path) -> Model:
    groups: dict[str, dict[int, dict[str, np.ndarray]]] = {}
    for name, arr in load_tensors(path):
        try:
            net, idx, kind = name.split(".")
            groups.setdefault(net, {}).setdefault(int(idx), {})[kind] = arr
        except ValueError:
            raise ValueError(f"{path}: unexpected tensor name {name!r}") from None
    nets = {}
    for net, layers in groups.items():
        if net not in _ACTIVATIONS:
            raise ValueError(f"{path}: unknown network {net!r}")
        hidden, output = _ACTIVATIONS[net]
        n = len(layers)
        nets[net] = Mlp([LinearLayer(Node(layers[i]["weight"], requires_grad=True),
                                     Node(layers[i]["bias"], requires_grad=True),
                                     output if i == n - 1 else hidden) for i in range(n)])
    missing = {"f_g", "f_c", "e_block"} - nets.keys()
    if missing:
        raise ValueError(f"{path}: missing networks {sorted(missing)}")
    disc = Discriminator(nets["discriminator"]) if "discriminator" in nets else None
    return Model(nets["f_g"], nets["f_c"], EBlock(nets["e_block"]), disc)


# --------------------------------------------------------------------- loss

def asl_loss(z: Node, labels, gamma_pos: float = 0.0, gamma_neg: float = 4.0,
             margin: float = 0.05) -> Node:
    """Asymmetric loss averaged over all entries."""
    y = np.asarray(labels, dtype=float)
    z = ad.clip(z, ASL_CLAMP, 1.0 - ASL_CLAMP)
    pos = ad.mul(ad.power(ad.sub(1.0, z), gamma_pos), ad.log(z))
    zm = ad.clip(ad.sub(z, margin), ASL_CLAMP, None)
    neg = ad.mul(ad.power(zm, gamma_neg), ad.log(ad.sub(1.0, zm)))
    per_entry = ad.add(ad.mul(Node(y), pos), ad.mul(Node(1.0 - y), neg))
    return ad.neg(ad.mean(per_entry))


# ------------------------------------------------------------------ training

@dataclass
class EpochRecord:
    epoch: int
    l_cls: float
    l_adv: float
    consistency: float
    source_map: float
    target_map: float
    source_gmm: dict | None
    target_gmm: dict | None
    sec_per_batch: float
    skipped: int

    def to_json(self, include_timing: bool = False) -> str:
        d = asdict(self)
        if not include_timing:
            d.pop("sec_per_batch")
        return json.dumps(d)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def write(self, path, include_timing: bool = False) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(r.to_json(include_timing) + "\n")


@dataclass
class StepResult:
    l_cls: float
    l_adv: float | None
    consistency: float | None
    source_gmm: dict | None = None
    target_gmm: dict | None = None


def grl_coefficient(cfg: ExperimentConfig, progress: float) -> float:
    if cfg.grl_schedule == "ramp":
        return cfg.grl_coefficient * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)
    return cfg.grl_coefficient


_SKIPPABLE = (DegenerateComponentError, DegenerateClusterError, DomainError)


def compute_losses(model: Model, cfg: ExperimentConfig, x_src, y_src, x_tgt,
                   grl_coef: float = 1.0, cls_weight: float = 1.0) -> tuple[Node, StepResult]:
    """Build the total objective for one batch pair.

    Classification runs on source features directly; the adversarial branch
    sees features through a gradient reversal layer, so the classifier
    descends the critic while the feature extractor ascends it.  With
    ``cfg.adversary == "classifier"`` the critic's sign is flipped and the
    roles swap.
    """
    h_s = model.f_g(Node(x_src))
    z_cls = ad.sigmoid(model.f_c(h_s))
    l_cls = asl_loss(z_cls, y_src, cfg.asl_gamma_pos, cfg.asl_gamma_neg, cfg.asl_margin)
    total = ad.scalar_mul(l_cls, cls_weight)
    result = StepResult(float(l_cls.value), None, None)
    if cfg.critic == "none":
        return total, result

    h_t = model.f_g(Node(x_tgt))
    r_s, r_t = ad.grl(h_s, grl_coef), ad.grl(h_t, grl_coef)
    try:
        cons = None
        if cfg.critic == "discriminator":
            l_adv = discriminator_loss(model.discriminator, r_s, r_t)
        else:
            z_s = ad.sigmoid(model.f_c(r_s))
            z_t = ad.sigmoid(model.f_c(r_t))
            if cfg.critic == "kmeans":
                l_adv = kmeans_critic(z_s, z_t, cfg.weights, cfg.sigma_floor)
            else:
                p_s = deepem_estimate(model.e_block, z_s, cfg.sigma_floor)
                p_t = deepem_estimate(model.e_block, z_t, cfg.sigma_floor)
                l_adv = adversarial_loss(p_s, p_t, cfg.weights, cfg.critic)
                result.source_gmm, result.target_gmm = p_s.as_dict(), p_t.as_dict()
                if cfg.beta > 0:
                    cons = ad.scalar_mul(ad.add(
                        consistency_loss(model.e_block, z_s, cfg.sigma_floor, p_s),
                        consistency_loss(model.e_block, z_t, cfg.sigma_floor, p_t)), 0.5)
        if not np.isfinite(l_adv.value).all():
            raise DomainError("non-finite adversarial loss")
    except _SKIPPABLE:
        return total, result
    if cfg.adversary == "classifier" and cfg.critic != "discriminator":
        # critic role swapped: classifier ascends, feature extractor descends
        l_adv_signed = ad.neg(l_adv)
    else:
        l_adv_signed = l_adv
    adv = l_adv_signed if cons is None else ad.add(l_adv_signed, ad.scalar_mul(cons, cfg.beta))
    total = ad.add(total, ad.scalar_mul(adv, cfg.lambda_adv))
    result.l_adv = float(l_adv.value)
    result.consistency = None if cons is None else float(cons.value)
    return total, result


def train_step(model: Model, cfg: ExperimentConfig, state: AdamState, x_src, y_src, x_tgt,
               grl_coef: float = 1.0, cls_weight: float = 1.0) -> StepResult:
    params = model.parameters()
    ad.zero_grad(params)
    total, result = compute_losses(model, cfg, x_src, y_src, x_tgt, grl_coef, cls_weight)
    ad.backward(total)
    adam_step(params, [p.grad for p in params], state)
    return result


def steps_per_epoch(cfg: ExperimentConfig, src: MultiLabelDataset, tgt: MultiLabelDataset) -> int:
    return sum(1 for _ in paired_batches(src, tgt, cfg.batch_size, cfg.seed, 0))


def _safe_map(model: Model, ds: MultiLabelDataset, tau: float) -> float:
    try:
        return evaluate_model(model, ds, tau).map
    except ValueError:
        return float("nan")


def train(cfg: ExperimentConfig, src: MultiLabelDataset, tgt: MultiLabelDataset,
          log_path=None, include_timing: bool = False) -> tuple[Model, TrainLog]:
    if src.d != tgt.d or src.num_classes != tgt.num_classes:
        raise ValueError(f"source ({src.d}, {src.num_classes}) and target ({tgt.d}, {tgt.num_classes}) "
                         f"disagree on feature/class dims")
    if src.d != cfg.d or src.num_classes != cfg.C:
        cfg = ExperimentConfig.from_dict({**_shallow(cfg), "d": src.d, "C": src.num_classes})
    model = Model.create(cfg)
    per_epoch = steps_per_epoch(cfg, src, tgt)
    total_steps = per_epoch * cfg.epochs
    state = AdamState(max_lr=cfg.max_lr, total_steps=total_steps)
    log = TrainLog()
    fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            sums = {"cls": 0.0, "adv": 0.0, "cons": 0.0}
            n_adv = n_cons = skipped = steps = 0
            last = None
            elapsed = 0.0
            for b_s, b_t in paired_batches(src, tgt, cfg.batch_size, cfg.seed, epoch):
                coef = grl_coefficient(cfg, state.step_count / total_steps)
                t0 = time.perf_counter()
                res = train_step(model, cfg, state, b_s.features, b_s.labels, b_t.features, coef)
                elapsed += time.perf_counter() - t0
                steps += 1
                sums["cls"] += res.l_cls
                if cfg.critic != "none":
                    if res.l_adv is None:
                        skipped += 1
                    else:
                        sums["adv"] += res.l_adv
                        n_adv += 1
                        last = res
                    if res.consistency is not None:
                        sums["cons"] += res.consistency
                        n_cons += 1
            rec = EpochRecord(
                epoch=epoch,
                l_cls=sums["cls"] / steps,
                l_adv=sums["adv"] / n_adv if n_adv else 0.0,
                consistency=sums["cons"] / n_cons if n_cons else 0.0,
                source_map=_safe_map(model, src, cfg.tau),
                target_map=_safe_map(model, tgt, cfg.tau),
                source_gmm=last.source_gmm if last else None,
                target_gmm=last.target_gmm if last else None,
                sec_per_batch=max(elapsed / steps, 1e-12),
                skipped=skipped,
            )
            log.records.append(rec)
            if fh is not None:
                fh.write(rec.to_json(include_timing) + "\n")
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return model, log


def _shallow(cfg: ExperimentConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def evaluate_model(model: Model, ds: MultiLabelDataset, tau: float = 0.5) -> MetricReport:
    return evaluate(model.predict(ds.features), ds.labels, tau)


# -------------------------------------------------------------------- bench

def synthetic_predictions(rng: np.random.Generator, batch: int, C: int,
                          p_pos: float | None = None, sep: float = 2.5) -> np.ndarray:
    """Prediction-like probabilities: sigmoid of logits centred at +/-sep."""
    p_pos = 2.0 / C if p_pos is None else p_pos
    y = rng.random((batch, C)) < p_pos
    logits = np.where(y, sep, -sep) + rng.standard_normal((batch, C))
    return 1.0 / (1.0 + np.exp(-logits))


@dataclass
class BenchRow:
    method: str
    rel_tol: float
    mean_seconds: float
    std_seconds: float
    mean_iterations: float


def bench_em(cfg: ExperimentConfig, n_batches: int = 100, rel_tol: float = 1e-6,
             max_iters: int = 200) -> list[BenchRow]:
    """Per-batch wall-clock of iterative EM versus one DeepEM forward pass on identical batches."""
    if n_batches < 10:
        raise ValueError(f"bench_em needs at least 10 batches, got {n_batches}")
    rng = np.random.default_rng(cfg.seed)
    data = [synthetic_predictions(rng, cfg.batch_size, cfg.C) for _ in range(n_batches)]
    eb = EBlock.create(cfg.seed)
    deepem_estimate(eb, Node(data[0]), cfg.sigma_floor)  # warm-up
    fit_em(data[0].reshape(-1), default_init(data[0].reshape(-1), cfg.sigma_floor),
           max_iters=max_iters, rel_tol=rel_tol, sigma_floor=cfg.sigma_floor)

    em_t, em_it, deep_t = [], [], []
    for z in data:
        t0 = time.perf_counter()
        xs = z.reshape(-1)
        _, trace = fit_em(xs, default_init(xs, cfg.sigma_floor), max_iters=max_iters,
                          rel_tol=rel_tol, sigma_floor=cfg.sigma_floor)
        em_t.append(time.perf_counter() - t0)
        em_it.append(trace.iterations)
        t0 = time.perf_counter()
        deepem_estimate(eb, Node(z), cfg.sigma_floor)
        deep_t.append(time.perf_counter() - t0)
    return [
        BenchRow("em", rel_tol, float(np.mean(em_t)), float(np.std(em_t)), float(np.mean(em_it))),
        BenchRow("deepem", rel_tol, float(np.mean(deep_t)), float(np.std(deep_t)), 1.0),
    ]
