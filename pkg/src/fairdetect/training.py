"""Joint optimization: per-batch threshold solves, sharpness-aware updates.

Each training step (full mode) runs in a fixed order: forward pass, exact
inner/outer tail-threshold solves on the fused-head sample losses, gradient
of the combined loss with thresholds held constant, a sign-form parameter
perturbation scaled by the perturbation radius, a second gradient at the
perturbed point with the same thresholds, and finally the descent update of
the unperturbed parameters. Baseline mode reduces to plain cross-entropy on
the domain-agnostic head with no thresholds and no perturbation.
"""

from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import data as dataset_mod
from . import losses as losses_mod
from .autodiff import GradMap, GraphError, ParameterStore, Tensor
from .losses import FairnessSolution, LossConfig, MarginTable
from .model import Detector, ModelConfig, adain_fuse

STATE_MAGIC = "fairdetect-state v1"

MODES = ("full", "baseline")
SAM_VARIANTS = ("sign", "l2")


class TrainingError(RuntimeError):
    """Raised when a run cannot continue (non-finite loss, bad config)."""


@dataclass(frozen=True)
class TrainRunConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    mode: str = "full"
    sam_variant: str = "sign"
    checkpoint_every: int = 0  # epochs between run-state saves; 0 = end of run only

    def __post_init__(self):
        if self.batch_size < 2:
            raise TrainingError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise TrainingError(f"epochs must be >= 0, got {self.epochs}")
        if self.mode not in MODES:
            raise TrainingError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sam_variant not in SAM_VARIANTS:
            raise TrainingError(f"sam_variant must be one of {SAM_VARIANTS}, got {self.sam_variant!r}")

    def effective_loss(self) -> LossConfig:
        """Baseline mode zeroes every term except the real/fake head loss."""
        if self.mode == "full":
            return self.loss
        return dataclasses.replace(
            self.loss,
            domain_head_weight=0.0,
            demographic_head_weight=0.0,
            contrastive_weight=0.0,
            reconstruction_weight=0.0,
            fairness_weight=0.0,
            perturb_radius=0.0,
        )


@dataclass(frozen=True)
class StepLog:
    iteration: int
    loss_dis: float
    loss_fair: float
    loss_total: float
    eta: float | None
    eta_by_subgroup: dict[str, float]
    grad_inf: float
    ascent: float  # perturbation . gradient, nonnegative by construction
    wall_time: float
    solution: FairnessSolution | None = None


class TrainingHistory:
    """Per-iteration loss decomposition and solver thresholds."""

    COLUMNS = ("iteration", "loss_dis", "loss_fair", "loss_total", "eta", "grad_inf", "eta_by_subgroup")

    def __init__(self):
        self.steps: list[StepLog] = []

    def append(self, step: StepLog) -> None:
        self.steps.append(step)

    def __len__(self) -> int:
        return len(self.steps)

    def rows(self) -> list[str]:
        out = []
        for s in self.steps:
            eta = "" if s.eta is None else repr(s.eta)
            eta_j = ";".join(f"{g}={v!r}" for g, v in s.eta_by_subgroup.items())
            out.append(
                f"{s.iteration}\t{s.loss_dis!r}\t{s.loss_fair!r}\t{s.loss_total!r}"
                f"\t{eta}\t{s.grad_inf!r}\t{eta_j}"
            )
        return out

    def write(self, path, append: bool = False) -> None:
        """Append-only delimited log; wall times stay out of it on purpose
        so identical runs produce identical files."""
        mode = "a" if append else "w"
        with open(path, mode, encoding="utf-8") as fh:
            if not append:
                fh.write("\t".join(self.COLUMNS) + "\n")
            for row in self.rows():
                fh.write(row + "\n")


def sam_perturbation(grads: GradMap, radius: float, variant: str = "sign") -> GradMap:
    """Loss-ascent parameter perturbation from a gradient map.

    The default is the elementwise sign form radius * sign(g) (sign(0) = 0);
    the "l2" variant rescales the gradient to a ball of the given radius.
    """
    if radius < 0:
        raise TrainingError(f"perturbation radius must be nonnegative, got {radius}")
    if variant == "sign":
        return {name: radius * np.sign(g) for name, g in grads.items()}
    if variant == "l2":
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm == 0.0 or radius == 0.0:
            return {name: np.zeros_like(g) for name, g in grads.items()}
        return {name: (radius / norm) * g for name, g in grads.items()}
    raise TrainingError(f"unknown sam variant {variant!r}")


def _group_by_subgroup(values: np.ndarray, subgroups: Sequence[str]) -> dict[str, np.ndarray]:
    grouped: dict[str, list[float]] = {}
    for v, g in zip(values, subgroups):
        grouped.setdefault(g, []).append(float(v))
    return {g: np.array(v) for g, v in grouped.items()}


def _batch_graph(pairs, params, model, margins, vocab, run_cfg: TrainRunConfig):
    """Total loss node at the current parameters, solving thresholds fresh."""
    loss_cfg = run_cfg.effective_loss()
    use_fair = loss_cfg.fairness_weight > 0
    graph = losses_mod.batch_losses(
        pairs, model, params, margins, vocab, loss_cfg, want_fused=use_fair
    )
    if not use_fair:
        return graph.dis, graph, None
    grouped = _group_by_subgroup(graph.fused_rows.data, graph.anchor_subgroups)
    solution = losses_mod.fairness_loss(
        grouped, loss_cfg.group_tail_fraction, loss_cfg.sample_tail_fraction
    )
    fair_node = losses_mod.fairness_loss_node(
        graph.fused_rows,
        graph.anchor_subgroups,
        solution,
        loss_cfg.group_tail_fraction,
        loss_cfg.sample_tail_fraction,
    )
    total = graph.dis + loss_cfg.fairness_weight * fair_node
    return total, graph, solution


def _rebuild_with_solution(pairs, params, model, margins, vocab, run_cfg, solution):
    """Total loss node at the current parameters with thresholds held fixed."""
    loss_cfg = run_cfg.effective_loss()
    graph = losses_mod.batch_losses(
        pairs, model, params, margins, vocab, loss_cfg, want_fused=solution is not None
    )
    if solution is None:
        return graph.dis
    fair_node = losses_mod.fairness_loss_node(
        graph.fused_rows,
        graph.anchor_subgroups,
        solution,
        loss_cfg.group_tail_fraction,
        loss_cfg.sample_tail_fraction,
    )
    return graph.dis + loss_cfg.fairness_weight * fair_node


def batch_loss_value(pairs, params, model, margins, vocab, run_cfg: TrainRunConfig) -> float:
    """Forward-only total loss (thresholds solved exactly at this point)."""
    total, _, _ = _batch_graph(pairs, params, model, margins, vocab, run_cfg)
    return total.item()


def training_step(
    pairs,
    params: ParameterStore,
    model: Detector,
    margins: MarginTable,
    vocab,
    run_cfg: TrainRunConfig,
    iteration: int = 0,
) -> StepLog:
    """One joint-optimization update; see the module docstring for the order."""
    start = time.perf_counter()
    loss_cfg = run_cfg.effective_loss()

    total, graph, solution = _batch_graph(pairs, params, model, margins, vocab, run_cfg)
    loss_total, grads = ad.value_and_grads(total, params)
    loss_fair = solution.value if solution is not None else 0.0
    loss_dis = graph.dis.item()

    grad_inf = max((float(np.abs(g).max()) for g in grads.values()), default=0.0)

    ascent = 0.0
    step_grads = grads
    if loss_cfg.perturb_radius > 0:
        offsets = sam_perturbation(grads, loss_cfg.perturb_radius, run_cfg.sam_variant)
        ascent = sum(float((offsets[name] * grads[name]).sum()) for name in grads)
        saved = params.snapshot()
        for name, offset in offsets.items():
            params[name].data += offset
        perturbed_total = _rebuild_with_solution(
            pairs, params, model, margins, vocab, run_cfg, solution
        )
        _, step_grads = ad.value_and_grads(perturbed_total, params)
        params.restore(saved)

    ad.sgd_step(params, step_grads, loss_cfg.learning_rate)

    return StepLog(
        iteration=iteration,
        loss_dis=loss_dis,
        loss_fair=loss_fair,
        loss_total=loss_total,
        eta=None if solution is None else solution.eta,
        eta_by_subgroup={} if solution is None else dict(solution.eta_by_subgroup),
        grad_inf=grad_inf,
        ascent=ascent,
        wall_time=time.perf_counter() - start,
        solution=solution,
    )


# -- run state -----------------------------------------------------------------


def _rng_to_items(rng: np.random.Generator) -> dict[str, int]:
    state = rng.bit_generator.state
    if state["bit_generator"] != "PCG64":
        raise TrainingError("run state only supports the PCG64 generator")
    return {
        "rng_state": state["state"]["state"],
        "rng_inc": state["state"]["inc"],
        "rng_has_uint32": state["has_uint32"],
        "rng_uinteger": state["uinteger"],
    }


def _rng_from_items(items: dict[str, int]) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(items["rng_state"]), "inc": int(items["rng_inc"])},
        "has_uint32": int(items["rng_has_uint32"]),
        "uinteger": int(items["rng_uinteger"]),
    }
    return np.random.Generator(bg)


def save_run_state(path, epochs_done: int, iteration: int, rng: np.random.Generator) -> None:
    lines = [STATE_MAGIC, f"epochs_done = {epochs_done}", f"iteration = {iteration}"]
    for key, value in _rng_to_items(rng).items():
        lines.append(f"{key} = {value}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_run_state(path) -> tuple[int, int, np.random.Generator]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != STATE_MAGIC:
        raise TrainingError(f"{path}: not a run-state file")
    items: dict[str, int] = {}
    for line in lines[1:]:
        if line.strip():
            key, _, value = line.partition("=")
            items[key.strip()] = int(value.strip())
    return items["epochs_done"], items["iteration"], _rng_from_items(items)


CHECKPOINT_FILE = "model.ckpt"
STATE_FILE = "model.state"
HISTORY_FILE = "history.tsv"


def train(
    dataset,
    run_cfg: TrainRunConfig,
    out_dir=None,
    resume: bool = False,
    progress=None,
) -> tuple[ParameterStore, TrainingHistory]:
    """Run the full training loop over epochs of fake/real pair batches.

    With `out_dir`, run state (parameters + sampler RNG) is checkpointed so
    an interrupted run resumes on the exact batch sequence; the history file
    is appended to on resume. Identical seed and config give bit-identical
    parameters and history.
    """
    model = Detector(run_cfg.model)
    margins = losses_mod.compute_margins(
        dataset_mod.subgroup_stats(dataset), run_cfg.loss.margin_scale
    )
    if resume:
        if out_dir is None:
            raise TrainingError("resume requires out_dir")
        params = ad.load_checkpoint(os.path.join(out_dir, CHECKPOINT_FILE))
        start_epoch, iteration, rng = load_run_state(os.path.join(out_dir, STATE_FILE))
    else:
        params = model.init_params(run_cfg.seed)
        rng = np.random.default_rng(run_cfg.seed)
        start_epoch, iteration = 0, 0

    history = TrainingHistory()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        history_path = os.path.join(out_dir, HISTORY_FILE)
        if not resume:
            with open(history_path, "w", encoding="utf-8") as fh:
                fh.write("\t".join(TrainingHistory.COLUMNS) + "\n")

    def save_state(epochs_done: int) -> None:
        if out_dir is None:
            return
        ad.save_checkpoint(params, os.path.join(out_dir, CHECKPOINT_FILE))
        save_run_state(os.path.join(out_dir, STATE_FILE), epochs_done, iteration, rng)

    for epoch in range(start_epoch, run_cfg.epochs):
        epoch_logs: list[StepLog] = []
        for pairs in dataset_mod.sample_pairs(dataset, run_cfg.batch_size, rng):
            try:
                step = training_step(pairs, params, model, margins, vocab=dataset,
                                     run_cfg=run_cfg, iteration=iteration)
            except GraphError as exc:
                raise TrainingError(f"run aborted at iteration {iteration}: {exc}") from exc
            history.append(step)
            epoch_logs.append(step)
            iteration += 1
        if out_dir is not None:
            partial = TrainingHistory()
            partial.steps = epoch_logs
            partial.write(history_path, append=True)
        if progress is not None and epoch_logs:
            progress(epoch, epoch_logs)
        if run_cfg.checkpoint_every and (epoch + 1) % run_cfg.checkpoint_every == 0:
            save_state(epoch + 1)
    save_state(run_cfg.epochs)
    return params, history


def predict_scores(params: ParameterStore, model: Detector, samples, mode: str = "full",
                   chunk: int = 256) -> np.ndarray:
    """Positive-class probabilities for a sample sequence.

    Full mode scores with the fused head over the re-normalized agnostic
    features; baseline mode scores with the real/fake head directly.
    """
    if mode not in MODES:
        raise TrainingError(f"mode must be one of {MODES}, got {mode!r}")
    scores = []
    for lo in range(0, len(samples), chunk):
        batch = samples[lo : lo + chunk]
        x = ad.constant(np.stack([s.x.data for s in batch]))
        feats = model.encode(params, x)
        if mode == "full":
            fused = adain_fuse(feats.f_g, feats.d, eps=model.cfg.adain_eps)
            logits = model.head_forward(params, "fused", fused).data
        else:
            logits = model.head_forward(params, "agnostic", feats.f_g).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        scores.append(e[:, 1] / e.sum(axis=1))
    return np.concatenate(scores)


# -- loss-landscape probes -------------------------------------------------------


def filter_normalized_directions(params: ParameterStore, rng: np.random.Generator) -> GradMap:
    """Random direction per parameter, rescaled to the parameter's own norm."""
    directions: GradMap = {}
    for name, p in params.items():
        d = rng.standard_normal(p.data.shape)
        p_norm = float(np.sqrt((p.data * p.data).sum()))
        d_norm = float(np.sqrt((d * d).sum()))
        directions[name] = d * (p_norm / d_norm) if d_norm > 0 else np.zeros_like(d)
    return directions


def _grid_offsets(extent: float, resolution: int) -> np.ndarray:
    if resolution < 1 or resolution % 2 == 0:
        raise TrainingError(f"resolution must be a positive odd number, got {resolution}")
    if resolution == 1:
        return np.array([0.0])
    half = (resolution - 1) // 2
    step = extent / half
    return np.array([(k - half) * step for k in range(resolution)])


def loss_landscape_slice(
    params: ParameterStore,
    pairs,
    model: Detector,
    margins: MarginTable,
    vocab,
    run_cfg: TrainRunConfig,
    dir1: GradMap,
    dir2: GradMap,
    extent: float,
    resolution: int,
) -> np.ndarray:
    """Loss values over a 2-D parameter-space grid spanned by two directions.

    The grid is symmetric about the current parameters, so the center cell
    is exactly the unperturbed loss.
    """
    for d in (dir1, dir2):
        for name, p in params.items():
            if name not in d or d[name].shape != p.data.shape:
                raise TrainingError(f"direction map does not match parameter {name!r}")
    offsets = _grid_offsets(extent, resolution)
    base = params.snapshot()
    grid = np.zeros((resolution, resolution))
    try:
        for i, u in enumerate(offsets):
            for j, v in enumerate(offsets):
                if u == 0.0 and v == 0.0:
                    params.restore(base)
                else:
                    for name in params.keys():
                        params[name].data = base[name] + u * dir1[name] + v * dir2[name]
                grid[i, j] = batch_loss_value(pairs, params, model, margins, vocab, run_cfg)
    finally:
        params.restore(base)
    return grid


def mean_loss_increase(
    params: ParameterStore,
    pairs,
    model: Detector,
    margins: MarginTable,
    vocab,
    run_cfg: TrainRunConfig,
    n_directions: int,
    radius: float,
    seed: int,
) -> float:
    """Mean loss change under random filter-normalized perturbations."""
    rng = np.random.default_rng(seed)
    base_value = batch_loss_value(pairs, params, model, margins, vocab, run_cfg)
    base = params.snapshot()
    increases = []
    try:
        for _ in range(n_directions):
            direction = filter_normalized_directions(params, rng)
            for name in params.keys():
                params[name].data = base[name] + radius * direction[name]
            increases.append(
                batch_loss_value(pairs, params, model, margins, vocab, run_cfg) - base_value
            )
    finally:
        params.restore(base)
    return float(np.mean(increases))
