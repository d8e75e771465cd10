"""Experiment orchestration: grid expansion, seeded trials, CSV/JSON output."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from qlens.errors import InputError, QlensError
from qlens.harness.config import (
    ExperimentConfig,
    InputSource,
    parse_intensity,
)
from qlens.metrics import spearman
from qlens.perturb import Clip, MatchQuantL2, PerturbSpec, gen_perturbation, kind_name, parse_kind
from qlens.quant import (
    Fixed,
    QuantScheme,
    SignedPower,
    dequantize,
    format_transform,
    parse_transform,
    quantize_with_stats,
    resolve_alpha,
)
from qlens.tensor import RngStream, Tensor, atomic_write_bytes, l2, mix_seed, read_tensor, sample, parse_dist
from qlens.toymodel import (
    InjectionPlan,
    ModelParams,
    Perturb,
    Quantize,
    activation_scheme,
    evaluate,
    init,
    inject_outliers,
    load_checkpoint,
    parse_preset,
    save_checkpoint,
    train,
    weight_scheme,
)

log = logging.getLogger(__name__)

CSV_FIELDS = (
    "experiment_id",
    "preset",
    "site_scope",
    "kind",
    "bits_w",
    "bits_a",
    "transform",
    "seed",
    "metric",
    "baseline",
    "value",
    "delta",
)


def fmt(v) -> str:
    """9 significant digits; integers and strings unchanged."""
    if isinstance(v, float):
        return f"{v:.9g}"
    return "" if v is None else str(v)


@dataclass
class ResultRow:
    experiment_id: str
    preset: str
    site_scope: str
    kind: str
    bits_w: Optional[int]
    bits_a: Optional[int]
    transform: str
    seed: int
    metric: str
    baseline: float
    value: float

    @property
    def delta(self) -> float:
        return self.value - self.baseline

    def as_record(self) -> dict[str, str]:
        d = asdict(self)
        d["delta"] = self.delta
        return {k: fmt(d[k]) for k in CSV_FIELDS}


@dataclass
class TrialResult:
    experiment_id: str
    index: int
    coords: dict
    seed: int
    rows: list[ResultRow] = field(default_factory=list)
    wall_time: float = 0.0
    error: Optional[str] = None
    exit_code: int = 0


@dataclass
class RunResult:
    trials: list[TrialResult]
    csv_path: Path
    manifest_path: Path

    @property
    def rows(self) -> list[ResultRow]:
        return [r for t in self.trials for r in t.rows]

    @property
    def exit_code(self) -> int:
        return max((t.exit_code for t in self.trials), default=0)


@dataclass(frozen=True)
class Trial:
    index: int
    coords: dict
    seed: int


# ---------------------------------------------------------------------------
# inputs and models


def load_input(src: InputSource) -> Tensor:
    if src.path is not None:
        try:
            return read_tensor(src.path)
        except OSError as exc:
            raise InputError(f"cannot read {src.path}: {exc}") from None
    return sample(parse_dist(src.dist), src.shape, RngStream(src.seed))


def obtain_model(cfg: ExperimentConfig) -> ModelParams:
    """Load ``cfg.checkpoint`` or train one with ``cfg.train`` (cached under the output dir)."""
    if cfg.checkpoint:
        return load_checkpoint(cfg.checkpoint)[0]
    cache = Path(cfg.output_dir) / "checkpoint"
    meta = {"task": cfg.task.model_dump(), "train": cfg.train.model_dump(), "model": cfg.model.model_dump()}
    if (cache / "manifest.json").exists():
        params, stored = load_checkpoint(cache)
        if stored.get("source") == meta:
            return params
    log.info("training toy model (%d steps) for %s", cfg.train.steps, cfg.experiment_id)
    params, curve = train(
        init(cfg.model.build()), cfg.task.build(), cfg.train.steps, cfg.train.optimizer(), RngStream(cfg.train.seed)
    )
    save_checkpoint(params, cache, {"source": meta, "final_loss": curve[-1] if curve else None})
    return params


# ---------------------------------------------------------------------------
# experiment kinds. Each returns (trials, executor) where executor(trial) -> rows.


def _tensor_metrics(t: Tensor, delta: np.ndarray, n_clipped: int) -> dict[str, float]:
    d = delta.astype(np.float64)
    out = {
        "l2_delta": l2(delta),
        "mean_abs_delta": float(np.abs(d).mean()),
        "max_abs_delta": float(np.abs(d).max()),
        "clip_fraction": n_clipped / t.size,
    }
    if np.ptp(d) > 0 and np.ptp(t.data) > 0:
        out["spearman_abs"] = spearman(np.abs(d), np.abs(t.data))
    else:
        out["spearman_abs"] = 0.0
    return out


def _setup_kernel_sweep(cfg: ExperimentConfig):
    inputs = [(src.name, load_input(src)) for src in cfg.inputs]
    schemes = [s.build() for s in cfg.schemes]
    metrics = cfg.metrics or ["l2_delta", "mean_abs_delta", "max_abs_delta", "clip_fraction"]
    grid = [(i, j) for i in range(len(inputs)) for j in range(len(schemes))]

    def run(trial: Trial) -> list[ResultRow]:
        name, t = inputs[trial.coords["input"]]
        scheme = schemes[trial.coords["scheme"]]
        q, st = quantize_with_stats(t, scheme)
        values = _tensor_metrics(t, t.data - dequantize(q).data, st.n_clipped)
        return [
            ResultRow(cfg.experiment_id, cfg.preset or cfg.kind, name, "quant:" + _policy_gran(scheme), scheme.bits, None,
                      format_transform(scheme.transform), trial.seed, m, 0.0, values[m])
            for m in metrics
        ]

    coords = [{"input": i, "scheme": j} for i, j in grid]
    return coords, run


def _policy_gran(s: QuantScheme) -> str:
    d = s.describe().split("/")
    return f"{d[1]}/{d[2]}"


def _setup_scale_sweep(cfg: ExperimentConfig):
    inputs = [(src.name, load_input(src)) for src in cfg.inputs]
    schemes = [s.build() for s in (cfg.schemes or [])] or [QuantScheme(8)]
    metrics = cfg.metrics or ["l2_delta", "clip_fraction"]
    for m in metrics:
        if m not in ("l2_delta", "clip_fraction"):
            raise QlensError(f"scale-sweep supports l2_delta and clip_fraction, not {m!r}")

    def measure(t, scheme, alpha):
        q, st = quantize_with_stats(t, scheme.with_policy(Fixed(alpha)))
        return {"l2_delta": l2(t.data - dequantize(q).data), "clip_fraction": st.clip_fraction}

    baselines = {}
    for i, (_, t) in enumerate(inputs):
        for j, s in enumerate(schemes):
            baselines[i, j] = measure(t, s, resolve_alpha("1x", t, s))

    def run(trial: Trial) -> list[ResultRow]:
        i, j, label = trial.coords["input"], trial.coords["scheme"], trial.coords["alpha"]
        name, t = inputs[i]
        s = schemes[j]
        values = measure(t, s, resolve_alpha(label, t, s))
        return [
            ResultRow(cfg.experiment_id, cfg.preset or cfg.kind, name, f"alpha={label}", s.bits, None,
                      format_transform(s.transform), trial.seed, m, baselines[i, j][m], values[m])
            for m in metrics
        ]

    coords = [
        {"input": i, "scheme": j, "alpha": a}
        for i in range(len(inputs))
        for j in range(len(schemes))
        for a in cfg.alphas
    ]
    return coords, run


def _spec(kind_text: str, intensity, seed: int) -> PerturbSpec:
    kind = parse_kind(kind_text)
    if isinstance(kind, Clip):
        return PerturbSpec(kind, MatchQuantL2(), seed)
    return PerturbSpec(kind, intensity, seed)


def _setup_perturb_tensors(cfg: ExperimentConfig):
    inputs = [(src.name, load_input(src)) for src in cfg.inputs]
    scheme = QuantScheme(cfg.match_bits_w)
    intensity = parse_intensity(cfg.intensity, scheme)
    metrics = cfg.metrics or ["l2_delta", "spearman_abs"]
    baselines = []
    for _, t in inputs:
        q, st = quantize_with_stats(t, scheme)
        baselines.append(_tensor_metrics(t, t.data - dequantize(q).data, st.n_clipped))

    def run(trial: Trial) -> list[ResultRow]:
        i, kind_text = trial.coords["input"], trial.coords["kind"]
        name, t = inputs[i]
        spec = _spec(kind_text, intensity, trial.seed)
        delta = gen_perturbation(t, spec, RngStream(trial.seed))
        values = _tensor_metrics(t, delta.data, 0)
        return [
            ResultRow(cfg.experiment_id, cfg.preset or cfg.kind, name, kind_name(spec.kind), cfg.match_bits_w, None,
                      "identity", trial.seed, m, baselines[i][m], values[m])
            for m in metrics
        ]

    coords = [{"input": i, "kind": k} for i in range(len(inputs)) for k in cfg.perturbations]
    return coords, run


def _setup_perturb_toy(cfg: ExperimentConfig):
    params = obtain_model(cfg)
    if cfg.outliers is not None:
        params, _ = inject_outliers(params, cfg.outliers.fraction, cfg.outliers.factor, RngStream(cfg.outliers.seed))
    task = cfg.task.build()
    ev = cfg.eval
    metrics = cfg.metrics or ["accuracy"]
    baseline = evaluate(params, task, None, ev.n_batches, ev.batch_size, ev.seed).as_dict()
    w_int = parse_intensity(cfg.intensity, weight_scheme(cfg.match_bits_w))
    a_int = parse_intensity(cfg.intensity, activation_scheme(cfg.match_bits_a))

    def run(trial: Trial) -> list[ResultRow]:
        kind_text = trial.coords["kind"]
        w_spec = _spec(kind_text, w_int, trial.seed)
        a_spec = _spec(kind_text, a_int, trial.seed)
        plan = InjectionPlan.uniform(
            params.config,
            weight=Perturb(w_spec) if cfg.site_scope in ("all", "weights") else None,
            activation=Perturb(a_spec) if cfg.site_scope in ("all", "activations") else None,
        )
        res = evaluate(params, task, plan, ev.n_batches, ev.batch_size, ev.seed).as_dict()
        return [
            ResultRow(cfg.experiment_id, cfg.preset or cfg.kind, cfg.site_scope, kind_name(w_spec.kind),
                      cfg.match_bits_w, cfg.match_bits_a, "identity", trial.seed, m, baseline[m], res[m])
            for m in metrics
        ]

    return [{"kind": k} for k in cfg.perturbations], run


def _setup_quant_compare(cfg: ExperimentConfig):
    """Settings x transforms, repeated per seed index ``r``.

    Repeat ``r`` draws its outlier channels and evaluation batches from
    config-level seeds mixed with ``r``, so values do not depend on ``base_seed``.
    """
    base = obtain_model(cfg)
    task = cfg.task.build()
    ev = cfg.eval
    metrics = cfg.metrics or ["perplexity", "accuracy"]
    models, baselines, eval_seeds = [], [], []
    for r in range(cfg.n_seeds):
        p = base
        if cfg.outliers is not None:
            o = cfg.outliers
            p, _ = inject_outliers(base, o.fraction, o.factor, RngStream(mix_seed(o.seed, r)))
        es = mix_seed(ev.seed, r)
        models.append(p)
        eval_seeds.append(es)
        baselines.append(evaluate(p, task, None, ev.n_batches, ev.batch_size, es).as_dict())

    def run(trial: Trial) -> list[ResultRow]:
        setting, tname, r = trial.coords["setting"], trial.coords["transform"], trial.coords["repeat"]
        wb, ab = parse_preset(setting)
        non_uniform = isinstance(parse_transform(tname), SignedPower)
        plan = InjectionPlan.uniform(
            models[r].config,
            weight=Quantize(weight_scheme(wb, non_uniform)) if wb else None,
            activation=Quantize(activation_scheme(ab, non_uniform)) if ab else None,
        )
        res = evaluate(models[r], task, plan, ev.n_batches, ev.batch_size, eval_seeds[r]).as_dict()
        return [
            ResultRow(cfg.experiment_id, cfg.preset or cfg.kind, cfg.site_scope, setting, wb or 16, ab or 16,
                      tname if (wb or ab) else "none", trial.seed, m, baselines[r][m], res[m])
            for m in metrics
        ]

    coords = []
    for s in cfg.settings:
        wb, ab = parse_preset(s)
        transforms = cfg.transforms if (wb or ab) else cfg.transforms[:1]
        for tname in transforms:
            coords.append({"setting": s, "transform": format_transform(parse_transform(tname))})
    return coords, run


def _setup_toy_train(cfg: ExperimentConfig):
    task = cfg.task.build()
    ev = cfg.eval
    metrics = cfg.metrics or ["accuracy", "perplexity"]
    out_root = Path(cfg.output_dir) / "checkpoints"

    def run(trial: Trial) -> list[ResultRow]:
        mcfg = cfg.model.build()
        mcfg = type(mcfg)(**{**asdict(mcfg), "init_seed": trial.seed})
        p0 = init(mcfg)
        before = evaluate(p0, task, None, ev.n_batches, ev.batch_size, ev.seed).as_dict()
        p1, curve = train(p0, task, cfg.train.steps, cfg.train.optimizer(), RngStream(trial.seed).substream(1))
        after = evaluate(p1, task, None, ev.n_batches, ev.batch_size, ev.seed).as_dict()
        ck = out_root / f"trial-{trial.index}"
        save_checkpoint(p1, ck, {"seed": trial.seed, "steps": cfg.train.steps, "final_loss": curve[-1] if curve else None})
        atomic_write_bytes(ck / "loss_curve.dat", "".join(f"{i} {fmt(v)}\n" for i, v in enumerate(curve)).encode())
        return [
            ResultRow(cfg.experiment_id, cfg.preset or cfg.kind, "all", f"train:{task.kind}", None, None, "none",
                      trial.seed, m, before[m], after[m])
            for m in metrics
        ]

    return [{"task": task.kind}], run


SETUPS: dict[str, Callable] = {
    "kernel-sweep": _setup_kernel_sweep,
    "scale-sweep": _setup_scale_sweep,
    "quant-compare": _setup_quant_compare,
    "toy-eval": _setup_quant_compare,
    "toy-train": _setup_toy_train,
}


def expand(cfg: ExperimentConfig):
    if cfg.kind == "perturb-compare":
        coords, run = (_setup_perturb_tensors if cfg.inputs else _setup_perturb_toy)(cfg)
    else:
        coords, run = SETUPS[cfg.kind](cfg)
    trials = []
    for c in coords:
        for r in range(cfg.n_seeds):
            idx = len(trials)
            trials.append(Trial(idx, {**c, "repeat": r}, mix_seed(cfg.base_seed, idx)))
    return trials, run


# ---------------------------------------------------------------------------


def rows_to_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\r\n")
    w.writeheader()
    for r in rows:
        w.writerow(r.as_record())
    return buf.getvalue()


def _execute(run, trial: Trial, experiment_id: str) -> TrialResult:
    res = TrialResult(experiment_id, trial.index, trial.coords, trial.seed)
    t0 = time.perf_counter()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res.rows = run(trial)
    except QlensError as exc:
        res.error, res.exit_code = str(exc), exc.exit_code
        log.warning("trial %d failed: %s", trial.index, exc)
    res.wall_time = time.perf_counter() - t0
    return res


def run(cfg: ExperimentConfig, parallelism: Optional[int] = None) -> RunResult:
    """Run every grid point x seed; write ``<id>.csv`` and ``<id>.json`` atomically."""
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from None
    workers = parallelism or cfg.parallelism
    started = datetime.now(timezone.utc)
    trials, runner = expand(cfg)
    if workers <= 1:
        results = [_execute(runner, t, cfg.experiment_id) for t in trials]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda t: _execute(runner, t, cfg.experiment_id), trials))
    rows = [r for t in results for r in t.rows]
    csv_path = out / f"{cfg.experiment_id}.csv"
    manifest_path = out / f"{cfg.experiment_id}.json"
    atomic_write_bytes(csv_path, rows_to_csv(rows).encode())
    manifest = {
        "schema_version": cfg.schema_version,
        "experiment_id": cfg.experiment_id,
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "parallelism": workers,
        "config": cfg.model_dump(),
        "n_trials": len(results),
        "n_rows": len(rows),
        "trials": [
            {
                "index": t.index,
                "coords": t.coords,
                "seed": t.seed,
                "wall_time": t.wall_time,
                "n_rows": len(t.rows),
                "error": t.error,
            }
            for t in results
        ],
    }
    atomic_write_bytes(manifest_path, (json.dumps(manifest, indent=2) + "\n").encode())
    return RunResult(results, csv_path, manifest_path)


def csv_body(path) -> str:
    """CSV content without the header line."""
    text = Path(path).read_text()
    return text.split("\r\n", 1)[1] if "\r\n" in text else ""
