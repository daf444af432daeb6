"""Experiment driver: runs, ablations, timing sweeps and buffer export.

Output layout of a run directory::

    config.ini        verbatim copy of the input config
    config.json       resolved config plus its hash
    results.csv       one row per (strategy, seed, trained_through, evaluated)
    summary.json      A_t series per strategy and seed, mean series
    timings.json      wall-clock seconds per experience (not reproducible by nature)
    memories/         replay memories, <strategy>_seed<k>_exp<t>.drb
    params/           final parameters, <strategy>_seed<k>.drb
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as data_mod
from .config import RunConfig
from .distillation import DistillConfig, distill, init_memory, load_memory, save_memory
from .evaluation import AccuracyMatrix, matrix_rows, summarize, write_csv
from .models import InitDistribution, ModelSpec, save_params
from .scenarios import Stream, permuted_stream, split_stream
from .seeding import derive_seed
from .strategies import StreamResult, TrainConfig, run_stream

log = logging.getLogger(__name__)

ABLATION_ARMS = {
    "buffer_distillation": {"loss_mode": "sum_all_steps", "lr_mode": "fixed"},
    "dataset_distillation": {"loss_mode": "last_step_only", "lr_mode": "learned"},
}


def _load_base(cfg: RunConfig, seed: int) -> tuple[data_mod.Dataset, data_mod.Dataset]:
    s = cfg.scenario
    if s.dataset == "blobs":
        blobs = lambda per, tag: data_mod.make_blobs(
            s.blob_classes, per, s.blob_dim, s.blob_spread, derive_seed(seed, tag)
        )
        return blobs(s.blob_train_per_class, "blobs-train"), blobs(s.blob_test_per_class, "blobs-test")
    train, test = data_mod.load_mnist(s.data_dir, name=s.dataset)
    if s.train_per_class:
        train = data_mod.subsample_per_class(train, s.train_per_class, derive_seed(seed, "subsample-train"))
    if s.test_per_class:
        test = data_mod.subsample_per_class(test, s.test_per_class, derive_seed(seed, "subsample-test"))
    if s.downscale > 1:
        train, test = data_mod.downscale(train, s.downscale), data_mod.downscale(test, s.downscale)
    return train, test


def build_stream(cfg: RunConfig, seed: int) -> Stream:
    s = cfg.scenario
    train, test = _load_base(cfg, seed)
    if s.kind == "permuted":
        return permuted_stream(train, test, s.T, seed, s.val_fraction)
    return split_stream(train, test, s.classes_per_exp, s.class_order, seed, s.val_fraction)


def build_model(cfg: RunConfig, stream: Stream) -> ModelSpec:
    first = stream[1].train
    input_shape = first.images.shape[1:]
    m = cfg.model
    if m.kind == "lenet5":
        return ModelSpec("lenet5", input_shape, first.num_classes, activation=m.activation)
    return ModelSpec(m.kind, (int(np.prod(input_shape)),), first.num_classes, hidden=m.hidden, activation=m.activation)


def train_config(cfg: RunConfig, strategy: str, seed: int) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        strategy=strategy,
        lr=t.lr,
        batch_size=t.batch_size,
        per_class=t.per_class,
        seed=seed,
        replay_weight=t.replay_weight,
        dtype=t.dtype,
        distill=replace(cfg.distill, workers=1 if cfg.sequential else cfg.distill.workers),
    )


@dataclass
class SeedResult:
    strategy: str
    seed: int
    matrix: AccuracyMatrix
    series: list
    distillations: int
    timings: list
    stream_meta: dict
    spec: Optional[ModelSpec] = None
    result: Optional[StreamResult] = field(default=None, repr=False)


def run_one(cfg: RunConfig, strategy: str, seed: int) -> SeedResult:
    stream = build_stream(cfg, seed)
    spec = build_model(cfg, stream)
    res = run_stream(stream, spec, train_config(cfg, strategy, seed), InitDistribution(dtype=cfg.train.dtype))
    return SeedResult(strategy, seed, res.matrix, summarize(res.matrix).series, res.distillations, res.timings,
                      stream.metadata(), spec, res)


def _run_job(job):
    return run_one(*job)


@dataclass
class RunResult:
    config: RunConfig
    results: list[SeedResult]
    output_dir: Optional[Path] = None

    def series(self, strategy: str) -> np.ndarray:
        return np.array([r.series for r in self.results if r.strategy == strategy])

    def mean_final(self, strategy: str) -> float:
        return float(self.series(strategy)[:, -1].mean())


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run(cfg: RunConfig, output_dir=None, write: bool = True) -> RunResult:
    """Execute every (strategy, seed) pair of ``cfg``; results are ordered strategy-major."""
    jobs = [(cfg, s, seed) for s in cfg.strategies for seed in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1 and not cfg.sequential:
        # map preserves job order, so results do not depend on scheduling
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [run_one(*job) for job in jobs]
    out = RunResult(cfg, results)
    if write:
        out.output_dir = write_run(out, Path(output_dir or cfg.output_dir))
    return out


def write_run(result: RunResult, out: Path) -> Path:
    cfg = result.config
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.hash()
    run_id = f"{cfg.name}-{chash[:12]}"
    rows = []
    for r in result.results:
        rows += matrix_rows(r.matrix, run_id, r.strategy, r.seed)
    write_csv(out / "results.csv", rows)
    (out / "config.ini").write_text(cfg.source_text)
    _dump_json(out / "config.json", {"config_hash": chash, "config": cfg.to_dict()})

    summary = {"run_id": run_id, "config_hash": chash, "name": cfg.name, "strategies": {}}
    timings = {"run_id": run_id, "config_hash": chash, "runs": []}
    for strategy in cfg.strategies:
        per_seed = [r for r in result.results if r.strategy == strategy]
        series = np.array([r.series for r in per_seed])
        summary["strategies"][strategy] = {
            "seeds": {
                str(r.seed): {
                    "seed": r.seed,
                    "series": r.series,
                    "final": r.series[-1],
                    "distillations": r.distillations,
                    "stream": r.stream_meta,
                }
                for r in per_seed
            },
            "mean_series": series.mean(axis=0).tolist(),
            "mean_final": float(series[:, -1].mean()),
            "report": " ".join(f"{a:.2f}" for a in series.mean(axis=0)),
        }
        for r in per_seed:
            timings["runs"].append({"strategy": strategy, "seed": r.seed, "experiences": r.timings})
    _dump_json(out / "summary.json", summary)
    _dump_json(out / "timings.json", timings)

    (out / "memories").mkdir(exist_ok=True)
    (out / "params").mkdir(exist_ok=True)
    for r in result.results:
        if r.result is None:
            continue
        for mem in r.result.memories:
            save_memory(
                out / "memories" / f"{r.strategy}_seed{r.seed}_exp{mem.source_experience}.drb",
                mem,
                {"config_hash": chash, "seed": r.seed, "strategy": r.strategy},
            )
        save_params(out / "params" / f"{r.strategy}_seed{r.seed}.drb", r.spec, r.result.params)
    return out


# -- ablation ----------------------------------------------------------------


def ablation(cfg: RunConfig, output_dir=None, write: bool = True) -> dict:
    """Distilled replay under both distillation objectives, all else equal."""
    out = Path(output_dir or cfg.output_dir)
    arms = {}
    for arm, change in ABLATION_ARMS.items():
        arm_cfg = replace(cfg, strategies=("distilled_replay",)).with_distill(**change)
        arms[arm] = run(arm_cfg, out / arm, write=write)
    report = {
        "config_hash": cfg.hash(),
        "arms": {
            arm: {
                **ABLATION_ARMS[arm],
                "R": res.config.distill.R,
                "S": res.config.distill.S,
                "mean_series": res.series("distilled_replay").mean(axis=0).tolist(),
                "mean_final": res.mean_final("distilled_replay"),
            }
            for arm, res in arms.items()
        },
    }
    if write:
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "ablation.json", report)
        lines = ["arm,seed,experience,average_accuracy"]
        for arm, res in arms.items():
            for r in res.results:
                lines += [f"{arm},{r.seed},{t},{a!r}" for t, a in enumerate(r.series, start=1)]
        (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    report["results"] = arms
    return report


# -- timing ------------------------------------------------------------------


def _time_distill(exp, spec, dcfg: DistillConfig, dist, repeats: int) -> list[float]:
    mem = init_memory(exp, dcfg.per_class, derive_seed(dcfg.seed, "timing-memory"), dist.dtype)
    times = []
    for k in range(repeats + 1):
        t0 = time.perf_counter()
        distill(exp, spec, dcfg, dist, mem)
        if k:  # first iteration is warmup
            times.append(time.perf_counter() - t0)
    return times


def linear_fit_r2(xs, ys) -> float:
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    return 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0


def timing(cfg: RunConfig, output_dir=None, write: bool = True) -> dict:
    """Wall time of one distillation across an S grid (fixed R) and an R grid (fixed S)."""
    tc = cfg.timing
    seed = cfg.seeds[0]
    stream = build_stream(cfg, seed)
    spec = build_model(cfg, stream)
    exp = stream[tc.experience]
    dist = InitDistribution(dtype=cfg.train.dtype)
    rows = []
    for axis, grid in (("S", tc.s_grid), ("R", tc.r_grid)):
        for v in grid:
            fixed = {"S": v, "R": tc.fixed_R} if axis == "S" else {"S": tc.fixed_S, "R": v}
            dcfg = replace(cfg.distill, workers=1, **fixed)
            ts = _time_distill(exp, spec, dcfg, dist, tc.repeats)
            rows.append({"axis": axis, "value": v, "mean_seconds": float(np.mean(ts)),
                         "std_seconds": float(np.std(ts)), "repeats": len(ts), **fixed})
            log.info("timing %s=%d: %.3fs", axis, v, np.mean(ts))
    s_rows = [r for r in rows if r["axis"] == "S"]
    r_rows = [r for r in rows if r["axis"] == "R"]
    report = {
        "rows": rows,
        "s_fit_r2": linear_fit_r2([r["value"] for r in s_rows], [r["mean_seconds"] for r in s_rows]) if len(s_rows) > 1 else None,
        "r_fit_r2": linear_fit_r2([r["value"] for r in r_rows], [r["mean_seconds"] for r in r_rows]) if len(r_rows) > 1 else None,
        "r_doubling_ratios": [
            b["mean_seconds"] / a["mean_seconds"]
            for a, b in zip(r_rows, r_rows[1:])
            if b["value"] == 2 * a["value"]
        ],
    }
    if write:
        out = Path(output_dir or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["axis,value,S,R,mean_seconds,std_seconds,repeats"]
        lines += [f"{r['axis']},{r['value']},{r['S']},{r['R']},{r['mean_seconds']:.6f},{r['std_seconds']:.6f},{r['repeats']}" for r in rows]
        (out / "timing.csv").write_text("\n".join(lines) + "\n")
        _dump_json(out / "timing.json", report)
    return report


# -- standalone distillation and export --------------------------------------


def distill_one(cfg: RunConfig, experience: int, seed: Optional[int] = None, output=None) -> Path:
    seed = cfg.seeds[0] if seed is None else seed
    stream = build_stream(cfg, seed)
    spec = build_model(cfg, stream)
    exp = stream[experience]
    dcfg = replace(cfg.distill, seed=derive_seed(cfg.distill.seed, seed), workers=1)
    mem = init_memory(exp, dcfg.per_class, derive_seed(seed, "init-memory", experience), cfg.train.dtype)
    mem = distill(exp, spec, dcfg, InitDistribution(dtype=cfg.train.dtype), mem)
    out = Path(output or Path(cfg.output_dir) / f"distilled_seed{seed}_exp{experience}.drb")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_memory(out, mem, {"config_hash": cfg.hash(), "seed": seed, "strategy": "distilled_replay"})
    return out


def to_u8(values: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and scale to 0..255, rounding half up."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _as_image(sample: np.ndarray) -> np.ndarray:
    if sample.ndim == 3 and sample.shape[0] == 1:
        return sample[0]
    if sample.ndim == 2:
        return sample
    flat = sample.reshape(-1)
    side = int(round(np.sqrt(flat.size)))
    return flat.reshape(side, side) if side * side == flat.size else flat.reshape(1, -1)


def write_pgm(path, image_u8: np.ndarray) -> None:
    h, w = image_u8.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + image_u8.tobytes())


def export_buffer(result_path, out_dir, png: bool = False) -> list[Path]:
    """Write each stored sample as an 8-bit grayscale PGM (and PNG if asked)."""
    result_path = Path(result_path)
    if result_path.is_dir():
        mem_dir = result_path / "memories" if (result_path / "memories").is_dir() else result_path
        files = sorted(mem_dir.glob("*.drb"))
    else:
        files = [result_path]
    if not files or not all(f.exists() for f in files):
        raise FileNotFoundError(f"no stored memory found at {result_path}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for f in files:
        mem, meta = load_memory(f)
        counts: dict = {}
        for sample, cls in zip(mem.samples, mem.classes):
            k = counts.get(int(cls), 0)
            counts[int(cls)] = k + 1
            stem = f"{f.stem}_exp{mem.source_experience:02d}_class{int(cls)}_{k}"
            img = to_u8(_as_image(np.asarray(sample)))
            write_pgm(out_dir / f"{stem}.pgm", img)
            written.append(out_dir / f"{stem}.pgm")
            if png:
                from PIL import Image

                Image.fromarray(img, mode="L").save(out_dir / f"{stem}.png")
                written.append(out_dir / f"{stem}.png")
    return written
