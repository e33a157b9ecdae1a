# app/services/experiment.py
import logging
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from app.config import RunConfig
from app.errors import LabError
from app.network import Classifier, FeatureExtractor, layer_diff, load_checkpoint
from app.schemas import AugKind, EpisodeResult, EpisodeSpec, FineTuneConfig, Report, TtaConfig
from app.services.evaluate import (
    aggregate,
    best_of,
    expected_gain,
    predict,
    predict_tta,
    summary_extras,
    v_measure_analysis,
)
from app.services.finetune import accuracy, episode_head, finetune_episode
from app.utils.datasets import Dataset, load_dataset, sample_episode
from app.utils.reporting import CSV_COLUMNS, config_hash, write_csv, write_json
from app.utils.rng import RngStream, rng_new

logger = logging.getLogger("fewshot_lab.experiment")


class EpisodeFailed(LabError):
    """An episode raised; carries its id so the run can report it."""

    def __init__(self, episode_id: int, message: str):
        super().__init__(episode_id, message)
        self.episode_id = episode_id
        self.message = message

    def __str__(self) -> str:
        return f"episode {self.episode_id} failed: {self.message}"


@dataclass(frozen=True)
class ExperimentContext:
    dataset: Dataset
    pretrained: FeatureExtractor
    spec: EpisodeSpec
    ft_cfg: FineTuneConfig
    tta: Optional[TtaConfig]
    seed: int
    config_hash: str = ""


def build_context(cfg: RunConfig) -> ExperimentContext:
    """Load the target data and pre-trained extractor a run config points at."""
    cfg.require_files("data.path", "model.checkpoint")
    dataset = load_dataset(cfg.data_path)
    pretrained, _ = load_checkpoint(cfg.model_checkpoint, input_size=cfg.model_input_size)
    return ExperimentContext(
        dataset=dataset,
        pretrained=pretrained,
        spec=cfg.episode_spec(),
        ft_cfg=cfg.finetune_config(),
        tta=cfg.tta_config(),
        seed=cfg.run_seed,
        config_hash=config_hash(cfg.echo()),
    )


def episode_rng(seed: int, episode_id: int) -> RngStream:
    return rng_new(seed).fork("experiment").fork(f"episode:{episode_id}")


def run_episode(ctx: ExperimentContext, episode_id: int) -> EpisodeResult:
    """Sample, fine-tune and evaluate one episode. Depends only on (ctx, episode_id)."""
    rng = episode_rng(ctx.seed, episode_id)
    episode = sample_episode(ctx.dataset, ctx.spec, rng.fork("sample"))
    model, trace = finetune_episode(ctx.pretrained, episode, ctx.ft_cfg, rng)

    if ctx.tta is not None:
        acc_last = accuracy(predict_tta(model, episode.query.images, ctx.tta, rng.fork("tta")), episode.query.label_a)
    elif trace.accuracies:
        acc_last = trace.accuracies[-1]
    else:
        acc_last = accuracy(predict(model, episode.query.images), episode.query.label_a)
    acc_best, best_epoch = best_of(trace, acc_last)

    v_pre, v_post = v_measure_analysis(ctx.pretrained, model.extractor, episode, rng)
    initial = Classifier(ctx.pretrained, episode_head(ctx.pretrained, episode.n_way, rng))
    diffs = layer_diff(initial.parameters(), model.parameters())

    return EpisodeResult(
        episode_id=episode_id,
        acc_last=acc_last,
        acc_best=acc_best,
        best_epoch=best_epoch,
        v_measure_pre=v_pre,
        v_measure_post=v_post,
        expected_gain=expected_gain(trace) if trace.accuracies else 1.0,
        layer_diffs=diffs,
        config_hash=ctx.config_hash,
    )


def _guarded(ctx: ExperimentContext, episode_id: int) -> EpisodeResult:
    try:
        return run_episode(ctx, episode_id)
    except EpisodeFailed:
        raise
    except Exception as e:
        raise EpisodeFailed(episode_id, f"{type(e).__name__}: {e}") from e


# ─── Worker pool ───────────────────────────────────────────────────────────
_WORKER_CTX: Optional[ExperimentContext] = None


def _init_worker(ctx: ExperimentContext) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _run_in_worker(episode_id: int) -> EpisodeResult:
    return _guarded(_WORKER_CTX, episode_id)


def run_experiment(
    ctx: ExperimentContext,
    episodes: int,
    workers: int = 1,
    on_episode: Optional[Callable[[EpisodeResult], None]] = None,
) -> Report:
    """
    Run episodes 0..E-1 and aggregate acc_last. Results are sorted by episode
    id before any reduction, so the report does not depend on `workers`.
    """
    if episodes < 1:
        raise ValueError(f"need at least one episode, got {episodes}")
    results: Dict[int, EpisodeResult] = {}

    def done(result: EpisodeResult) -> None:
        results[result.episode_id] = result
        logger.info(f"episode {len(results)}/{episodes} acc={result.acc_last:.4f}")
        if on_episode is not None:
            on_episode(result)

    if workers <= 1:
        for episode_id in range(episodes):
            done(_guarded(ctx, episode_id))
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(ctx,)) as pool:
            futures = [pool.submit(_run_in_worker, episode_id) for episode_id in range(episodes)]
            try:
                for future in as_completed(futures):
                    done(future.result())
            except EpisodeFailed:
                for future in futures:
                    future.cancel()
                raise

    rows = [results[i] for i in sorted(results)]
    mean, ci95 = aggregate([r.acc_last for r in rows])
    return Report(
        episodes=len(rows),
        mean=mean,
        ci95=ci95,
        rows=rows,
        extras=summary_extras(rows, ctx.ft_cfg.epochs),
    )


# ─── Artifacts ─────────────────────────────────────────────────────────────
def csv_rows(report: Report, ctx: ExperimentContext) -> List[Dict[str, Any]]:
    cfg, spec = ctx.ft_cfg, ctx.spec
    policy = cfg.da_policy
    tta_on = ctx.tta is not None and ctx.tta.v > 1
    shared = {
        "n": spec.n,
        "k": spec.k,
        "k_q": spec.k_q,
        "update_mode": str(cfg.mode),
        "da_policy": policy.kind.value,
        "da_preset": policy.preset.value if policy.kind != AugKind.NONE else "",
        "mix_mode": policy.mix_mode.value if policy.kind.is_mixing else "",
        "sched_start": cfg.schedule.start if cfg.schedule else "",
        "sched_end": cfg.schedule.end if cfg.schedule else "",
        "tta": "on" if tta_on else "off",
        "v": ctx.tta.v if tta_on else 1,
    }
    rows = []
    for r in report.rows:
        row = dict(shared)
        row.update(
            episode_id=r.episode_id,
            acc_last=r.acc_last,
            acc_best=r.acc_best,
            best_epoch=r.best_epoch,
            v_pre=r.v_measure_pre,
            v_post=r.v_measure_post,
        )
        row.update({f"diff:{group}": value for group, value in r.layer_diffs.items()})
        rows.append(row)
    return rows


def write_artifacts(
    report: Report,
    ctx: ExperimentContext,
    out_dir: Path,
    config_echo: Dict[str, Any],
    runtime_seconds: Optional[float] = None,
) -> Dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "results.csv"
    json_path = out_dir / "summary.json"
    groups = list(report.rows[0].layer_diffs) if report.rows else []
    write_csv(csv_path, CSV_COLUMNS + [f"diff:{g}" for g in groups], csv_rows(report, ctx))

    summary: Dict[str, Any] = {
        "config": config_echo,
        "config_hash": ctx.config_hash,
        "E": report.episodes,
        "mean": report.mean,
        "ci95": report.ci95,
        **report.extras,
    }
    if runtime_seconds is not None:
        summary["runtime_seconds"] = runtime_seconds
    write_json(json_path, summary)
    return {"csv": csv_path, "json": json_path}


class Stopwatch:
    def __enter__(self) -> "Stopwatch":
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc) -> None:
        self.seconds = time.perf_counter() - self.start


def execute_run(
    cfg: RunConfig,
    out_dir: Path,
    on_episode: Optional[Callable[[EpisodeResult], None]] = None,
) -> Report:
    """build_context + run_experiment + write_artifacts; runtime is logged and only written on request."""
    ctx = build_context(cfg)
    with Stopwatch() as clock:
        report = run_experiment(ctx, cfg.run_episodes, workers=cfg.run_workers, on_episode=on_episode)
    logger.info(
        f"✅ {report.episodes} episodes: mean={report.mean:.4f} ± {report.ci95:.4f} in {clock.seconds:.1f}s"
    )
    write_artifacts(
        report,
        ctx,
        out_dir,
        cfg.echo(),
        runtime_seconds=clock.seconds if cfg.run_record_runtime else None,
    )
    return report
