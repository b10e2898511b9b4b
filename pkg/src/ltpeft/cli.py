"""CLI commands for ltpeft."""

from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np
import typer
from rich.console import Console

from .backbone import BackboneParams, ViTConfig
from .checkpoint import Checkpoint, checkpoint_name, load_checkpoint, save_checkpoint
from .config import RunConfig, eval_threads, keys_help, render_config
from .data import Benchmark, LongTailDataset, generate_dataset, load_benchmark, render_source, save_benchmark, shot_split
from .display import (
    display_conflicts,
    display_feature_reports,
    display_split_reports,
    write_feature_csv,
    write_history_csv,
    write_per_class_csv,
    write_split_csv,
)
from .errors import ConfigError, DependencyError, LtpeftError
from .inference import (
    Expert,
    backbone_checkpoint,
    backbone_from_checkpoint,
    expert_from_checkpoint,
    expert_scores,
    map_batches,
    query_features,
    score_table,
)
from .logger import LOG_FILE_NAME, log_error, log_operation, setup_logger
from .metrics import FeatureReport, SplitReport, feature_report, split_accuracy
from .moe import (
    ExpertScores,
    ScoreTable,
    build_conflict_set,
    fuse,
    moe_scores,
    run_phase3,
    scorer_checkpoint,
    scorer_from_checkpoint,
)
from .trainer import EpochRecord, TrainState, class_centric_init, pretrain_backbone, run_joint, run_phase1, run_phase2
from .version import __version__

app = typer.Typer(
    help="Long-tailed classification with prompts, adapters and a two-expert mixture",
    epilog="[bold]Config keys[/bold] (default, source):\n\n" + keys_help(),
    add_completion=True,
    rich_markup_mode="rich",
)
console = Console()

_state: dict[str, Any] = {"verbose": False}

CONFIG_OPTION = typer.Option(None, "--config", "-c", help="Run configuration (TOML)")
OUT_OPTION = typer.Option(Path("runs"), "--out", "-o", help="Output directory")
IN_OPTION = typer.Option(None, "--in", "-i", help="Directory with the previous stage (default: --out)")
EXPERT_OPTION = typer.Option(None, "--expert", "-e", help="Train expert 1 or 2 (overrides the config)")
RESUME_OPTION = typer.Option(False, "--resume", help="Continue from the stage checkpoint in --out")
UNTIL_OPTION = typer.Option(None, "--until-epoch", help="Stop after this epoch; finish later with --resume")
SCORES1_OPTION = typer.Option(None, "--scores1", help="Expert 1 scores CSV (sample_id,label,s_0..), e.g. from export-scores")
SCORES2_OPTION = typer.Option(None, "--scores2", help="Expert 2 scores CSV with the same samples and labels")


def version_callback(value: bool) -> None:
    """Show version and exit."""
    if value:
        console.print(f"ltpeft {__version__}")
        raise typer.Exit()


@app.callback()
def main(
    _version: bool = typer.Option(
        False,
        "--version",
        "-V",
        callback=version_callback,
        is_eager=True,
        help="Show version and exit",
    ),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Also log to stderr"),
) -> None:
    """
    Train and evaluate long-tailed prompt-tuned experts on a synthetic benchmark.

    Examples:
        ltpeft gen-data -c configs/desk.toml
        ltpeft pretrain -c configs/desk.toml -o runs/e1
        ltpeft phase1 -c configs/desk.toml -o runs/e1
        ltpeft phase2 -c configs/desk.toml -o runs/e1
        ltpeft phase3 --vo runs/e1 --vl runs/e2 -o runs/moe
        ltpeft phase3 --scores1 s1-train.csv --scores2 s2-train.csv -o runs/moe

    """
    _state["verbose"] = verbose


@contextmanager
def _guard(command: str, out: Path | None = None) -> Iterator[None]:
    """Configure logging for ``command`` and turn library errors into exit codes."""
    logger = setup_logger(_state["verbose"], out / LOG_FILE_NAME if out is not None else None)
    log_operation(logger, command)
    try:
        yield
    except LtpeftError as e:
        log_error(logger, f"{command} failed: {e}", operation=command)
        console.print(f"[red]Error:[/red] {e}")
        raise typer.Exit(code=e.exit_code) from e


def _load_config(path: Path | None, expert: int | None = None) -> RunConfig:
    config = RunConfig.load(path)
    return config if expert is None else config.with_values(expert=expert)


def _require(path: Path, stage: str, hint: str) -> Path:
    if not path.is_file():
        raise DependencyError(f"{stage} needs {path}; run `ltpeft {hint}` first")
    return path


def _benchmark(config: RunConfig) -> Benchmark:
    directory = Path(config.data_dir)
    for name in ("source.ltds", "target-train.ltds", "target-val.ltds"):
        _require(directory / name, "training", "gen-data")
    return load_benchmark(directory)


def _backbone(directory: Path, stage: str) -> tuple[Checkpoint, BackboneParams, ViTConfig]:
    ckpt = load_checkpoint(_require(directory / checkpoint_name("backbone"), stage, "pretrain"), stage="backbone")
    backbone, vit = backbone_from_checkpoint(ckpt)
    return ckpt, backbone, vit


def _resume(out: Path, stage: str, resume: bool) -> Checkpoint | None:
    if not resume:
        return None
    return load_checkpoint(_require(out / checkpoint_name(stage), f"resuming {stage}", stage), stage=stage)


def _history(ckpt: Checkpoint) -> list[EpochRecord]:
    return TrainState.from_checkpoint(ckpt).history


def _finish(ckpt: Checkpoint, out: Path, history: list[EpochRecord]) -> None:
    path = save_checkpoint(ckpt, out / checkpoint_name(ckpt.stage))
    metrics = write_history_csv(history, out / f"{ckpt.stage}-metrics.csv")
    console.print(f"[green]✓[/green] {ckpt.stage}: {path} and {metrics}")


@app.command(name="config")
def config_cmd(
    config: Path | None = CONFIG_OPTION,
    out: Path | None = typer.Option(None, "--out", "-o", help="Write the document here instead of printing it"),
) -> None:
    """Show the configuration document (every key, commented)."""
    with _guard("config"):
        document = render_config(RunConfig.load(config))
        if out is None:
            console.print(document, markup=False, highlight=False)
            return
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(document, encoding="utf-8")
        console.print(f"[green]✓[/green] Wrote {out}")


@app.command(name="gen-data")
def gen_data(
    config: Path | None = CONFIG_OPTION,
    out: Path | None = typer.Option(None, "--out", "-o", help="Dataset directory (default: data_dir)"),
) -> None:
    """Generate the synthetic source and long-tailed target datasets."""
    with _guard("gen-data", out):
        run = _load_config(config)
        directory = out if out is not None else Path(run.data_dir)
        try:
            paths = save_benchmark(generate_dataset(run.dataset_spec()), directory)
        except OSError as e:
            raise DependencyError(f"cannot write datasets to {directory}: {e}") from e
        for path in paths:
            console.print(f"[green]✓[/green] {path}")


@app.command(name="pretrain")
def pretrain(
    config: Path | None = CONFIG_OPTION,
    out: Path = OUT_OPTION,
    expert: int | None = EXPERT_OPTION,
) -> None:
    """Pretrain a backbone on the source split and freeze it."""
    with _guard("pretrain", out):
        run = _load_config(config, expert)
        spec = run.dataset_spec()
        source = _benchmark(run).source
        if run.expert == 2:
            source = render_source(spec, run.expert2_source_seed)
        vit = run.vit_config()
        history: list[EpochRecord] = []
        backbone = pretrain_backbone(source, vit, run.pretrain_config(), history)
        meta = {"expert": run.expert, "pretrain": asdict(run.pretrain_config()), "history": [asdict(r) for r in history]}
        _finish(backbone_checkpoint(backbone, vit, meta), out, history)


@app.command(name="phase1")
def phase1(
    config: Path | None = CONFIG_OPTION,
    source_dir: Path | None = IN_OPTION,
    out: Path = OUT_OPTION,
    expert: int | None = EXPERT_OPTION,
    resume: bool = RESUME_OPTION,
    until_epoch: int | None = UNTIL_OPTION,
) -> None:
    """Train the shared prompt, adapters and classifier (or a linear probe)."""
    with _guard("phase1", out):
        run = _load_config(config, expert)
        _, backbone, vit = _backbone(source_dir or out, "phase1")
        train = _benchmark(run).train
        ckpt = run_phase1(
            backbone, vit, train, run.train_config(), run.gcl_config(), _resume(out, "phase1", resume), until_epoch
        )
        _finish(ckpt, out, _history(ckpt))


@app.command(name="phase2")
def phase2(
    config: Path | None = CONFIG_OPTION,
    source_dir: Path | None = IN_OPTION,
    out: Path = OUT_OPTION,
    expert: int | None = EXPERT_OPTION,
    resume: bool = RESUME_OPTION,
    until_epoch: int | None = UNTIL_OPTION,
) -> None:
    """Train the group prompt pool on top of a finished phase 1."""
    with _guard("phase2", out):
        run = _load_config(config, expert)
        directory = source_dir or out
        _, backbone, _ = _backbone(directory, "phase2")
        first = load_checkpoint(
            _require(directory / checkpoint_name("phase1"), "phase2", "phase1"),
            backbone.digest(),
            stage="phase1",
        )
        train = _benchmark(run).train
        ckpt = run_phase2(
            first, backbone, train, run.train_config(), run.gcl_config(), _resume(out, "phase2", resume), until_epoch
        )
        _finish(ckpt, out, _history(ckpt))


@app.command(name="joint")
def joint(
    config: Path | None = CONFIG_OPTION,
    source_dir: Path | None = IN_OPTION,
    out: Path = OUT_OPTION,
    expert: int | None = EXPERT_OPTION,
    resume: bool = RESUME_OPTION,
    until_epoch: int | None = UNTIL_OPTION,
) -> None:
    """Train every prompt, adapter and key at once for twice the phase epochs."""
    with _guard("joint", out):
        run = _load_config(config, expert)
        _, backbone, vit = _backbone(source_dir or out, "joint")
        train = _benchmark(run).train
        ckpt = run_joint(
            backbone, vit, train, run.train_config(), run.gcl_config(), _resume(out, "joint", resume), until_epoch
        )
        _finish(ckpt, out, _history(ckpt))


def _load_expert(path: Path) -> Expert:
    """Expert stored at ``path`` on the backbone saved next to it."""
    ckpt = load_checkpoint(_require(path, "evaluation", "phase1"))
    if ckpt.stage not in ("phase1", "phase2", "joint"):
        raise DependencyError(f"{path} holds a {ckpt.stage} checkpoint, not a trained expert")
    _, backbone, _ = _backbone(path.parent, "evaluation")
    return expert_from_checkpoint(ckpt, backbone)


def _stage_expert(directory: Path, stage: str) -> Expert:
    _, backbone, _ = _backbone(directory, "phase3")
    ckpt = load_checkpoint(
        _require(directory / checkpoint_name(stage), "phase3", stage), backbone.digest(), stage=stage
    )
    return expert_from_checkpoint(ckpt, backbone)


def _pair_scores(vo: Expert, vl: Expert, dataset: LongTailDataset, run: RunConfig) -> ExpertScores:
    threads = eval_threads()
    return ExpertScores.pair(
        score_table(vo, dataset, run.eval_batch_size, threads, "Scoring expert 1"),
        score_table(vl, dataset, run.eval_batch_size, threads, "Scoring expert 2"),
    )


def _csv_pair(scores1: Path | None, scores2: Path | None) -> ExpertScores | None:
    """Score tables imported from CSV, aligned by sample id; ``None`` when neither is given.

    Raises:
        DependencyError: When only one of the two files is given
        DataError: When the tables cover different samples or disagree on labels

    """
    if scores1 is None and scores2 is None:
        return None
    if scores1 is None or scores2 is None:
        raise DependencyError("--scores1 and --scores2 must be given together")
    return ExpertScores.pair(ScoreTable.load_csv(scores1), ScoreTable.load_csv(scores2))


@app.command(name="phase3")
def phase3(
    config: Path | None = CONFIG_OPTION,
    vo_dir: Path | None = typer.Option(None, "--vo", help="Stage directory of expert 1"),
    vl_dir: Path | None = typer.Option(None, "--vl", help="Stage directory of expert 2"),
    scores1: Path | None = SCORES1_OPTION,
    scores2: Path | None = SCORES2_OPTION,
    out: Path = OUT_OPTION,
    stage: str = typer.Option("phase2", "--stage", help="Expert checkpoints to fuse (phase2 or joint)"),
) -> None:
    """Search the base weight and fit the mixture scorer on training-set scores.

    The experts come from stage directories (--vo/--vl) or from training-split
    score CSVs (--scores1/--scores2) produced by any model.
    """
    with _guard("phase3", out):
        run = _load_config(config)
        scores = _csv_pair(scores1, scores2)
        if scores is not None:
            if vo_dir is not None or vl_dir is not None:
                raise ConfigError("use either --vo/--vl or --scores1/--scores2, not both")
            meta: dict[str, Any] = {"vo_scores": str(scores1), "vl_scores": str(scores2)}
        else:
            if vo_dir is None or vl_dir is None:
                raise DependencyError("phase3 needs --vo and --vl, or --scores1 and --scores2")
            vo = _stage_expert(vo_dir, stage)
            vl = _stage_expert(vl_dir, stage)
            scores = _pair_scores(vo, vl, _benchmark(run).train, run)
            meta = {"vo_digest": vo.digest(), "vl_digest": vl.digest()}
        state = run_phase3(scores, run.moe_config())
        display_conflicts(build_conflict_set(scores), state.w_base)
        meta["moe"] = asdict(run.moe_config())
        path = save_checkpoint(scorer_checkpoint(state, meta), out / checkpoint_name("moe"))
        history = [
            EpochRecord("phase3", epoch + 1, None, float(loss), run.moe_lr, float("nan"))
            for epoch, loss in enumerate(state.meta.get("history", []))
        ]
        metrics = write_history_csv(history, out / "phase3-metrics.csv")
        console.print(f"[green]✓[/green] moe: {path} and {metrics}")


def _report(scores: np.ndarray, labels: np.ndarray, train: LongTailDataset, run: RunConfig) -> SplitReport:
    spec = run.dataset_spec()
    tags = shot_split(train.per_class(), *spec.thresholds)
    return split_accuracy(scores.argmax(axis=1), labels, tags)


@app.command(name="eval")
def evaluate(
    config: Path | None = CONFIG_OPTION,
    ckpt: Path | None = typer.Option(None, "--ckpt", help="Stage checkpoint to evaluate"),
    ckpt2: Path | None = typer.Option(None, "--ckpt2", help="Second expert (needed with --moe)"),
    moe: Path | None = typer.Option(None, "--moe", help="Mixture scorer checkpoint"),
    scores1: Path | None = SCORES1_OPTION,
    scores2: Path | None = SCORES2_OPTION,
    out: Path | None = typer.Option(None, "--out", "-o", help="Report directory (default: next to --ckpt)"),
) -> None:
    """Report overall and many/medium/few accuracy on the target val split.

    With --moe the two experts come from --ckpt/--ckpt2 or from val-split
    score CSVs (--scores1/--scores2).
    """
    anchor = ckpt or moe
    directory = out or (anchor.parent if anchor is not None else Path("."))
    with _guard("eval", directory):
        run = _load_config(config)
        benchmark = _benchmark(run)
        threads = eval_threads()
        reports: dict[str, SplitReport] = {}

        imported = _csv_pair(scores1, scores2)
        if imported is not None:
            if moe is None:
                raise DependencyError("--scores1/--scores2 need a mixture scorer via --moe")
            if ckpt is not None or ckpt2 is not None:
                raise ConfigError("use either --ckpt/--ckpt2 or --scores1/--scores2, not both")
            state = scorer_from_checkpoint(load_checkpoint(_require(moe, "eval", "phase3"), stage="moe"))
            reports["expert1"] = _report(imported.s_vo, imported.labels, benchmark.train, run)
            reports["expert2"] = _report(imported.s_vl, imported.labels, benchmark.train, run)
            reports["w_base"] = _report(
                fuse(imported.s_vo, imported.s_vl, state.w_base), imported.labels, benchmark.train, run
            )
            reports["moe"] = _report(moe_scores(state, imported), imported.labels, benchmark.train, run)
            display_split_reports(reports)
            write_split_csv(reports, directory / "eval.csv")
            write_per_class_csv(reports, directory / "eval-per-class.csv")
            return

        if ckpt is None:
            raise DependencyError("eval needs --ckpt, or --moe with --scores1 and --scores2")
        head = load_checkpoint(_require(ckpt, "eval", "phase1"))
        if head.stage == "backbone":
            backbone, vit = backbone_from_checkpoint(head)
            first = Expert(vit, backbone, class_centric_init(backbone, benchmark.train, vit, run.eval_batch_size))
            name = "frozen"
        else:
            first = _load_expert(ckpt)
            name = head.stage
        s_first = expert_scores(first, benchmark.val, run.eval_batch_size, threads, f"Scoring {name}")
        labels = benchmark.val.labels
        reports[name] = _report(s_first, labels, benchmark.train, run)

        if moe is not None:
            if ckpt2 is None:
                raise DependencyError("--moe needs the second expert via --ckpt2")
            second = _load_expert(ckpt2)
            state = scorer_from_checkpoint(load_checkpoint(_require(moe, "eval", "phase3"), stage="moe"))
            if state.meta.get("vo_digest") not in (None, first.digest()) or state.meta.get("vl_digest") not in (
                None,
                second.digest(),
            ):
                raise DependencyError(f"{moe} was fitted on different experts")
            s_second = expert_scores(second, benchmark.val, run.eval_batch_size, threads, "Scoring expert 2")
            pair = ExpertScores(s_first, s_second, labels)
            reports["expert2"] = _report(s_second, labels, benchmark.train, run)
            reports["w_base"] = _report(fuse(s_first, s_second, state.w_base), labels, benchmark.train, run)
            reports["moe"] = _report(moe_scores(state, pair), labels, benchmark.train, run)

        display_split_reports(reports)
        write_split_csv(reports, directory / "eval.csv")
        write_per_class_csv(reports, directory / "eval-per-class.csv")


@app.command(name="analyze")
def analyze(
    config: Path | None = CONFIG_OPTION,
    ckpt: Path = typer.Option(..., "--ckpt", help="Phase-1, phase-2 or joint checkpoint"),
    out: Path | None = typer.Option(None, "--out", "-o", help="Report directory (default: next to --ckpt)"),
) -> None:
    """K-NN accuracy and cluster separability of frozen versus adapted features."""
    directory = out or ckpt.parent
    with _guard("analyze", directory):
        run = _load_config(config)
        benchmark = _benchmark(run)
        expert = _load_expert(ckpt)
        threads = eval_threads()
        bs = run.eval_batch_size

        def report(name: str, train_feats: np.ndarray, val_feats: np.ndarray) -> FeatureReport:
            return feature_report(
                name,
                train_feats,
                benchmark.train.labels,
                val_feats,
                benchmark.val.labels,
                run.knn_k,
                run.cluster_metric,
            )

        reports = [
            report(
                "frozen",
                query_features(expert, benchmark.train, "frozen", bs, threads),
                query_features(expert, benchmark.val, "frozen", bs, threads),
            )
        ]
        if expert.prompts is not None:
            reports.append(
                report(
                    "phase1",
                    query_features(expert, benchmark.train, "phase1", bs, threads),
                    query_features(expert, benchmark.val, "phase1", bs, threads),
                )
            )
        if expert.phase == "phase2":
            reports.append(
                report(
                    "phase2",
                    map_batches(expert.features, benchmark.train, bs, threads),
                    map_batches(expert.features, benchmark.val, bs, threads),
                )
            )
        display_feature_reports(reports)
        write_feature_csv(reports, directory / "analyze.csv")


@app.command(name="export-scores")
def export_scores(
    config: Path | None = CONFIG_OPTION,
    ckpt: Path = typer.Option(..., "--ckpt", help="Stage checkpoint"),
    split: str = typer.Option("val", "--split", help="train or val"),
    out: Path = typer.Option(..., "--out", "-o", help="CSV file to write"),
) -> None:
    """Write one expert's raw scores as sample_id,label,s_0..s_{C-1}."""
    with _guard("export-scores", out.parent):
        if split not in ("train", "val"):
            raise ConfigError(f"unknown split {split!r}; use train or val")
        run = _load_config(config)
        benchmark = _benchmark(run)
        dataset = benchmark.train if split == "train" else benchmark.val
        table = score_table(_load_expert(ckpt), dataset, run.eval_batch_size, eval_threads(), "Scoring")
        console.print(f"[green]✓[/green] {table.save_csv(out)}")
