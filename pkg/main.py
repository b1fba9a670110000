import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional

from dotenv import load_dotenv
from pydantic import ValidationError
from rich.console import Console
from rich.markup import escape
from rich.progress import (
    BarColumn,
    MofNCompleteColumn,
    Progress,
    TextColumn,
    TimeElapsedColumn,
)
from rich.table import Table

from corpus import (
    Dataset,
    DatasetError,
    DatasetRole,
    ParallelPair,
    TaskKind,
    language_from_code,
    pair_from_record,
    read_dataset,
    read_parallel,
    take_subset,
    write_dataset,
)
from evaluate import (
    LANGUAGE_TOKENIZERS,
    TOKENIZERS,
    EvaluationError,
    corpus_bleu,
    evaluate_predictions,
    summarize_scores,
    welch_t_test,
)
from filters import FilterStats, filter_candidates, write_rejections
from gateway import Gateway, GatewayError
from prompting import PromptError
from settings import ConfigError, PipelineConfig, load_config, save_config
from synthesize import (
    assemble_training_mix,
    build_code_switch,
    build_target_dataset,
    export_training_records,
)
from translate import (
    INPUT_FIELDS,
    build_field_banks,
    default_budgets,
    read_candidates,
    translate_dataset,
    translate_test_inputs,
    write_candidates,
)
from utilities import RunManifest, format_rate, iter_jsonl, read_jsonl, write_json, write_jsonl

# Setup logger
logger = logging.getLogger(__name__)
console = Console()

PROJECT_LOGGERS = (
    "__main__",
    "main",
    "corpus",
    "prompting",
    "gateway",
    "translate",
    "filters",
    "synthesize",
    "evaluate",
    "settings",
    "utilities",
)

CONFIG_FILE = "config.json"
BANKS_FILE = "banks.json"
CANDIDATES_FILE = "candidates.jsonl"
MANIFEST_FILE = "manifest.json"
KEPT_FILE = "kept.jsonl"
REJECTIONS_FILE = "rejections.jsonl"
TRANSLATE_TEST_FILE = "translate_test.jsonl"
TRANSLATE_TEST_MANIFEST = "manifest_translate_test.json"

ARMS = ("tgt", "cs")


def configure_logging(debug: bool = False) -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s")
    for name in PROJECT_LOGGERS:
        logging.getLogger(name).setLevel(logging.DEBUG if debug else logging.INFO)

    # Suppress verbose logs from libraries
    for name in ("openai", "httpx", "httpcore"):
        logging.getLogger(name).setLevel(logging.WARNING)


def parse_arms(text: str) -> set[str]:
    """Parse a comma-separated arm list such as "tgt,cs"; "" selects the baseline only."""
    arms = {part.strip() for part in text.split(",") if part.strip()}
    unknown = arms - set(ARMS)
    if unknown:
        raise ValueError(f"unknown arm(s) {', '.join(sorted(unknown))}, choose from {', '.join(ARMS)}")
    return arms


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "in_flight": getattr(args, "in_flight", None),
        "output_dir": getattr(args, "output_dir", None),
    }
    return load_config(args.config, overrides)


def prepare_output(config: PipelineConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / CONFIG_FILE)
    return out


def load_source(config: PipelineConfig) -> Dataset:
    dataset = read_dataset(config.input_path, config.task, config.source_language())
    if config.subset.n is not None:
        dataset = take_subset(dataset, config.subset.n, config.subset.seed, head=config.subset.head)
    return dataset


def load_seed_pairs(config: PipelineConfig, reverse: bool = False) -> list[ParallelPair]:
    src, tgt = config.source_language(), config.target_language()
    if reverse:
        return read_parallel(config.fewshot.tgt_path, config.fewshot.src_path, config.task, tgt, src)
    return read_parallel(config.fewshot.src_path, config.fewshot.tgt_path, config.task, src, tgt)


def progress_bar() -> Progress:
    return Progress(
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TextColumn("•"),
        TimeElapsedColumn(),
        console=console,
        transient=True,
    )


async def translate_with_progress(config: PipelineConfig, dataset: Dataset, banks, budgets, gateway):
    tgt = config.target_language()
    with progress_bar() as progress:
        task = progress.add_task(f"[cyan]Translating into {tgt.display_name}...", total=None)
        return await translate_dataset(
            dataset,
            tgt,
            banks,
            budgets,
            gateway,
            backtick_policy=config.backtick_policy,
            on_progress=lambda n: progress.advance(task, n),
            on_planned=lambda total: progress.update(task, total=total),
        )


def translate_stage(config: PipelineConfig, out: Path) -> RunManifest:
    """Translate the source data and write candidates, banks and the manifest."""
    dataset = load_source(config)
    banks = build_field_banks(
        load_seed_pairs(config), config.task, k=config.fewshot.k, seed=config.fewshot.seed
    )
    write_json(out / BANKS_FILE, {name: bank.to_json() for name, bank in banks.items()})
    budgets = default_budgets(config.task, config.budgets)
    gateway = Gateway.from_config(config.backend)

    candidates, manifest = asyncio.run(translate_with_progress(config, dataset, banks, budgets, gateway))
    write_candidates(out / CANDIDATES_FILE, candidates)
    manifest.save(out / MANIFEST_FILE)

    unterminated = manifest.counts.get("fields_unterminated", 0)
    console.print(
        f"[green]Translated {dataset.size} samples ({manifest.counts.get('requests', 0)} requests)[/green]"
    )
    if unterminated:
        console.print(f"[yellow]{unterminated} field(s) did not end with the stop sequence[/yellow]")
    for warning in manifest.warnings:
        console.print(f"[yellow]Warning: {escape(warning)}[/yellow]")
    return manifest


def filter_stage(config: PipelineConfig, out: Path) -> FilterStats:
    """Apply the quality filter to the candidates of a translate run."""
    src, tgt = config.source_language(), config.target_language()
    candidates = read_candidates(out / CANDIDATES_FILE, config.task, src, tgt)
    manifest = RunManifest.load(out / MANIFEST_FILE)
    result = filter_candidates(candidates, config.filter_config(), manifest)
    write_jsonl(out / KEPT_FILE, (pair.to_record() for pair in result.kept))
    write_rejections(out / REJECTIONS_FILE, result.rejections)
    manifest.save(out / MANIFEST_FILE)

    stats = result.stats
    console.print(
        f"[green]Kept {stats.kept}/{stats.total} samples[/green] "
        f"({format_rate(stats.removal_rate)} removed)"
    )
    for reason, count in stats.rejected_by_reason.items():
        console.print(f"  - {reason}: {count}")
    return stats


def read_kept(config: PipelineConfig, path: Path) -> list[ParallelPair]:
    src, tgt = config.source_language(), config.target_language()
    pairs = []
    for line_number, line in iter_jsonl(path):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}:{line_number}: malformed JSON line", line_number=line_number) from e
        pairs.append(pair_from_record(record, config.task, src, tgt, line_number=line_number))
    return pairs


def mix_plan(arms: set[str]) -> list[tuple[str, dict[str, Any]]]:
    """Training mixes per requested arm, each as (name, assemble_training_mix options)."""
    plan: list[tuple[str, dict[str, Any]]] = [("mix_src", {})]
    if "tgt" in arms:
        plan.append(("mix_src+tgt", {"tgt": True}))
        plan.append(("mix_tgt", {"tgt": True, "include_src": False}))
    if "cs" in arms:
        name = "mix_src+tgt+cs" if "tgt" in arms else "mix_src+cs"
        plan.append((name, {"tgt": "tgt" in arms, "cs": True}))
    return plan


def synthesize_stage(config: PipelineConfig, out: Path, arms: set[str]) -> dict[str, int]:
    """Build D_tgt / D_cs from the kept pairs and write every training mix of the requested arms.

    Returns:
        dict: Sample count per written mix
    """
    kept_path = out / KEPT_FILE
    if not kept_path.exists():
        raise FileNotFoundError(f"No filtered pairs at {kept_path}; run the filter step first")
    kept = read_kept(config, kept_path)
    manifest_path = out / MANIFEST_FILE
    manifest = (
        RunManifest.load(manifest_path)
        if manifest_path.exists()
        else RunManifest(task=config.task.value, src_lang=config.src_lang, tgt_lang=config.tgt_lang)
    )
    src, tgt = config.source_language(), config.target_language()

    d_src = load_source(config)
    seed_set = read_dataset(config.fewshot.tgt_path, config.task, tgt, role=DatasetRole.TARGET)
    seeds = take_subset(seed_set, config.fewshot.k, config.fewshot.seed).samples

    d_tgt = build_target_dataset(kept, task=config.task, tgt_lang=tgt)
    d_cs = None
    if "tgt" in arms:
        write_dataset(d_tgt, out / "d_tgt.jsonl")
    if "cs" in arms:
        d_cs = build_code_switch(
            kept, config.instruction_table, task=config.task, src_lang=src, tgt_lang=tgt, manifest=manifest
        )
        write_dataset(d_cs, out / "d_cs.jsonl")

    sizes = {}
    for name, options in mix_plan(arms):
        mix = assemble_training_mix(
            d_src,
            d_tgt if options.get("tgt") else None,
            d_cs if options.get("cs") else None,
            seeds,
            config.shuffle_seed,
            include_src=options.get("include_src", True),
            seed_lang=tgt,
            manifest=manifest,
            name=name,
        )
        write_dataset(mix, out / f"{name}.jsonl")
        export_training_records(mix, out / f"records_{name}.jsonl")
        sizes[name] = mix.size
        console.print(f"[green]{name}:[/green] {mix.size} samples")
    manifest.save(manifest_path)
    return sizes


def cmd_translate(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    translate_stage(config, prepare_output(config))
    return 0


def cmd_filter(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    filter_stage(config, prepare_output(config))
    return 0


def cmd_synthesize(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    synthesize_stage(config, prepare_output(config), parse_arms(args.arms))
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    """translate, then filter, then synthesize with one config."""
    config = config_from_args(args)
    arms = parse_arms(args.arms)
    out = prepare_output(config)
    console.print(f"[cyan]Running {config.task.value} {config.src_lang}->{config.tgt_lang} into {out}[/cyan]")
    translate_stage(config, out)
    filter_stage(config, out)
    synthesize_stage(config, out, arms)
    return 0


def cmd_translate_test(args: argparse.Namespace) -> int:
    """Translate target-language evaluation inputs into the source language."""
    config = config_from_args(args)
    if config.test_input_path is None:
        raise ConfigError("translate-test needs test_input_path in the config")
    if config.task == TaskKind.QA:
        raise ValueError("translate-test does not apply to extractive QA")
    out = prepare_output(config)
    src, tgt = config.source_language(), config.target_language()

    dataset = read_dataset(config.test_input_path, config.task, tgt)
    banks = build_field_banks(
        load_seed_pairs(config, reverse=True),
        config.task,
        k=config.fewshot.k,
        seed=config.fewshot.seed,
        fields=INPUT_FIELDS[config.task],
    )
    gateway = Gateway.from_config(config.backend)
    manifest = RunManifest(task=config.task.value, src_lang=tgt.code, tgt_lang=src.code)
    translated = asyncio.run(
        translate_test_inputs(
            dataset,
            src,
            banks,
            default_budgets(config.task, config.budgets),
            gateway,
            backtick_policy=config.backtick_policy,
            manifest=manifest,
        )
    )
    manifest.gateway = gateway.stats.model_dump()
    write_dataset(translated, out / TRANSLATE_TEST_FILE)
    manifest.save(out / TRANSLATE_TEST_MANIFEST)
    console.print(f"[green]Translated {translated.size} test inputs into {src.display_name}[/green]")
    return 0


def stats_row(manifest: RunManifest) -> dict[str, Any]:
    stats = FilterStats.model_validate(manifest.filter_stats or {})
    return {
        "src_lang": manifest.src_lang,
        "tgt_lang": manifest.tgt_lang,
        **stats.model_dump(),
    }


def cmd_stats(args: argparse.Namespace) -> int:
    """Print filter statistics of one or more manifests side by side."""
    rows = {str(path): stats_row(RunManifest.load(path)) for path in args.manifests}
    reasons = sorted({reason for row in rows.values() for reason in row["rejected_by_reason"]})

    table = Table(title="Filter statistics")
    table.add_column("Manifest", style="cyan")
    table.add_column("Pair", style="cyan")
    table.add_column("Total", style="green")
    table.add_column("Kept", style="green")
    table.add_column("Removed", style="yellow")
    for reason in reasons:
        table.add_column(reason, style="magenta")
    for path, row in rows.items():
        table.add_row(
            Path(path).parent.name or path,
            f"{row['src_lang'] or '?'}->{row['tgt_lang'] or '?'}",
            str(row["total"]),
            str(row["kept"]),
            format_rate(row["removal_rate"]),
            *(str(row["rejected_by_reason"].get(reason, 0)) for reason in reasons),
        )
    console.print(table)
    print(json.dumps(rows, indent=2, ensure_ascii=False))
    return 0


def read_lines(path: str | Path) -> list[str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    return path.read_text(encoding="utf-8").splitlines()


def cmd_bleu(args: argparse.Namespace) -> int:
    tokenizer = args.tokenizer or LANGUAGE_TOKENIZERS.get(args.lang or "", "13a")
    score = corpus_bleu(read_lines(args.hypotheses), read_lines(args.references), tokenizer, args.smoothing)
    print(json.dumps(score.model_dump(), indent=2))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    task = TaskKind(args.task)
    gold = read_dataset(args.gold, task, language_from_code(args.lang))
    report = evaluate_predictions(task, read_jsonl(args.predictions), gold)
    print(json.dumps(report.model_dump(mode="json"), indent=2))
    return 0


def read_scores(path: str | Path) -> list[float]:
    """Scores from a JSON array file or a whitespace-separated list of numbers."""
    text = "\n".join(read_lines(path)).strip()
    try:
        values = json.loads(text) if text.startswith("[") else [float(v) for v in text.split()]
    except ValueError as e:
        raise EvaluationError(f"{path}: not a list of numbers ({e})") from e
    if not isinstance(values, list) or not all(isinstance(v, (int, float)) for v in values):
        raise EvaluationError(f"{path}: not a list of numbers")
    return [float(v) for v in values]


def cmd_ttest(args: argparse.Namespace) -> int:
    a = summarize_scores(read_scores(args.a), args.top_k)
    b = summarize_scores(read_scores(args.b), args.top_k)
    result = welch_t_test(a.scores, b.scores)
    report = {"a": a.model_dump(mode="json"), "b": b.model_dump(mode="json"), "test": result.model_dump(mode="json")}
    print(json.dumps(report, indent=2, allow_nan=False))
    return 0


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="Pipeline configuration file (JSON)")
    parser.add_argument("--seed", type=int, default=None, help="Override every seed of the run")
    parser.add_argument("--in-flight", type=int, default=None, help="Override the concurrent request cap")
    parser.add_argument("--output-dir", default=None, help="Override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Translate task training data with a completion model, filter it and build training mixes"
    )
    parser.add_argument("--debug", action="store_true", help="Enable debug logging output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("translate", help="Translate the source training data")
    add_config_flags(p)
    p.set_defaults(handler=cmd_translate)

    p = sub.add_parser("filter", help="Filter translated candidates")
    add_config_flags(p)
    p.set_defaults(handler=cmd_filter)

    for name, handler, help_text in (
        ("synthesize", cmd_synthesize, "Build D_tgt, D_cs and training mixes from kept pairs"),
        ("run", cmd_run, "translate, filter and synthesize in one go"),
    ):
        p = sub.add_parser(name, help=help_text)
        add_config_flags(p)
        p.add_argument("--arms", default="tgt,cs", help="Comma-separated arms out of tgt,cs ('' = baseline only)")
        p.set_defaults(handler=handler)

    p = sub.add_parser("translate-test", help="Translate target-language test inputs into the source language")
    add_config_flags(p)
    p.set_defaults(handler=cmd_translate_test)

    p = sub.add_parser("stats", help="Show filter statistics from run manifests")
    p.add_argument("manifests", nargs="+", help="manifest.json files")
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("bleu", help="Corpus BLEU of a hypothesis file against a reference file")
    p.add_argument("hypotheses", help="One segment per line")
    p.add_argument("references", help="One segment per line")
    p.add_argument("--tokenizer", choices=sorted(TOKENIZERS), default=None)
    p.add_argument("--lang", default=None, help="Target language, picks the tokenizer when --tokenizer is unset")
    p.add_argument("--smoothing", choices=["exp", "floor", "none"], default="exp")
    p.set_defaults(handler=cmd_bleu)

    p = sub.add_parser("eval", help="Score task predictions against a gold dataset")
    p.add_argument("--task", choices=[t.value for t in TaskKind], required=True)
    p.add_argument("predictions", help='JSON Lines of {"id", "prediction"}')
    p.add_argument("gold", help="Gold dataset (JSON Lines)")
    p.add_argument("--lang", default="en", help="Language of the gold dataset")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ttest", help="Welch's t-test between two lists of run scores")
    p.add_argument("a", help="Scores of the first system")
    p.add_argument("b", help="Scores of the second system")
    p.add_argument("--top-k", type=int, default=None, help="Only use the best k runs of each list")
    p.set_defaults(handler=cmd_ttest)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.debug)
    load_dotenv(Path(".") / ".env", override=False)

    try:
        return args.handler(args)
    except (ConfigError, DatasetError, PromptError, EvaluationError, ValidationError, FileNotFoundError, ValueError) as e:
        console.print(f"[red]Error:[/red] {escape(str(e))}")
        return 1
    except (GatewayError, OSError) as e:
        console.print(f"[red]Error:[/red] {escape(str(e))}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
