"""``pyrquant`` command line: data generation, training, indexing, search, evaluation, sweeps.

Every run command accepts ``--config run.yaml``, ``--preset NAME`` and one
flag per config key (``--lr 1e-3``, ``--m-values 2,4,8`` ...). Flags override
the file, which overrides the preset. The only environment variable read is
``PYRQUANT_OUTPUT_ROOT``, which prefixes relative output directories.

Exit codes: 0 success, 2 bad arguments or config, 3 training diverged,
4 missing or unreadable input artifact.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import click
import numpy as np
import yaml

from . import pipeline
from .config import PRESETS, ConfigError, RunConfig, load_config
from .dataio import FeatureFileError, ManifestError, SyntheticSpec, generate_synthetic
from .retrieval import IndexFileError, aqd_search_batch, load_index, save_index, write_results
from .training import CheckpointError, TrainingError, load_checkpoint, save_checkpoint

log = logging.getLogger("pyrquant")

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_ARTIFACT = 4


class CommandError(click.ClickException):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


def _fail(exc: Exception) -> CommandError:
    if isinstance(exc, TrainingError):
        return CommandError(f"training failed: {exc}", EXIT_DIVERGED)
    if isinstance(exc, (FileNotFoundError, CheckpointError, IndexFileError, ManifestError,
                        FeatureFileError)):
        return CommandError(str(exc), EXIT_ARTIFACT)
    return CommandError(str(exc), EXIT_CONFIG)


_LIST_FIELDS = {f.name for f in dataclasses.fields(RunConfig)
                if str(f.type).startswith("List")}


def _parse_flag(name: str, raw: str):
    if name in _LIST_FIELDS:
        return [yaml.safe_load(v) for v in raw.split(",") if v.strip()]
    return yaml.safe_load(raw)


def config_options(fn):
    """Attach ``--config``, ``--preset`` and one flag per :class:`RunConfig` field."""
    for f in reversed(dataclasses.fields(RunConfig)):
        flag = "--" + f.name.replace("_", "-")
        hint = "comma-separated list" if f.name in _LIST_FIELDS else "value"
        fn = click.option(flag, f.name, default=None, metavar=f.name.upper(),
                          help=f"override {f.name} ({hint})")(fn)
    fn = click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None,
                      help="start from a named preset")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                      help="YAML run config")(fn)
    return fn


def resolve_config(config_path: Optional[str], preset: Optional[str], flags: Dict[str, str]) -> RunConfig:
    overrides = {k: _parse_flag(k, v) for k, v in flags.items() if v is not None}
    try:
        if config_path is not None and not Path(config_path).exists():
            raise FileNotFoundError(f"config file {config_path} does not exist")
        cfg = load_config(config_path, overrides, preset)
    except (ConfigError, TypeError, ValueError, FileNotFoundError) as exc:
        raise _fail(exc) from None
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    log.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg


def _load_data(cfg: RunConfig):
    try:
        return pipeline.load_run_data(cfg)
    except Exception as exc:
        raise _fail(exc) from None


def _ckpt_path(cfg: RunConfig, M: int) -> Path:
    return cfg.output_path() / f"model_M{M}.ckpt"


def _index_path(cfg: RunConfig, M: int) -> Path:
    return cfg.output_path() / f"index_M{M}.pqx"


def _load_model(cfg: RunConfig, M: int):
    path = _ckpt_path(cfg, M)
    if not path.exists():
        raise CommandError(f"missing checkpoint {path}; run train first", EXIT_ARTIFACT)
    try:
        params, _, _ = load_checkpoint(path)
    except CheckpointError as exc:
        raise _fail(exc) from None
    return params


def _load_index(cfg: RunConfig, M: int):
    path = _index_path(cfg, M)
    if not path.exists():
        raise CommandError(f"missing index {path}; run encode first", EXIT_ARTIFACT)
    try:
        return load_index(path)
    except IndexFileError as exc:
        raise _fail(exc) from None


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for info, -vv for debug logging")
def main(verbose: int):
    """Pyramid-pooled product quantization for fine-grained retrieval."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _shape(ctx, param, value):
    try:
        shape = tuple(int(v) for v in value.lower().split("x"))
    except ValueError:
        raise click.BadParameter(f"expected HxWxC, got {value!r}") from None
    if len(shape) != 3 or min(shape) < 1:
        raise click.BadParameter(f"expected three positive extents HxWxC, got {value!r}")
    return shape


@main.command("gen-data")
@click.option("--out", "out_dir", default="data", show_default=True, type=click.Path(file_okay=False))
@click.option("--num-classes", default=20, show_default=True, type=int)
@click.option("--num-meta", default=4, show_default=True, type=int)
@click.option("--samples-per-class", default=60, show_default=True, type=int)
@click.option("--stage2", default="16x16x32", show_default=True, callback=_shape)
@click.option("--stage3", default="8x8x64", show_default=True, callback=_shape)
@click.option("--stage4", default="4x4x128", show_default=True, callback=_shape)
@click.option("--patch", default=3, show_default=True, type=int)
@click.option("--part-strength", default=3.0, show_default=True, type=float)
@click.option("--meta-strength", default=1.0, show_default=True, type=float)
@click.option("--noise", default=1.0, show_default=True, type=float)
@click.option("--query-per-class", default=10, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
def gen_data(out_dir, **kwargs):
    """Write a synthetic fine-grained feature dataset (manifest.tsv + features/)."""
    spec = SyntheticSpec(**kwargs)
    try:
        spec.validate()
    except ValueError as exc:
        raise CommandError(f"invalid dataset spec: {exc}", EXIT_CONFIG) from None
    syn = generate_synthetic(spec, out_dir)
    n = len(syn.dataset)
    n_query = sum(s == "query" for s in syn.dataset.splits)
    click.echo(f"wrote {n} items ({n_query} query) in {spec.num_classes} classes to {out_dir}")


@main.command()
@config_options
def train(config_path, preset, **flags):
    """Train one model per configured codebook count and write checkpoints + logs."""
    cfg = resolve_config(config_path, preset, flags)
    ds, split = _load_data(cfg)
    out = cfg.output_path()
    for M in cfg.m_values:
        try:
            model = pipeline.train_model(cfg, ds, split, M)
        except Exception as exc:
            raise _fail(exc) from None
        h = model.params.hyper
        with open(out / f"train_M{M}.jsonl", "w") as fh:
            fh.write(json.dumps({"hyper": h.to_dict(), "effective_kappa": h.effective_kappa,
                                 "config": cfg.to_dict()}, sort_keys=True) + "\n")
            for rec in model.result.history:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        extra = {"config": cfg.to_dict(), "best_epoch": model.result.best_epoch,
                 "selected": cfg.select}
        save_checkpoint(_ckpt_path(cfg, M), model.params, model.result.optimizer, extra)
        hist = model.result.history
        summary = (f"loss {hist[0]['loss']:.4f} -> {hist[-1]['loss']:.4f}" if hist
                   else "0 epochs, checkpoint holds the initialisation")
        click.echo(f"M={M} ({pipeline.bit_budget(M, cfg.K)} bits, kappa={h.effective_kappa}): "
                   f"{summary}")


@main.command()
@config_options
def encode(config_path, preset, **flags):
    """Hard-encode the database with each trained model and write the index files."""
    cfg = resolve_config(config_path, preset, flags)
    ds, split = _load_data(cfg)
    for M in cfg.m_values:
        params = _load_model(cfg, M)
        index = pipeline.build_index(params, ds, split)
        save_index(_index_path(cfg, M), index)
        click.echo(f"M={M}: {len(index)} items, {index.payload_bits} payload bits "
                   f"-> {_index_path(cfg, M)}")


@main.command()
@config_options
def search(config_path, preset, **flags):
    """Rank the database for every query and write results_M*.tsv."""
    cfg = resolve_config(config_path, preset, flags)
    ds, split = _load_data(cfg)
    for M in cfg.m_values:
        params = _load_model(cfg, M)
        index = _load_index(cfg, M)
        q_ids = [ds.ids[i] for i in split.query]
        zq = pipeline.query_embeddings(params, ds, split.query)
        excluded = any(index.position(q) >= 0 for q in q_ids)
        top = cfg.top_n or (len(index) - int(excluded))
        try:
            rows, scores = aqd_search_batch(zq, index, top, query_ids=q_ids,
                                            dtype=np.dtype(cfg.search_dtype).type)
        except ValueError as exc:
            raise _fail(exc) from None
        path = cfg.output_path() / f"results_M{M}.tsv"
        write_results(path, q_ids, rows, scores, index.ids)
        click.echo(f"M={M}: {len(q_ids)} queries x top {top} -> {path}")


def _print_tables(reports: Sequence[dict]) -> None:
    tables = pipeline.metrics_tables(reports)
    click.echo(pipeline.render_markdown(tables["map"]), nl=False)
    click.echo()
    click.echo(pipeline.render_markdown(tables["p_at_n"]), nl=False)


@main.command()
@config_options
def evaluate(config_path, preset, **flags):
    """MAP per bit budget (AQD and exact) and P@N; writes metrics.json/.tsv/.md."""
    cfg = resolve_config(config_path, preset, flags)
    ds, split = _load_data(cfg)
    reports = []
    for M in cfg.m_values:
        params = _load_model(cfg, M)
        index = _load_index(cfg, M)
        reports.append(pipeline.evaluate_model(cfg, params, index, ds, split))
    pipeline.write_metrics(cfg.output_path(), reports)
    _print_tables(reports)


def _sweep_point(cfg: RunConfig, value: str, seed: int, run_dir: str) -> pipeline.SweepCell:
    """One isolated sweep run; errors are captured, never raised."""
    try:
        ds, split = pipeline.load_run_data(cfg)
        reports = pipeline.run_experiment(cfg, ds, split)
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        cfg.dump(Path(run_dir) / "config.yaml")
        pipeline.write_metrics(Path(run_dir), reports)
        return pipeline.SweepCell(value, seed, reports)
    except Exception as exc:  # recorded in the sweep table
        return pipeline.SweepCell(value, seed, [], f"{type(exc).__name__}: {exc}")


@main.command()
@click.option("--param", required=True, type=click.Choice(pipeline.SWEEP_PARAMS))
@click.option("--values", "values_raw", required=True,
              help="comma-separated values; kappa accepts K, rho_order accepts names or a/b/c")
@click.option("--seeds", "seeds_raw", default=None, help="comma-separated seeds (default: config seed)")
@click.option("--jobs", default=1, show_default=True, type=int, help="parallel worker processes")
@config_options
def sweep(param, values_raw, seeds_raw, jobs, config_path, preset, **flags):
    """Train and evaluate one run per (value, seed); table rows are values, columns bit budgets."""
    cfg = resolve_config(config_path, preset, flags)
    values = [v.strip() for v in values_raw.split(",") if v.strip()]
    try:
        seeds = [int(s) for s in seeds_raw.split(",")] if seeds_raw else [cfg.seed]
    except ValueError:
        raise CommandError(f"--seeds: expected integers, got {seeds_raw!r}", EXIT_CONFIG) from None
    base_dir = cfg.output_path() / f"sweep_{param}"
    jobs_list = []
    cells: List[pipeline.SweepCell] = []
    for v in values:
        for s in seeds:
            try:
                point = pipeline.sweep_config(cfg, param, v, s)
            except (ValueError, ConfigError) as exc:
                cells.append(pipeline.SweepCell(v, s, [], f"{type(exc).__name__}: {exc}"))
                continue
            jobs_list.append((point, v, s, str(base_dir / v.replace("/", "-") / f"seed{s}")))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells += list(pool.map(_sweep_point, *zip(*jobs_list))) if jobs_list else []
    else:
        cells += [_sweep_point(*job) for job in jobs_list]
    budgets = [pipeline.bit_budget(M, cfg.K) for M in sorted(cfg.m_values)]
    table = pipeline.sweep_table(param, values, cells, budgets)
    out = cfg.output_path()
    (out / f"sweep_{param}.tsv").write_text(pipeline.render_tsv(table))
    (out / f"sweep_{param}.md").write_text(f"## MAP sweep over {param}\n\n"
                                           + pipeline.render_markdown(table))
    (out / f"sweep_{param}.json").write_text(json.dumps(
        [dataclasses.asdict(c) for c in sorted(cells, key=lambda c: (values.index(c.value), c.seed))],
        indent=2, sort_keys=True) + "\n")
    click.echo(pipeline.render_markdown(table), nl=False)
    for c in cells:
        if c.error:
            click.echo(f"failed: {param}={c.value} seed={c.seed}: {c.error}", err=True)


@main.command()
@click.argument("run_dir", type=click.Path(file_okay=False), required=False)
@config_options
def report(run_dir, config_path, preset, **flags):
    """Re-render metrics.tsv/.md from metrics.json and print every table in a run directory."""
    if run_dir is None:
        run_dir = str(load_config(config_path, {k: _parse_flag(k, v) for k, v in flags.items()
                                                if v is not None}, preset).output_path())
    out = Path(run_dir)
    metrics = out / "metrics.json"
    sweeps = sorted(out.glob("sweep_*.md"))
    if not metrics.exists() and not sweeps:
        raise CommandError(f"no metrics.json or sweep tables in {out}; run evaluate first",
                           EXIT_ARTIFACT)
    if metrics.exists():
        reports = json.loads(metrics.read_text())
        pipeline.write_metrics(out, reports)
        _print_tables(reports)
    for path in sweeps:
        click.echo()
        click.echo(path.read_text(), nl=False)


if __name__ == "__main__":  # pragma: no cover
    main()
