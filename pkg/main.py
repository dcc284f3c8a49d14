#!/usr/bin/env python3
"""
Stein-Encoder - Main execution script.

Workflow:
1. Parse command line arguments (subcommand plus shared options)
2. Load the YAML configuration; explicit flags override it
3. Set up logging and monitoring
4. Run the subcommand: simulate, fit, encode, predict, benchmark or consistency
5. Write reports and a metrics snapshot into the output directory
6. Map failures to exit codes: 0 success, 1 runtime failure, 2 usage/config error
"""
import argparse
import logging
import os
import sys
import time
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from prometheus_client import Counter, Summary

from src.analyze import (format_table, index_gradient, plot_consistency, plot_data,
                         plot_index_scatter, summarize_replications)
from src.data import (ColumnManifest, drop_constant_columns, load_columns, load_table,
                      select_features, variance_prescreen, write_table)
from src.errors import ArtifactError, ConfigError
from src.experiments import (METHODS, SimConfig, consistency_study, cross_validate, fit_principal_components,
                             generate, generate_cohort, run_comparison, run_grid, sim_config_from)
from src.pipeline import PipelineConfig, SteinEncoder, encode, top_features
from src.regressor import MlpModel, MlpSpec, train
from src.report import ReportWriter, read_fit_report
from src.utils import (config_section, load_config, resolve_threads, setup_logging,
                       setup_monitoring, write_metrics)

# Prometheus metrics
COMMAND_RUNS = Counter('stein_encoder_command_runs', 'Number of CLI command runs')
COMMAND_FAILURES = Counter('stein_encoder_command_failures', 'Number of failed CLI command runs')
COMMAND_DURATION = Summary('stein_encoder_command_duration_seconds', 'CLI command execution time')

DEFAULT_CONFIG = './config/config.yaml'
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

logger = logging.getLogger(__name__)


def _methods(value: Optional[str]) -> tuple:
    if value is None:
        return METHODS
    methods = tuple(m.strip().upper() for m in value.split(',') if m.strip())
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"Unknown methods {unknown}; choose from {', '.join(METHODS)}")
    return methods


def _pipeline_config(args: argparse.Namespace, config: Dict[str, Any]) -> PipelineConfig:
    return PipelineConfig.from_config(
        config,
        seed=args.seed,
        regime=getattr(args, 'regime', None),
        sparsity=getattr(args, 'sparsity', None),
        tau_mode=getattr(args, 'tau_mode', None),
        tau1=getattr(args, 'tau1', None),
        tau2=getattr(args, 'tau2', None),
        permutations=getattr(args, 'permutations', None),
    )


def _mlp_spec(args: argparse.Namespace, config: Dict[str, Any]) -> MlpSpec:
    return MlpSpec.from_dict(config_section(config, 'regressor'), seed=args.seed,
                             epochs=getattr(args, 'epochs', None))


def _sim_config(args: argparse.Namespace, config: Dict[str, Any]) -> SimConfig:
    return sim_config_from(
        config,
        model=args.model, feature_setting=args.setting, p=args.p, q=args.q,
        n_train=args.n_train, n_test=args.n_test, replications=args.reps, seed=args.seed,
    )


def _effective_seed(args: argparse.Namespace, config: Dict[str, Any]) -> int:
    """--seed, else pipeline.seed from the config file, else 0."""
    if args.seed is not None:
        return int(args.seed)
    return int(config_section(config, 'pipeline').get('seed', 0))


def _resolved(args: argparse.Namespace, config: Dict[str, Any], **parts: Any) -> Dict[str, Any]:
    resolved = {'command': args.command, 'seed': _effective_seed(args, config)}
    resolved.update({k: v.to_dict() if hasattr(v, 'to_dict') else v for k, v in parts.items()})
    return resolved


def _load_dataset(args: argparse.Namespace, config: Dict[str, Any]):
    data_settings = config_section(config, 'data')
    manifest_path = args.manifest or data_settings.get('manifest')
    data_path = args.data or data_settings.get('path')
    if not manifest_path:
        raise ConfigError("A column manifest is required (--manifest or data.manifest)")
    if not data_path:
        raise ConfigError("A data file is required (--data or data.path)")
    manifest = ColumnManifest.from_yaml(manifest_path)
    if not os.path.exists(data_path):
        raise ConfigError(f"Data file not found: {data_path}")
    d = load_table(data_path, manifest)
    top_genes = args.top_genes or data_settings.get('top_genes')
    if top_genes:
        d = select_features(d, variance_prescreen(d.z, int(top_genes)))
        logger.info(f"Variance prescreen kept {d.q} feature columns")
    return d


def cmd_simulate(args: argparse.Namespace, config: Dict[str, Any], writer: ReportWriter) -> Dict[str, Any]:
    """Run one configuration (or the full grid) and write summary reports."""
    sim = _sim_config(args, config)
    pipe_cfg = _pipeline_config(args, config)
    spec = _mlp_spec(args, config)
    methods = _methods(args.methods)
    n_jobs = resolve_threads(args.threads)
    resolved = _resolved(args, config, simulation=sim, pipeline=pipe_cfg, regressor=spec)

    if args.grid:
        raw, summaries = run_grid(sim, pipe_cfg, spec, n_jobs, methods=methods)
        writer.write_table('replications.csv', raw)
        writer.write_table('summary.csv', summaries)
        writer.write_json('summary.json', {'configurations': summaries.to_dict(orient='records'),
                                           'resolved_config': resolved})
        writer.write_text('summary.txt', format_table(summaries))
    else:
        table = run_comparison(sim, pipe_cfg, spec, n_jobs, methods=methods)
        summary = summarize_replications(table)
        writer.write_table('replications.csv', table)
        writer.write_json('summary.json', {'configuration': sim.label, 'summary': summary,
                                           'resolved_config': resolved})
        tags = {'model': sim.model, 'setting': sim.feature_setting, 'p': sim.p, 'q': sim.q}
        writer.write_text('summary.txt', format_table(pd.DataFrame([{**tags, **summary}])))

    if args.emit_data:
        scenario = generate(sim, 0)
        for split, d in (('train', scenario.train), ('test', scenario.test)):
            manifest = write_table(d, writer.path(os.path.join('data', f'{split}.csv')))
            manifest.save(writer.path(os.path.join('data', f'{split}_manifest.yaml')))
        writer.write_json(os.path.join('data', 'truth.json'), {'gamma': scenario.gamma,
                                                               'sigma_eps': scenario.sigma_eps})
    return resolved


def cmd_fit(args: argparse.Namespace, config: Dict[str, Any], writer: ReportWriter) -> Dict[str, Any]:
    """Fit the encoder on a data file and write the fit report and top features."""
    d = drop_constant_columns(_load_dataset(args, config))
    pipe_cfg = _pipeline_config(args, config)
    encoder = SteinEncoder(pipe_cfg).fit(d)
    report = encoder.report
    report.top_features = top_features(report.encoder, report.names_z, args.top_k)
    writer.write_fit_report(report)
    writer.write_table('top_features.csv', pd.DataFrame(report.top_features))
    writer.write_table('probe_strengths.csv', pd.DataFrame(report.strengths))
    t_hat = encoder.encode(d.z)

    spec = None
    if args.train_regressor:
        spec = _mlp_spec(args, config)
        features = np.column_stack([d.x, t_hat])
        model = train(features, d.y, spec.with_input_dim(features.shape[1]))
        model.save(writer.path('regressor.pt'))

    if args.emit_plot_data:
        pc1 = fit_principal_components(d.z).transform(d.z)[:, 0]
        indices = {'stein_index': t_hat, 'pc1': pc1}
        writer.write_table('plot_data.csv', plot_data(d.y, indices))
        writer.write_json('index_gradient.json', {name: index_gradient(values, d.y) for name, values in indices.items()})
        plot_index_scatter(d.y, indices, writer.path('index_scatter.png'), title='Response against index')

    logger.info(f"Encoder uses order {report.encoder.order} with {report.encoder.probe.label}; "
                f"{len(report.encoder.support)} nonzero coefficients")
    return _resolved(args, config, pipeline=pipe_cfg, regressor=spec)


def cmd_encode(args: argparse.Namespace, config: Dict[str, Any], writer: ReportWriter) -> Dict[str, Any]:
    """Apply a saved encoder to new rows and write t_hat per row."""
    report = read_fit_report(args.encoder)
    _, z = load_columns(args.data, (), report.names_z, args.delimiter)
    t_hat = encode(report.encoder, z) if z.shape[0] else np.empty(0)
    writer.write_table(args.output_file or 'encoded.csv', pd.DataFrame({'t_hat': t_hat}))
    logger.info(f"Encoded {len(t_hat)} rows")
    return _resolved(args, config, encoder=args.encoder)


def cmd_predict(args: argparse.Namespace, config: Dict[str, Any], writer: ReportWriter) -> Dict[str, Any]:
    """Apply a saved encoder and regressor to new rows."""
    report = read_fit_report(args.encoder)
    model = MlpModel.load(args.regressor)
    if model.spec.input_dim != len(report.names_x) + 1:
        raise ArtifactError(f"Regressor expects {model.spec.input_dim} inputs but the encoder provides "
                            f"{len(report.names_x) + 1}")
    x, z = load_columns(args.data, report.names_x, report.names_z, args.delimiter)
    if z.shape[0]:
        t_hat = encode(report.encoder, z)
        predictions = model.predict(np.column_stack([x, t_hat]))
    else:
        t_hat = predictions = np.empty(0)
    writer.write_table(args.output_file or 'predictions.csv', pd.DataFrame({'t_hat': t_hat, 'prediction': predictions}))
    logger.info(f"Predicted {len(predictions)} rows")
    return _resolved(args, config, encoder=args.encoder, regressor=args.regressor)


def cmd_benchmark(args: argparse.Namespace, config: Dict[str, Any], writer: ReportWriter) -> Dict[str, Any]:
    """k-fold comparison of raw, Stein and PCA inputs on a data file or a synthetic cohort."""
    if args.synthetic_cohort:
        cohort = generate_cohort(seed=_effective_seed(args, config))
        data_path = writer.path(os.path.join('cohort', 'cohort.csv'))
        os.makedirs(os.path.dirname(data_path), exist_ok=True)
        cohort.frame.to_csv(data_path, index=False)
        cohort.manifest.save(writer.path(os.path.join('cohort', 'manifest.yaml')))
        args.data, args.manifest = data_path, writer.path(os.path.join('cohort', 'manifest.yaml'))
    d = _load_dataset(args, config)
    pipe_cfg = _pipeline_config(args, config)
    spec = _mlp_spec(args, config)
    table = cross_validate(d, pipe_cfg, spec, folds=args.folds, seed=_effective_seed(args, config),
                           pca_components=args.pca_components, methods=_methods(args.methods),
                           n_jobs=resolve_threads(args.threads))
    summary = summarize_replications(table)
    writer.write_table('folds.csv', table)
    writer.write_json('summary.json', {'summary': summary, 'folds': args.folds,
                                       'resolved_config': _resolved(args, config, pipeline=pipe_cfg, regressor=spec)})
    writer.write_text('summary.txt', format_table(table[table['error'] == '']) + '\n\nmean\n'
                      + format_table(pd.DataFrame([summary])))
    return _resolved(args, config, pipeline=pipe_cfg, regressor=spec)


def cmd_consistency(args: argparse.Namespace, config: Dict[str, Any], writer: ReportWriter) -> Dict[str, Any]:
    """Median aligned error across training sizes and its log-log slope."""
    sim = _sim_config(args, config)
    pipe_cfg = _pipeline_config(args, config)
    sizes = [int(s) for s in args.sizes.split(',')] if args.sizes else [500, 1000, 2000, 4000]
    result = consistency_study(sim, pipe_cfg, sizes, n_jobs=resolve_threads(args.threads))
    writer.write_table('consistency.csv', result.table)
    writer.write_json('consistency.json', {'configuration': sim.label, 'slope': result.slope,
                                           'rows': result.table.to_dict(orient='records')})
    plot_consistency(result.table, writer.path('consistency.png'))
    return _resolved(args, config, simulation=sim, pipeline=pipe_cfg)


COMMANDS: Dict[str, Callable[[argparse.Namespace, Dict[str, Any], ReportWriter], Dict[str, Any]]] = {
    'simulate': cmd_simulate,
    'fit': cmd_fit,
    'encode': cmd_encode,
    'predict': cmd_predict,
    'benchmark': cmd_benchmark,
    'consistency': cmd_consistency,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None,
                        help=f'Path to the configuration file (default {DEFAULT_CONFIG} if present)')
    common.add_argument('--output-dir', type=str, default=None, help='Directory for reports')
    common.add_argument('--seed', type=int, default=None, help='Base seed for every random step')
    common.add_argument('--threads', type=int, default=None,
                        help='Worker count (default STEIN_ENCODER_THREADS or the number of cores)')
    common.add_argument('--metrics-port', type=int, default=None, help='Expose Prometheus metrics on this port')
    common.add_argument('-v', '--verbose', action='count', default=0, help='More logging (repeatable)')

    encoder_opts = argparse.ArgumentParser(add_help=False)
    encoder_opts.add_argument('--regime', type=str, default=None, help='auto, low or high')
    encoder_opts.add_argument('--sparsity', type=int, default=None, help='Nonzero coefficients in the high regime')
    encoder_opts.add_argument('--tau-mode', type=str, default=None, help='permutation or fixed')
    encoder_opts.add_argument('--tau1', type=float, default=None, help='Order-1 threshold (fixed mode)')
    encoder_opts.add_argument('--tau2', type=float, default=None, help='Order-2 threshold (fixed mode)')
    encoder_opts.add_argument('--permutations', type=int, default=None, help='Permutations for threshold calibration')

    data_opts = argparse.ArgumentParser(add_help=False)
    data_opts.add_argument('--data', type=str, default=None, help='Delimited data file')
    data_opts.add_argument('--manifest', type=str, default=None, help='Column manifest (YAML)')
    data_opts.add_argument('--top-genes', type=int, default=None, help='Keep the K highest-variance feature columns')

    sim_opts = argparse.ArgumentParser(add_help=False)
    sim_opts.add_argument('--model', type=str, default=None, help='I, II or III')
    sim_opts.add_argument('--setting', type=str, default=None, help='indep or corr')
    sim_opts.add_argument('--p', type=int, default=None, help='Nuisance dimension')
    sim_opts.add_argument('--q', type=int, default=None, help='Feature dimension')
    sim_opts.add_argument('--n-train', type=int, default=None)
    sim_opts.add_argument('--n-test', type=int, default=None)
    sim_opts.add_argument('--reps', type=int, default=None, help='Replications')

    parser = argparse.ArgumentParser(description='Stein-Encoder: supervised single-index encoder toolkit')
    sub = parser.add_subparsers(dest='command', required=True)

    simulate = sub.add_parser('simulate', parents=[common, encoder_opts, sim_opts],
                              help='Run simulated method comparisons')
    simulate.add_argument('--grid', action='store_true', help='Run all twelve configurations')
    simulate.add_argument('--methods', type=str, default=None, help='Comma-separated subset of A,B,C')
    simulate.add_argument('--epochs', type=int, default=None, help='Override regressor epochs')
    simulate.add_argument('--emit-data', action='store_true', help='Write replication 0 as data files')

    fit = sub.add_parser('fit', parents=[common, encoder_opts, data_opts], help='Fit the encoder on a data file')
    fit.add_argument('--top-k', type=int, default=20, help='Number of top features to report')
    fit.add_argument('--train-regressor', action='store_true', help='Also train a regressor on [X, t_hat]')
    fit.add_argument('--epochs', type=int, default=None, help='Override regressor epochs')
    fit.add_argument('--emit-plot-data', action='store_true', help='Write response vs index plot data and figure')

    for name, help_text in (('encode', 'Apply a saved encoder'), ('predict', 'Apply a saved encoder and regressor')):
        command = sub.add_parser(name, parents=[common], help=help_text)
        command.add_argument('--encoder', type=str, required=True, help='fit_report.json from the fit command')
        command.add_argument('--data', type=str, required=True, help='Delimited data file')
        command.add_argument('--delimiter', type=str, default=',')
        command.add_argument('--output-file', type=str, default=None)
        if name == 'predict':
            command.add_argument('--regressor', type=str, required=True, help='regressor.pt from the fit command')

    benchmark = sub.add_parser('benchmark', parents=[common, encoder_opts, data_opts],
                               help='k-fold comparison on a data file')
    benchmark.add_argument('--synthetic-cohort', action='store_true', help='Generate a cohort-shaped dataset')
    benchmark.add_argument('--folds', type=int, default=5)
    benchmark.add_argument('--pca-components', type=int, default=1)
    benchmark.add_argument('--methods', type=str, default=None, help='Comma-separated subset of A,B,C')
    benchmark.add_argument('--epochs', type=int, default=None, help='Override regressor epochs')

    consistency = sub.add_parser('consistency', parents=[common, encoder_opts, sim_opts],
                                 help='Direction error across sample sizes')
    consistency.add_argument('--sizes', type=str, default=None, help='Comma-separated training sizes')
    return parser


def _read_config(path: Optional[str]) -> Dict[str, Any]:
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"Configuration file not found: {path}")
        return load_config(path)
    return load_config(DEFAULT_CONFIG) if os.path.exists(DEFAULT_CONFIG) else {}


def main(argv: Optional[List[str]] = None) -> int:
    """Parse command line arguments and run one subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_USAGE

    try:
        config = _read_config(args.config)
        setup_logging(config, args.verbose)
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE

    setup_monitoring(config, args.metrics_port)
    output_dir = args.output_dir or config_section(config, 'output').get('directory', './output')
    COMMAND_RUNS.inc()
    start_time = time.time()
    status = EXIT_OK
    writer = None
    try:
        with COMMAND_DURATION.time():
            writer = ReportWriter(output_dir)
            logger.info(f"Starting {args.command}")
            resolved = COMMANDS[args.command](args, config, writer)
            writer.write_run_info(args.command, resolved, {'seconds': time.time() - start_time})
    except (ConfigError, ArtifactError) as e:
        logger.error(f"{args.command} failed: {e}")
        COMMAND_FAILURES.inc()
        status = EXIT_USAGE
    except Exception as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        COMMAND_FAILURES.inc()
        status = EXIT_RUNTIME
    finally:
        if writer is not None:
            write_metrics(writer.path('metrics.prom'))

    execution_time = time.time() - start_time
    logger.info(f"{args.command} completed in {execution_time:.2f} seconds with status: {'Success' if status == EXIT_OK else 'Failure'}")
    return status


if __name__ == "__main__":
    sys.exit(main())
