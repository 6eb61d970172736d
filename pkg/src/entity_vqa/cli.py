"""Command-line interface for entity-vqa."""
import functools
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import click

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from entity_vqa import __version__
from entity_vqa.adapter import (
    AdapterConfig,
    FrozenLmStub,
    grad_check,
    init_params,
    load_toy_dataset,
    make_gradcheck_instance,
    make_toy_problem,
    save_params,
    train_adapter,
)
from entity_vqa.config import Config
from entity_vqa.dataset import (
    FilterParams,
    bucket_popularity,
    category_popularity,
    dataset_stats,
    fetch_all_pageviews,
    lint_qapairs,
    make_pageview_client,
    read_manifest,
    read_pageview_stats,
    read_qapairs,
    run_filters,
    sample_entities,
    write_manifest_jsonl,
)
from entity_vqa.errors import AlreadyExistsError, EntityVQAError, IoFailureError, NotFoundError, StageError
from entity_vqa.evaluation import (
    ExternalJudge,
    MetricReport,
    RankingPair,
    compare_reports,
    evaluate,
    fleiss_kappa,
    format_table,
    kendall_tau_b,
    load_examples,
    merge_predictions,
    metric_effectiveness,
    render_comparison,
    render_report,
    tabulate_pairwise,
)
from entity_vqa.evaluation.agreement import list_rows
from entity_vqa.evaluation.report import read_jsonl, write_jsonl
from entity_vqa.fixtures import build_synthetic_corpus
from entity_vqa.indexer import EmbeddingIndex, PartitionedIndex
from entity_vqa.pipeline import AnswerPipeline
from entity_vqa.schema import QuestionType

logger = logging.getLogger(__name__)

EXIT_DATA = 2
EXIT_USAGE = 64
EXIT_DATA_EVAL = 65


class CliGroup(click.Group):
    """Group that reports usage errors with exit status 64."""

    def make_context(self, *args, **kwargs):
        try:
            return super().make_context(*args, **kwargs)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise


@dataclass
class AppContext:
    config: Config
    seed: int
    as_json: bool


def _emit(app: AppContext, payload, text: str = None):
    """Print JSON under --json (or when there is no text form), else the text."""
    if app.as_json or text is None:
        click.echo(json.dumps(payload, indent=2, ensure_ascii=False))
    else:
        click.echo(text)


def _error_payload(error: Exception):
    if isinstance(error, EntityVQAError):
        return {'error': error.to_dict()}
    return {'error': {'kind': 'InvalidValue', 'message': str(error)}}


def data_errors(exit_code: int):
    """Turn contract errors into error JSON on stderr and ``exit_code``."""
    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except (EntityVQAError, ValueError, OSError) as e:
                logger.debug("command failed", exc_info=True)
                click.echo(json.dumps(_error_payload(e), ensure_ascii=False), err=True)
                click.get_current_context().exit(exit_code)
        return wrapper
    return decorator


pass_app = click.make_pass_decorator(AppContext)


@click.group(cls=CliGroup)
@click.version_option(version=__version__)
@click.option('--config', '-c', 'config_path', type=click.Path(), help='Path to config file')
@click.option('--seed', type=int, default=None, help='Seed for every randomized step')
@click.option('--json', 'as_json', is_flag=True, help='Machine-readable JSON output')
@click.option('--log-level', type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False),
              default=None, help='Logging level (overrides logging.level)')
@click.pass_context
def main(ctx, config_path, seed, as_json, log_level):
    """Entity-centric visual question answering: index, ask, evaluate, curate."""
    if config_path and not os.path.exists(config_path):
        raise click.BadParameter(f"config file not found: {config_path}", param_hint='--config')
    try:
        cfg = Config(config_path) if config_path else Config()
    except (ValueError, OSError) as e:
        raise click.BadParameter(str(e), param_hint='--config')
    if seed is not None:
        cfg.set('seed', seed)
    level = (log_level or cfg.get('logging.level', 'WARNING')).upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format='%(levelname)s %(name)s: %(message)s', stream=sys.stderr)
    ctx.obj = AppContext(config=cfg, seed=int(cfg.get('seed', 0)), as_json=as_json)


# ----------------------------------------------------------------- index

@main.group(cls=CliGroup)
def index():
    """Build and query the embedding index."""


@index.command('build')
@click.argument('entries', type=click.Path())
@click.option('--output', '-o', type=click.Path(), help='Index file (defaults to index.path)')
@click.option('--force', is_flag=True, help='Overwrite an existing index file')
@pass_app
@data_errors(EXIT_DATA)
def index_build(app, entries, output, force):
    """Ingest JSONL entries into a sealed index file."""
    output = output or app.config.resolve_path('index.path')
    if os.path.exists(output) and not force:
        raise AlreadyExistsError(f"{output} exists; pass --force to overwrite")
    built = EmbeddingIndex.from_jsonl(entries)
    built.seal()
    directory = os.path.dirname(os.path.abspath(output))
    os.makedirs(directory, exist_ok=True)
    built.save(output)
    stats = built.get_stats()
    stats['path'] = output
    _emit(app, stats, f"✅ Indexed {stats['count']} entries ({stats['entities']} entities, "
                      f"dim {stats['dim']}) -> {output}")


@index.command('query')
@click.option('--index', '-i', 'index_path', type=click.Path(), help='Index file (defaults to index.path)')
@click.option('--vector', help='Query vector as a JSON list')
@click.option('--entry', 'entry_id', type=int, help='Use the stored vector of this entry as the query')
@click.option('--k', '-k', type=int, default=None, help='Number of neighbours (defaults to resolution.k)')
@click.option('--backend', type=click.Choice(['flat', 'partitioned']), default=None)
@pass_app
@data_errors(EXIT_DATA)
def index_query(app, index_path, vector, entry_id, k, backend):
    """Print the k nearest entries as a RetrievalSet JSON."""
    if (vector is None) == (entry_id is None):
        raise click.UsageError("give exactly one of --vector or --entry")
    if vector is not None:
        try:
            query = json.loads(vector)
        except json.JSONDecodeError as e:
            raise click.BadParameter(str(e), param_hint='--vector')
    k = k if k is not None else int(app.config.get('resolution.k', 5))
    if k < 1:
        raise click.BadParameter("k must be at least 1", param_hint='--k')
    loaded = EmbeddingIndex.load(index_path or app.config.resolve_path('index.path'))
    if entry_id is not None:
        try:
            query = loaded.get(entry_id).vector
        except KeyError:
            raise NotFoundError(f"no entry with id {entry_id}") from None
    searcher = loaded
    if (backend or app.config.get('index.backend', 'flat')) == 'partitioned':
        searcher = PartitionedIndex(loaded, n_lists=int(app.config.get('index.n_lists', 16)),
                                    n_scan=int(app.config.get('index.n_scan', 4)), seed=app.seed)
    click.echo(json.dumps(searcher.knn(query, k).to_dict(), indent=2))


@index.command('stats')
@click.option('--index', '-i', 'index_path', type=click.Path(), help='Index file (defaults to index.path)')
@pass_app
@data_errors(EXIT_DATA)
def index_stats(app, index_path):
    """Show statistics of an index file."""
    stats = EmbeddingIndex.load(index_path or app.config.resolve_path('index.path')).get_stats()
    _emit(app, stats, "\n📊 Index Statistics\n\n"
                      f"Entries: {stats['count']}\nEntities: {stats['entities']}\nDimension: {stats['dim']}")


# ----------------------------------------------------------------- ask

def _qtype(ctx, param, value):
    try:
        return QuestionType.parse(value)
    except ValueError as e:
        raise click.BadParameter(str(e))


@main.command()
@click.argument('image_id')
@click.argument('question')
@click.option('--qtype', default='Static', callback=_qtype,
              help='Static, Narrative, Dynamic, Procedural or Subjective')
@click.option('--no-detect', is_flag=True, help='Skip entity detection and use the full image')
@click.option('--no-retrieval', is_flag=True, help='Answer without knn, resolution or knowledge')
@pass_app
@data_errors(EXIT_DATA)
def ask(app, image_id, question, qtype, no_detect, no_retrieval):
    """Answer QUESTION about IMAGE_ID; prints the answer with its full trace."""
    if no_detect:
        app.config.set('detection.enabled', False)
    pipeline = AnswerPipeline.from_config(app.config)
    try:
        result = pipeline.ask(image_id, question, qtype, use_retrieval=not no_retrieval)
    except StageError as e:
        click.echo(json.dumps({'error': e.to_dict()}, ensure_ascii=False), err=True)
        click.get_current_context().exit(EXIT_DATA)
    click.echo(json.dumps(result.to_dict(), indent=2, ensure_ascii=False))


@main.command('ask-batch')
@click.argument('queries', type=click.Path())
@click.option('--output', '-o', type=click.Path(), required=True, help='Predictions JSONL')
@click.option('--no-detect', is_flag=True, help='Skip entity detection and use the full image')
@click.option('--no-retrieval', is_flag=True, help='Answer without knn, resolution or knowledge')
@pass_app
@data_errors(EXIT_DATA)
def ask_batch(app, queries, output, no_detect, no_retrieval):
    """Answer every ``{example_id, image_id, question, qtype?}`` row of QUERIES."""
    if no_detect:
        app.config.set('detection.enabled', False)
    pipeline = AnswerPipeline.from_config(app.config)
    rows = read_jsonl(queries)

    def answer(row):
        record = {'example_id': row.get('example_id', ''), 'image_id': row['image_id']}
        try:
            result = pipeline.ask(row['image_id'], row['question'],
                                  QuestionType.parse(row.get('qtype', 'Static')),
                                  use_retrieval=not no_retrieval)
        except StageError as e:
            logger.warning("query %s failed at %s: %s", record['example_id'], e.stage, e)
            return dict(record, prediction='', entity_id=None, error=e.to_dict())
        return dict(record, prediction=result.answer, entity_id=result.entity.get('entity_id'))

    workers = int(app.config.get('generation.max_in_flight', 4))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        predictions = list(executor.map(answer, rows))
    write_jsonl(predictions, output)
    failed = sum(1 for p in predictions if 'error' in p)
    _emit(app, {'answered': len(predictions) - failed, 'failed': failed, 'output': output},
          f"✅ Answered {len(predictions) - failed}/{len(predictions)} queries -> {output}")


# ----------------------------------------------------------------- eval

@main.group('eval', cls=CliGroup)
def eval_group():
    """Score answers and compute agreement statistics."""


def _load_report(path: str) -> MetricReport:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return MetricReport.from_dict(json.load(f))
    except OSError as e:
        raise IoFailureError(f"cannot read report {path}: {e}") from e
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise ValueError(f"malformed report {path}: {e}") from e


def _load_json(path: str):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except OSError as e:
        raise IoFailureError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ValueError(f"{path} is not valid JSON: {e}") from e


@eval_group.command('run')
@click.argument('examples', type=click.Path(), required=False)
@click.option('--gold', '-g', 'gold_path', type=click.Path(), help='Gold EvalExample JSONL (same as EXAMPLES)')
@click.option('--pred', '--predictions', '-p', 'predictions', type=click.Path(),
              help='Predictions JSONL to merge into the gold rows')
@click.option('--report', 'report_path', type=click.Path(), help='Use a saved report JSON as this run')
@click.option('--compare', type=click.Path(), help='Report JSON of the baseline run to compare against')
@click.option('--output', '-o', type=click.Path(), help='Write the report JSON here')
@click.option('--judge-url', help='External judge endpoint (replaces the built-in judge)')
@pass_app
@data_errors(EXIT_DATA_EVAL)
def eval_run(app, examples, gold_path, predictions, report_path, compare, output, judge_url):
    """Score a run from --gold/--pred (or a saved --report), optionally against --compare."""
    if examples and gold_path:
        raise click.UsageError("give the gold file once, as EXAMPLES or --gold")
    gold_path = gold_path or examples
    if bool(gold_path) == bool(report_path):
        raise click.UsageError("give exactly one of --gold and --report")
    if report_path:
        report = _load_report(report_path)
    else:
        gold = load_examples(gold_path)
        if predictions:
            gold = merge_predictions(gold, read_jsonl(predictions))
        report = evaluate(
            gold,
            judge_threshold=float(app.config.get('evaluation.judge_threshold', 0.2)),
            max_n=int(app.config.get('evaluation.max_n', 4)),
            judge=ExternalJudge(judge_url) if judge_url else None,
        )
    if output:
        try:
            with open(output, 'w', encoding='utf-8') as f:
                json.dump(report.to_dict(), f, indent=2)
        except OSError as e:
            raise IoFailureError(f"cannot write {output}: {e}") from e
    if not compare:
        _emit(app, report.to_dict(), render_report(report))
        return
    rows = compare_reports(_load_report(compare), report)
    _emit(app, {'report': report.to_dict(), 'comparison': rows},
          render_report(report) + '\n\n' + render_comparison(rows))


@eval_group.command('kendall')
@click.argument('rankings', type=click.Path())
@pass_app
@data_errors(EXIT_DATA_EVAL)
def eval_kendall(app, rankings):
    """Kendall tau-b for ``{first, second}`` or per metric for ``{human, metrics: {name: [...]}}``."""
    data = _load_json(rankings)
    if 'metrics' in data:
        results = metric_effectiveness(data['metrics'], data['human'])
        payload = {name: r.to_dict() if r else None for name, r in results.items()}
        rows = [[name, None, None] if r is None else [name, f"{r.tau:.3f}", f"{r.p_value:.4f}"]
                for name, r in results.items()]
        _emit(app, payload, format_table(['Metric', 'tau', 'p'], rows))
        return
    result = kendall_tau_b(RankingPair(data['first'], data['second']))
    _emit(app, result.to_dict(), f"tau_b = {result.tau:.4f}  (p = {result.p_value:.4g})")


@eval_group.command('fleiss')
@click.argument('ratings', type=click.Path())
@pass_app
@data_errors(EXIT_DATA_EVAL)
def eval_fleiss(app, ratings):
    """Fleiss' kappa of an items x categories count matrix (JSON)."""
    kappa = fleiss_kappa(_load_json(ratings))
    _emit(app, {'kappa': kappa}, f"kappa = {kappa:.4f}")


@eval_group.command('pairwise')
@click.argument('records', type=click.Path())
@pass_app
@data_errors(EXIT_DATA_EVAL)
def eval_pairwise(app, records):
    """Win/tie/lose percentages from ``{system, outcome}`` JSONL records."""
    table = tabulate_pairwise(read_jsonl(records))
    _emit(app, table, format_table(['System', 'Win %', 'Tie %', 'Lose %', 'N'], list_rows(table)))


# ----------------------------------------------------------------- dataset

@main.group(cls=CliGroup)
def dataset():
    """Curate entity manifests and QA pairs."""


@dataset.command('filter')
@click.argument('manifest', type=click.Path())
@click.option('--stage', '-s', 'stages', multiple=True,
              help='wiki-validity, image-count or ambiguity (repeatable; default all)')
@click.option('--min-images', type=int, default=None, help='ImageCount threshold')
@click.option('--output', '-o', type=click.Path(), help='Write kept rows as JSONL')
@pass_app
@data_errors(EXIT_DATA_EVAL)
def dataset_filter(app, manifest, stages, min_images, output):
    """Run curation filters in canonical order and report per-category counts."""
    params = FilterParams(min_images=min_images if min_images is not None
                          else int(app.config.get('dataset.min_images', 10)))
    report = run_filters(read_manifest(manifest), list(stages) or None, params)
    if output:
        write_manifest_jsonl(report.kept, output)
    headers = ['Category', 'Raw'] + [s.stage.value for s in report.stages]
    summary = '\n'.join(f"{s.stage.value}: removed {len(s.removed)}" for s in report.stages)
    _emit(app, report.to_dict(), format_table(headers, report.counts_table()) + '\n\n' + summary)


@dataset.command('stats')
@click.argument('manifest', type=click.Path())
@click.argument('qapairs', type=click.Path())
@pass_app
@data_errors(EXIT_DATA_EVAL)
def dataset_stats_cmd(app, manifest, qapairs):
    """Entity, image and QA counts with a per-category histogram."""
    stats = dataset_stats(read_manifest(manifest), read_qapairs(qapairs))
    rows = [[c, v['entities'], v['images'], v['qa']] for c, v in stats.per_category.items()]
    text = (f"Categories: {stats.n_categories}\nEntities: {stats.n_entities}\nImages: {stats.n_images}\n"
            f"QA pairs: {stats.n_qa}\nAvg answer tokens: {stats.avg_answer_tokens:.2f}\n\n"
            + format_table(['Category', 'Entities', 'Images', 'QA'], rows))
    _emit(app, stats.to_dict(), text)


@dataset.command('buckets')
@click.option('--stats', 'stats_path', type=click.Path(), help='PageviewStats JSONL')
@click.option('--manifest', type=click.Path(), help='Manifest whose entities are fetched')
@click.option('--client', help='Pageview client: fixture:<path>, http:<url> or wikimedia[:<project>]')
@pass_app
@data_errors(EXIT_DATA_EVAL)
def dataset_buckets(app, stats_path, manifest, client):
    """Assign Head/Torso/Tail per category from pageview statistics."""
    if stats_path:
        stats = read_pageview_stats(stats_path)
    elif manifest:
        spec = client or app.config.get('dataset.pageview_url', '')
        if not spec:
            raise click.UsageError("--manifest needs --client or dataset.pageview_url")
        entities = [{'entity_id': r.entity_id, 'category': r.category, 'entity_name': r.entity_name}
                    for r in read_manifest(manifest)]
        stats = fetch_all_pageviews(entities, make_pageview_client(spec),
                                    max_workers=int(app.config.get('dataset.max_workers', 4)))
    else:
        raise click.UsageError("give --stats or --manifest")
    buckets = bucket_popularity(stats)
    popularity = category_popularity(stats)
    payload = {'buckets': {k: v.value for k, v in buckets.items()}, 'categories': popularity}
    rows = [[s.entity_id, s.category, f"{s.mean_views:.1f}", buckets[s.entity_id].value] for s in stats]
    _emit(app, payload, format_table(['Entity', 'Category', 'Mean views', 'Bucket'], rows))


@dataset.command('lint')
@click.argument('manifest', type=click.Path())
@click.argument('qapairs', type=click.Path())
@pass_app
@data_errors(EXIT_DATA_EVAL)
def dataset_lint(app, manifest, qapairs):
    """Check QA pairs: non-empty, answer names the entity, question stays anonymous."""
    issues = lint_qapairs(read_qapairs(qapairs), read_manifest(manifest))
    if app.as_json:
        click.echo(json.dumps({'issues': issues}, indent=2, ensure_ascii=False))
    elif not issues:
        click.echo("✅ All QA pairs pass")
    else:
        for issue in issues:
            click.echo(f"❌ #{issue['index']} ({issue['entity_id']}): {'; '.join(issue['problems'])}")
    if issues:
        click.get_current_context().exit(EXIT_DATA_EVAL)


@dataset.command('sample')
@click.argument('manifest', type=click.Path())
@click.option('--fraction', type=float, default=None, help='Per-category fraction (default dataset.sample_fraction)')
@click.option('--output', '-o', type=click.Path(), required=True, help='Sampled manifest JSONL')
@pass_app
@data_errors(EXIT_DATA_EVAL)
def dataset_sample(app, manifest, fraction, output):
    """Seeded per-category sample of a manifest."""
    fraction = fraction if fraction is not None else float(app.config.get('dataset.sample_fraction', 0.1))
    sampled = sample_entities(read_manifest(manifest), fraction=fraction, seed=app.seed)
    write_manifest_jsonl(sampled, output)
    _emit(app, {'sampled': len(sampled), 'output': output}, f"✅ Sampled {len(sampled)} entities -> {output}")


# ----------------------------------------------------------------- adapter

@main.group(cls=CliGroup)
def adapter():
    """Train and check the modality adapter on toy problems."""


@adapter.command('train')
@click.option('--dataset', 'dataset_path', type=click.Path(), help='Toy dataset JSONL (default: built-in toy problem)')
@click.option('--steps', type=int, default=None)
@click.option('--lr', type=float, default=None)
@click.option('--output', '-o', type=click.Path(), help='Write the trained SNTADP01 checkpoint here')
@pass_app
@data_errors(EXIT_DATA)
def adapter_train(app, dataset_path, steps, lr, output):
    """Gradient descent on the adapter with the language model frozen."""
    steps = steps if steps is not None else int(app.config.get('adapter.steps', 200))
    lr = lr if lr is not None else float(app.config.get('adapter.lr', 0.05))
    if dataset_path:
        config = AdapterConfig.from_config(app.config)
        params = init_params(config, app.seed)
        lm = FrozenLmStub.random(config, app.seed)
        data = load_toy_dataset(dataset_path)
    else:
        toy = make_toy_problem(app.seed)
        params, lm, data = toy.params, toy.lm, toy.dataset
    trained, trace = train_adapter(params, lm, data, steps=steps, lr=lr)
    if output:
        save_params(trained, output)
    payload = {'steps': steps, 'lr': lr, 'initial_loss': trace[0] if trace else None,
               'final_loss': trace[-1] if trace else None, 'trace': trace, 'checkpoint': output}
    text = (f"Trained {steps} steps: loss {trace[0]:.4f} -> {trace[-1]:.4f}" if trace
            else "No steps run")
    _emit(app, payload, text)


@adapter.command('gradcheck')
@click.option('--instances', type=int, default=20)
@click.option('--h', 'step', type=float, default=1e-3, help='Finite-difference step')
@pass_app
@data_errors(EXIT_DATA)
def adapter_gradcheck(app, instances, step):
    """Compare analytic and numeric gradients on random small instances."""
    errors = []
    for i in range(instances):
        params, lm, img, token_ids = make_gradcheck_instance(app.seed + i)
        errors.append(grad_check(params, lm, img, token_ids, h=step))
    worst = max(errors) if errors else 0.0
    _emit(app, {'instances': instances, 'h': step, 'max_relative_error': worst, 'errors': errors},
          f"Max relative error over {instances} instances: {worst:.3g}")


# ----------------------------------------------------------------- misc

@main.command('init-config')
@click.option('--output', '-o', type=click.Path(), default='config.yaml', help='Path to save config file')
@pass_app
def init_config(app, output):
    """Write the default configuration to a file."""
    Config.defaults().save(output)
    click.echo(f"✅ Configuration file created: {output}")


@main.command()
@click.argument('directory', type=click.Path())
@click.option('--entities', 'n_entities', type=int, default=20, help='Number of synthetic entities (max 20)')
@click.option('--run/--no-run', default=True, help='Answer and score every synthetic query')
@pass_app
@data_errors(EXIT_DATA)
def demo(app, directory, n_entities, run):
    """Write a synthetic corpus and config to DIRECTORY, then answer its queries."""
    corpus = build_synthetic_corpus(n_entities=n_entities, seed=app.seed)
    paths = corpus.write(directory)
    if not run:
        _emit(app, paths, f"✅ Synthetic corpus written to {directory}")
        return
    pipeline = AnswerPipeline.from_config(Config(paths['config']))
    predictions = []
    resolved = 0
    for query in corpus.queries:
        result = pipeline.ask(query['image_id'], query['question'])
        resolved += result.entity.get('entity_id') == query['entity_id']
        predictions.append({'example_id': query['example_id'], 'prediction': result.answer})
    write_jsonl(predictions, os.path.join(directory, 'predictions.jsonl'))
    report = evaluate(merge_predictions(corpus.gold, predictions))
    payload = {'paths': paths, 'resolved': resolved, 'queries': len(corpus.queries),
               'report': report.to_dict()}
    _emit(app, payload, f"✅ Resolved {resolved}/{len(corpus.queries)} entities\n\n" + render_report(report))


if __name__ == '__main__':
    main()
