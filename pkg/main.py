import argparse
import sys
from pathlib import Path

from config.environment import Environment
from config.settings import load_config
from core.exceptions import ConfigError, IncrementalDetectionError
from utils.logger import configure_logging, setup_logger

logger = setup_logger('main')


def _settings(args):
    overrides = {'seed': args.seed} if args.seed is not None else {}
    if args.mode:
        overrides.setdefault('pipeline', {})['mode'] = args.mode
    if args.registry:
        overrides.setdefault('pipeline', {})['registry_dir'] = args.registry
    settings = load_config(args.config, overrides)
    Environment.refresh().apply(settings)
    Environment.validate(settings)
    return settings


def _registry(settings):
    from core.registry import ModelRegistry
    return ModelRegistry(settings['pipeline']['registry_dir'])


def _confirm(class_names):
    answer = input(f"Learn new class(es) {', '.join(class_names)}? [y/N] ")
    return answer.strip().lower() in ('y', 'yes')


def cmd_make_corpus(args, settings):
    from core.shapes import make_corpus
    corpus = make_corpus(args.out, args.classes, args.train_per_class, args.test_per_class, args.web_per_class,
                         image_size=settings['detector']['image_size'], seed=settings['seed'])
    print(f"Corpus written to {corpus.root} ({', '.join(corpus.classes)})")
    return 0


def cmd_train_base(args, settings):
    from core.detector import DetectorConfig
    from core.distillation import DistillConfig
    from core.manifest import DatasetManifest
    from core.trainer import train_base

    manifest = DatasetManifest.load(args.manifest)
    if args.classes:
        manifest = manifest.restricted_to(args.classes)
    cfg = DistillConfig.from_settings(settings['training'], settings['detector'])
    if args.epochs:
        cfg = cfg.variant(epochs=args.epochs)
    snapshot, log = train_base(manifest, DetectorConfig.from_settings(settings['detector']), cfg,
                               seed=settings['seed'])
    registry = _registry(settings)
    content_hash = registry.publish(snapshot)
    registry.activate(content_hash)
    if args.out:
        snapshot.save(args.out)
    log.save(registry.task_dir(f"base-{content_hash[:12]}") / 'training_log.jsonl')
    print(log.epoch_summary().to_string(index=False))
    print(f"Active snapshot {content_hash} ({', '.join(snapshot.class_names)})")
    return 0


def cmd_learn(args, settings):
    from core.pipeline import run_learning_task

    if args.eval_manifest:
        settings['pipeline']['eval_manifest'] = args.eval_manifest
    approve = True if args.yes else _confirm
    outcome = run_learning_task(args.class_names, settings, _registry(settings), approve=approve,
                                seed=settings['seed'])
    print(outcome.timing.format_table())
    if outcome.eval_report is not None:
        print(outcome.eval_report.format_table())
    print(f"Active snapshot {outcome.snapshot_hash} (task {outcome.task_id})")
    return 0


def cmd_build_dataset(args, settings):
    from core.dataset_builder import build_dataset, score_construction
    from core.manifest import DatasetManifest
    from providers import build_providers

    model = None
    if settings['providers']['proposals']['type'] == 'deep':
        model = _registry(settings).active_model()
    manifest, report = build_dataset(args.query, build_providers(settings, model=model), settings['dataset'])
    out = Path(args.out or f"{args.query.replace(' ', '_')}_manifest.json")
    manifest.save(out)
    for key, value in report.to_dict().items():
        print(f"{key}: {value}")
    if args.ground_truth:
        score = score_construction(manifest, DatasetManifest.load(args.ground_truth))
        fp = f"{score.fp_rate:.2f}%" if score.fp_defined else 'n/a'
        print(f"retention rate: {score.retention_rate:.2f}%  FP rate: {fp}")
    print(f"Manifest written to {out}")
    return 0


def cmd_evaluate(args, settings):
    from core.evaluation import evaluate_model
    from core.manifest import DatasetManifest
    from core.snapshot import ModelSnapshot

    ev = settings['eval']
    report = evaluate_model(ModelSnapshot.load(args.snapshot).to_model(), DatasetManifest.load(args.manifest),
                            ev['score_thr'], ev['nms_thr'], ev['iou_thr'], old_classes=args.old_classes,
                            scenario='evaluate', config=settings, max_candidates=ev['max_candidates'])
    print(report.format_table())
    if args.out:
        report.save(args.out)
    return 0


def cmd_scenario(args, settings):
    from core.scenario import ScenarioSpec, run_scenario

    report = run_scenario(ScenarioSpec.load(args.spec), settings)
    print(report.format_summary())
    if args.out:
        report.save(args.out)
    return 0


def cmd_check_trigger(args, settings):
    from core.detector import detect
    from core.images import load_image, resize_array, to_tensor
    from core.trigger import LearningTrigger, TriggerPolicy

    model = _registry(settings).active_model()
    if model is None:
        raise IncrementalDetectionError("No active model in the registry")
    trigger = LearningTrigger(TriggerPolicy.from_settings(settings['trigger']))
    ev = settings['eval']
    for path in args.images:
        tensor = to_tensor(resize_array(load_image(path), model.config.image_size))
        decision = trigger.observe(detect(model, tensor, ev['score_thr'], ev['nms_thr']), frame_id=path)
        print(f"{path}: {decision.action}")
    return 0


def cmd_serve_trainer(args, settings):
    from service.app import create_app

    app = create_app(settings, work_dir=settings['pipeline']['work_dir'])
    host = args.host or Environment.TRAINER_HOST
    port = args.port or Environment.TRAINER_PORT
    logger.info(f"Trainer service listening on {host}:{port}")
    app.run(host=host, port=port, threaded=True)
    return 0


def _global_flags(parser, suppress=False):
    def default(value):
        return argparse.SUPPRESS if suppress else value

    parser.add_argument('--config', default=default(None), help='JSON config file')
    parser.add_argument('--seed', type=int, default=default(None))
    parser.add_argument('--mode', choices=['edge_only', 'edge_cloud'], default=default(None))
    parser.add_argument('--registry', default=default(None), help='model registry directory')
    parser.add_argument('--yes', action='store_true', default=default(False),
                        help='approve learning tasks without prompting')
    parser.add_argument('--log-level', default=default(None))
    parser.add_argument('--log-dir', default=default(None))


def build_parser():
    parser = argparse.ArgumentParser(prog='incremental-detection',
                                     description='Near-real-time class-incremental object detection')
    _global_flags(parser)
    # Global flags are also accepted after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('make-corpus', parents=[common], help='render the synthetic shapes corpus')
    p.add_argument('--out', default='corpus')
    p.add_argument('--classes', nargs='+', default=['circle', 'square', 'triangle', 'cross'])
    p.add_argument('--train-per-class', type=int, default=200)
    p.add_argument('--test-per-class', type=int, default=50)
    p.add_argument('--web-per-class', type=int, default=40)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser('train-base', parents=[common], help='train and activate an initial model')
    p.add_argument('manifest')
    p.add_argument('--classes', nargs='+')
    p.add_argument('--epochs', type=int)
    p.add_argument('--out', help='also write the snapshot here')
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser('learn', parents=[common], help='learn new classes end to end')
    p.add_argument('class_names', nargs='+')
    p.add_argument('--eval-manifest')
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser('build-dataset', parents=[common], help='construct a training set for one query')
    p.add_argument('query')
    p.add_argument('--out')
    p.add_argument('--ground-truth', help='manifest to score retention and FP rate against')
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser('evaluate', parents=[common], help='per-class AP and mAP of a snapshot')
    p.add_argument('snapshot')
    p.add_argument('manifest')
    p.add_argument('--old-classes', nargs='+')
    p.add_argument('--out')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('scenario', parents=[common], help='run an incremental-learning scenario spec')
    p.add_argument('spec')
    p.add_argument('--out')
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser('check-trigger', parents=[common], help='feed images to the learning trigger')
    p.add_argument('images', nargs='+')
    p.set_defaults(func=cmd_check_trigger)

    p = sub.add_parser('serve-trainer', parents=[common], help='run the edge-cloud trainer service')
    p.add_argument('--host')
    p.add_argument('--port', type=int)
    p.set_defaults(func=cmd_serve_trainer)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.log_level or args.log_dir:
        configure_logging(args.log_level, args.log_dir)
    try:
        settings = _settings(args)
        return args.func(args, settings)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2
    except IncrementalDetectionError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 130


if __name__ == '__main__':
    sys.exit(main())
