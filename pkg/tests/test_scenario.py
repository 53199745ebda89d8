import json
import statistics
import time

import pytest

from config.settings import load_config
from core.detector import DetectorConfig
from core.distillation import DistillConfig
from core.evaluation import evaluate_model
from core.exceptions import ConfigError
from core.exemplars import images_by_class, select_exemplars
from core.manifest import DatasetManifest
from core.scenario import FULL_SCALE_REFERENCE, ScenarioSpec, run_scenario
from core.shapes import SHAPES, make_corpus
from core.trainer import train_base, train_incremental

from tests.conftest import BASE_CLASSES, NEW_CLASS


def _spec(corpus, **changes):
    values = dict(
        name='unit',
        base_classes=['circle', 'square'],
        increments=[['triangle']],
        train_manifest=str(corpus.root / 'train.json'),
        test_manifest=str(corpus.root / 'test.json'),
        exemplars_per_class=[0, 2],
        exemplar_strategy='random',
    )
    values.update(changes)
    return ScenarioSpec(**values)


class TestSpec:
    def test_validation(self, shapes_corpus):
        with pytest.raises(ConfigError):
            _spec(shapes_corpus, base_classes=[])
        with pytest.raises(ConfigError):
            _spec(shapes_corpus, increments=[['circle']])
        with pytest.raises(ConfigError):
            _spec(shapes_corpus, variants=['replay'])
        with pytest.raises(ConfigError):
            _spec(shapes_corpus, seeds=[])
        with pytest.raises(ConfigError):
            _spec(shapes_corpus, exemplars_per_class=[-1])

    def test_string_increments(self, shapes_corpus):
        spec = _spec(shapes_corpus, increments=['triangle', 'cross'])
        assert spec.increments == [['triangle'], ['cross']]
        assert spec.all_classes == ['circle', 'square', 'triangle', 'cross']

    def test_load_resolves_relative_paths(self, shapes_corpus, tmp_path):
        path = tmp_path / 'spec.json'
        path.write_text(json.dumps({'name': 'rel', 'base_classes': ['circle'], 'increments': [['square']],
                                    'train_manifest': 'train.json', 'test_manifest': 'test.json'}))
        spec = ScenarioSpec.load(path)
        assert spec.train_manifest == str((tmp_path / 'train.json').resolve())

    def test_load_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            ScenarioSpec.load(tmp_path / 'missing.json')
        path = tmp_path / 'spec.json'
        path.write_text(json.dumps({'name': 'x', 'unknown_field': 1}))
        with pytest.raises(ConfigError):
            ScenarioSpec.load(path)


def test_scenario_rows_and_summary(shapes_corpus, session_settings, tmp_path):
    report = run_scenario(_spec(shapes_corpus, base_epochs=1, incremental_epochs=1), session_settings)
    frame = report.to_frame()
    # base, all_data, catastrophic, and two exemplar counts for both distillation variants
    assert len(frame) == 7
    assert frame['variant'].tolist().count('feat_distill') == 2
    assert set(frame[frame['variant'] == 'catastrophic']['exemplars']) == {0}
    assert report.final('feat_distill', 2)['ap_triangle'].notna().all()

    summary = report.summary()
    assert {'map_mean', 'map_std', 'old_mean_mean'} <= set(summary.columns)
    assert len(summary) == 7

    text = report.format_summary()
    assert report.config_hash in text
    saved = json.loads(report.save(tmp_path / 'out').read_text())
    assert saved['full_scale_reference'] == FULL_SCALE_REFERENCE
    assert (tmp_path / 'out' / 'rows.csv').exists()


def test_missing_class_in_training_data(shapes_corpus, session_settings):
    with pytest.raises(ConfigError):
        run_scenario(_spec(shapes_corpus, increments=[['ring']]), session_settings)


# Desk-scale acceptance runs

ACCEPTANCE_SEEDS = [0, 1, 2]


@pytest.fixture(scope='module')
def large_corpus(tmp_path_factory):
    return make_corpus(tmp_path_factory.mktemp('large'), classes=SHAPES, train_per_class=200, test_per_class=50,
                       web_per_class=4, seed=0)


@pytest.fixture(scope='module')
def acceptance_settings():
    return load_config(overrides={'training': {'epochs': 20}, 'distill': {'epochs': 10},
                                  'exemplars': {'strategy': 'cluster'}})


@pytest.fixture(scope='module')
def forgetting_report(large_corpus, acceptance_settings):
    spec = ScenarioSpec(
        name='shapes_3_plus_1',
        base_classes=BASE_CLASSES,
        increments=[[NEW_CLASS]],
        train_manifest=str(large_corpus.root / 'train.json'),
        test_manifest=str(large_corpus.root / 'test.json'),
        variants=['catastrophic', 'no_feat_distill', 'feat_distill'],
        seeds=ACCEPTANCE_SEEDS,
    )
    return run_scenario(spec, acceptance_settings)


@pytest.mark.slow
def test_catastrophic_forgetting_and_retention(forgetting_report):
    frame = forgetting_report.to_frame()
    base = frame[frame['variant'] == 'base'].set_index('seed')['old_mean']
    catastrophic = forgetting_report.final('catastrophic').set_index('seed')['old_mean']
    distilled = forgetting_report.final('feat_distill').set_index('seed')['old_mean']
    for seed in ACCEPTANCE_SEEDS:
        assert catastrophic[seed] < 0.10
        assert distilled[seed] >= 0.6 * base[seed]


@pytest.mark.slow
def test_feature_distillation_is_not_worse(forgetting_report):
    with_feat = forgetting_report.final('feat_distill')['map'].mean()
    without_feat = forgetting_report.final('no_feat_distill')['map'].mean()
    assert with_feat >= without_feat - 0.02


@pytest.mark.slow
def test_exemplars_improve_old_classes(large_corpus, acceptance_settings):
    spec = ScenarioSpec(
        name='shapes_2_plus_1_plus_1',
        base_classes=['circle', 'square'],
        increments=[['triangle'], [NEW_CLASS]],
        train_manifest=str(large_corpus.root / 'train.json'),
        test_manifest=str(large_corpus.root / 'test.json'),
        variants=['feat_distill'],
        seeds=ACCEPTANCE_SEEDS,
        exemplars_per_class=[0, 10],
    )
    report = run_scenario(spec, acceptance_settings)
    without = report.final('feat_distill', 0).set_index('seed')['old_mean']
    with_exemplars = report.final('feat_distill', 10).set_index('seed')['old_mean']
    for seed in ACCEPTANCE_SEEDS:
        assert with_exemplars[seed] >= without[seed] + 0.05


@pytest.mark.slow
def test_incremental_training_is_faster_than_retraining(large_corpus, acceptance_settings):
    old_classes = [c for c in SHAPES if c != NEW_CLASS]
    train = DatasetManifest.load(large_corpus.root / 'train.json')
    detector_config = DetectorConfig.from_settings(acceptance_settings['detector'])
    one_epoch = DistillConfig.from_settings(acceptance_settings['training'],
                                            acceptance_settings['detector']).variant(epochs=1)
    base, _ = train_base(train.restricted_to(old_classes), detector_config, one_epoch, class_names=old_classes)

    new = train.restricted_to([NEW_CLASS])
    new = DatasetManifest(new.classes, new.images[:100], new.config, new.base_dir)
    exemplars = select_exemplars(images_by_class(train.restricted_to(old_classes)), None, 10, strategy='random')
    assert len(train) >= 5 * (len(new) + exemplars.total_count)

    def timed(fn):
        started = time.perf_counter()
        fn()
        return time.perf_counter() - started

    incremental = [timed(lambda: train_incremental(base, new, exemplars, one_epoch, seed=0)) for _ in range(3)]
    full = [timed(lambda: train_base(train, detector_config, one_epoch, seed=0)) for _ in range(3)]
    assert statistics.median(full) >= 3 * statistics.median(incremental)


@pytest.mark.slow
def test_overfit_sanity(large_corpus, acceptance_settings):
    train = DatasetManifest.load(large_corpus.root / 'train.json').restricted_to(BASE_CLASSES)
    small = DatasetManifest(train.classes, [e for c in BASE_CLASSES for e in train.images_for_class(c)[:10]],
                            train.config, train.base_dir)
    cfg = DistillConfig.from_settings(acceptance_settings['training'], acceptance_settings['detector'])
    snapshot, _ = train_base(small, DetectorConfig.from_settings(acceptance_settings['detector']),
                             cfg.variant(epochs=300, batch_size=10), class_names=BASE_CLASSES)
    assert evaluate_model(snapshot.to_model(), small).map >= 0.95
