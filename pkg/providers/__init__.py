from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

from core.exceptions import ConfigError
from providers.base import ClassifierProvider, EmbeddingProvider, ImageSource, ProposalProvider, SourceImage
from providers.classifiers import CachedClassifier, PatchClassifier, ScriptedClassifier
from providers.embeddings import WordVectorEmbedding
from providers.image_sources import HttpImageSource, LocalCorpusSource
from providers.proposals import DetectorProposals, EdgeProposals, ScriptedProposals


@dataclass
class ProviderSet:
    image_source: ImageSource
    proposals: ProposalProvider
    classifier: ClassifierProvider
    embedding: EmbeddingProvider

    def describe(self) -> Dict[str, Any]:
        return {
            'image_source': self.image_source.describe(),
            'proposals': self.proposals.describe(),
            'classifier': self.classifier.describe(),
            'embedding': self.embedding.describe(),
        }


def _path(value: str, base_dir: Optional[str]) -> Path:
    path = Path(value)
    if path.is_absolute() or base_dir is None:
        return path
    return Path(base_dir) / path


def build_providers(settings: Dict[str, Any], model=None, base_dir: Optional[str] = None) -> ProviderSet:
    """Instantiate the provider families named in settings['providers'].

    `model` is the current detector, required by the 'deep' proposal provider.
    """
    cfg = settings['providers']

    source_cfg = cfg['image_source']
    if source_cfg['type'] == 'local':
        image_source = LocalCorpusSource(_path(source_cfg['root'], base_dir), source_cfg.get('index_file', 'index.json'))
    elif source_cfg['type'] == 'http':
        image_source = HttpImageSource(source_cfg['search_url'], _path(source_cfg.get('cache_dir', 'cache'), base_dir),
                                       source_cfg.get('min_interval_s', 0.5), source_cfg.get('timeout_s', 10.0))
    else:
        raise ConfigError(f"Unknown image source type {source_cfg['type']!r}")

    proposal_cfg = cfg['proposals']
    if proposal_cfg['type'] == 'edges':
        proposals = EdgeProposals(max_boxes=proposal_cfg.get('max_boxes', 20))
    elif proposal_cfg['type'] == 'deep':
        if model is None:
            raise ConfigError("The 'deep' proposal provider needs a detector model")
        proposals = DetectorProposals(model, score_thr=proposal_cfg.get('score_thr', 0.2),
                                      max_boxes=proposal_cfg.get('max_boxes', 100))
    else:
        raise ConfigError(f"Unknown proposal provider type {proposal_cfg['type']!r}")

    classifier_cfg = cfg['classifier']
    if classifier_cfg['type'] != 'patch':
        raise ConfigError(f"Unknown classifier type {classifier_cfg['type']!r}")
    # One cache per provider set, shared by every query of a learning task
    classifier = CachedClassifier(PatchClassifier.load(_path(classifier_cfg['path'], base_dir)))

    embedding_cfg = cfg['embedding']
    if embedding_cfg['type'] != 'word_vectors':
        raise ConfigError(f"Unknown embedding type {embedding_cfg['type']!r}")
    embedding = WordVectorEmbedding.load(_path(embedding_cfg['path'], base_dir))

    return ProviderSet(image_source, proposals, classifier, embedding)


__all__ = [
    'ProviderSet', 'build_providers', 'SourceImage', 'ImageSource', 'ProposalProvider', 'ClassifierProvider',
    'EmbeddingProvider', 'LocalCorpusSource', 'HttpImageSource', 'DetectorProposals', 'EdgeProposals',
    'ScriptedProposals', 'PatchClassifier', 'ScriptedClassifier', 'CachedClassifier', 'WordVectorEmbedding',
]
