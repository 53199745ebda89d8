"""Image sources: local corpus index and a rate-limited HTTP search client."""

import json
import os
import threading
import time
from pathlib import Path
from typing import Dict, List, Optional

import requests
from PIL import Image

from core.exceptions import ProviderError
from providers.base import ImageSource, SourceImage
from utils.helper import atomic_write_bytes, sha256_bytes
from utils.logger import setup_logger

logger = setup_logger('image_sources')


def _image_size(path: Path):
    with Image.open(path) as image:
        return image.size


class LocalCorpusSource(ImageSource):
    """Directory corpus with an index.json mapping query -> relative image paths."""

    name = 'local'

    def __init__(self, root, index_file: str = 'index.json'):
        self.root = Path(root)
        self.index_path = self.root / index_file
        self._index: Optional[Dict[str, List[str]]] = None

    @property
    def index(self) -> Dict[str, List[str]]:
        if self._index is None:
            if not self.index_path.exists():
                raise ProviderError(f"Corpus index not found: {self.index_path}")
            with open(self.index_path, 'r', encoding='utf-8') as f:
                raw = json.load(f)
            self._index = {key.strip().lower(): list(paths) for key, paths in raw.items()}
        return self._index

    def queries(self) -> List[str]:
        return sorted(self.index)

    def fetch(self, query: str, limit: int) -> List[SourceImage]:
        paths = self.index.get(query.strip().lower())
        if paths is None:
            raise ProviderError(f"Query {query!r} is not in the corpus index {self.index_path}")
        images = []
        for rel in paths[:limit]:
            path = (self.root / rel).resolve()
            try:
                width, height = _image_size(path)
            except OSError as e:
                logger.warning(f"Skipping unreadable corpus image {path}: {e}")
                continue
            images.append(SourceImage(str(path), width, height, query))
        logger.info(f"Fetched {len(images)} local images for {query!r}")
        return images

    def describe(self) -> dict:
        return {'type': self.name, 'root': str(self.root)}


class HttpImageSource(ImageSource):
    """Search endpoint returning image URLs; downloads are cached by URL hash.

    The endpoint is called as GET <search_url>?q=<query>&limit=<n> and must
    answer with a JSON list of URLs (or {"results": [...]}).
    """

    name = 'http'

    def __init__(self, search_url: str, cache_dir, min_interval_s: float = 0.5, timeout_s: float = 10.0,
                 session: Optional[requests.Session] = None):
        self.search_url = search_url
        self.cache_dir = Path(cache_dir)
        self.min_interval_s = min_interval_s
        self.timeout_s = timeout_s
        self.session = session or requests.Session()
        self._lock = threading.Lock()
        self._last_request = 0.0

    def _throttle(self):
        with self._lock:
            wait = self.min_interval_s - (time.monotonic() - self._last_request)
            if wait > 0:
                time.sleep(wait)
            self._last_request = time.monotonic()

    def _get(self, url: str, **kwargs) -> requests.Response:
        self._throttle()
        try:
            response = self.session.get(url, timeout=self.timeout_s, **kwargs)
            response.raise_for_status()
            return response
        except requests.RequestException as e:
            raise ProviderError(f"GET {url} failed: {e}") from e

    def search(self, query: str, limit: int) -> List[str]:
        payload = self._get(self.search_url, params={'q': query, 'limit': limit}).json()
        urls = payload.get('results', []) if isinstance(payload, dict) else payload
        return [str(u) for u in urls][:limit]

    def download(self, url: str) -> Path:
        suffix = os.path.splitext(url.split('?')[0])[1] or '.img'
        target = self.cache_dir / f"{sha256_bytes(url.encode('utf-8'))[:24]}{suffix}"
        if not target.exists():
            atomic_write_bytes(target, self._get(url).content)
        return target

    def fetch(self, query: str, limit: int) -> List[SourceImage]:
        images = []
        for url in self.search(query, limit):
            try:
                path = self.download(url)
                width, height = _image_size(path)
            except (ProviderError, OSError) as e:
                logger.warning(f"Skipping {url}: {e}")
                continue
            images.append(SourceImage(str(path), width, height, query))
        logger.info(f"Downloaded {len(images)} images for {query!r}")
        return images

    def describe(self) -> dict:
        return {'type': self.name, 'search_url': self.search_url}
