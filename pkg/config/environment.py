import os
from dotenv import load_dotenv

from core.exceptions import ConfigError

load_dotenv()


class Environment:
    # Deployment values read from .env / the process environment
    TRAINER_URL = os.getenv('TRAINER_URL', '')          # edge-cloud trainer service base URL
    TRAINER_HOST = os.getenv('TRAINER_HOST', '127.0.0.1')
    TRAINER_PORT = int(os.getenv('TRAINER_PORT', 8000))
    REGISTRY_DIR = os.getenv('REGISTRY_DIR', '')
    WORK_DIR = os.getenv('WORK_DIR', '')
    LOG_DIR = os.getenv('LOG_DIR', '')
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')

    @classmethod
    def refresh(cls):
        """Re-read the environment (tests and long-lived services)"""
        cls.TRAINER_URL = os.getenv('TRAINER_URL', '')
        cls.TRAINER_HOST = os.getenv('TRAINER_HOST', '127.0.0.1')
        cls.TRAINER_PORT = int(os.getenv('TRAINER_PORT', 8000))
        cls.REGISTRY_DIR = os.getenv('REGISTRY_DIR', '')
        cls.WORK_DIR = os.getenv('WORK_DIR', '')
        cls.LOG_DIR = os.getenv('LOG_DIR', '')
        cls.LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
        return cls

    @classmethod
    def apply(cls, settings):
        """Fill pipeline fields the config file left unset"""
        pipeline = settings['pipeline']
        if not pipeline.get('trainer_url') and cls.TRAINER_URL:
            pipeline['trainer_url'] = cls.TRAINER_URL
        if cls.REGISTRY_DIR and pipeline.get('registry_dir') in (None, '', 'registry'):
            pipeline['registry_dir'] = cls.REGISTRY_DIR
        if cls.WORK_DIR and pipeline.get('work_dir') in (None, '', 'work'):
            pipeline['work_dir'] = cls.WORK_DIR
        return settings

    @classmethod
    def validate(cls, settings):
        """Validate deployment values for the configured topology"""
        pipeline = settings['pipeline']
        if pipeline['mode'] == 'edge_cloud' and not pipeline.get('trainer_url'):
            raise ConfigError("TRAINER_URL (or pipeline.trainer_url) is required in edge_cloud mode")
        if not pipeline.get('registry_dir'):
            raise ConfigError("REGISTRY_DIR (or pipeline.registry_dir) is required")
        return True
