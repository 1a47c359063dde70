"""
Redis cache for spectral triples.
Implements cache-aside pattern with graceful degradation.
"""
import json
import logging
from typing import Optional

import redis
from redis.exceptions import RedisError

from src.config import settings

logger = logging.getLogger(__name__)


class CacheService:
    """Redis-backed store of eigen-solve payloads, keyed by a configuration hash."""

    def __init__(self, enabled: Optional[bool] = None):
        """Connect only when caching is enabled."""
        self.redis_client: Optional[redis.Redis] = None
        self.enabled = settings.cache_enabled if enabled is None else enabled
        if self.enabled:
            self._connect()

    def _connect(self):
        """Establish connection to Redis with error handling."""
        try:
            self.redis_client = redis.Redis(
                host=settings.redis_host,
                port=settings.redis_port,
                db=0,
                decode_responses=True,
                socket_connect_timeout=5,
                socket_timeout=5,
                retry_on_timeout=True,
                health_check_interval=30
            )
            self.redis_client.ping()
            logger.info(f"Connected to Redis at {settings.redis_host}:{settings.redis_port}")
        except RedisError as e:
            logger.warning(f"Failed to connect to Redis: {e}. Spectral cache will be disabled.")
            self.redis_client = None

    def _get_cache_key(self, config_hash: str) -> str:
        return f"spectral:{config_hash}"

    def get_triple(self, config_hash: str) -> Optional[dict]:
        """
        Retrieve a spectral payload.
        Returns None on cache miss or error.
        """
        if not self.redis_client:
            return None

        try:
            cached = self.redis_client.get(self._get_cache_key(config_hash))
            if cached:
                logger.info(f"Cache HIT for spectral triple {config_hash[:12]}")
                return json.loads(cached)
            logger.info(f"Cache MISS for spectral triple {config_hash[:12]}")
            return None
        except RedisError as e:
            logger.error(f"Redis GET error for {config_hash[:12]}: {e}")
            return None
        except json.JSONDecodeError as e:
            logger.error(f"JSON decode error for cached triple {config_hash[:12]}: {e}")
            return None

    def set_triple(self, config_hash: str, payload: dict, ttl_seconds: Optional[int] = None):
        """
        Store a spectral payload with TTL.
        Logs errors but doesn't raise exceptions.
        """
        if not self.redis_client:
            return

        try:
            ttl = ttl_seconds or settings.cache_ttl_seconds
            self.redis_client.setex(self._get_cache_key(config_hash), ttl, json.dumps(payload))
            logger.info(f"Cached spectral triple {config_hash[:12]} with TTL {ttl}s")
        except RedisError as e:
            logger.error(f"Redis SET error for {config_hash[:12]}: {e}")
        except (TypeError, ValueError) as e:
            logger.error(f"Invalid spectral payload for caching: {e}")

    def invalidate(self, config_hash: str):
        if not self.redis_client:
            return

        try:
            if self.redis_client.delete(self._get_cache_key(config_hash)):
                logger.info(f"Invalidated spectral triple {config_hash[:12]}")
        except RedisError as e:
            logger.error(f"Redis DELETE error for {config_hash[:12]}: {e}")

    def health_check(self) -> bool:
        """Check if Redis is available."""
        if not self.redis_client:
            return False

        try:
            self.redis_client.ping()
            return True
        except RedisError:
            return False


# Global cache service instance
cache_service = CacheService()
