"""
Unit tests for the spectral cache.
Redis is mocked throughout.
"""
import json
from unittest.mock import Mock, patch

import pytest
from redis.exceptions import RedisError

from src.services.cache import CacheService


@pytest.fixture
def mock_redis():
    with patch("src.services.cache.redis.Redis") as mock:
        yield mock


@pytest.fixture
def service():
    """A service with caching off and a mock client attached afterwards."""
    service = CacheService(enabled=False)
    service.redis_client = Mock()
    return service


PAYLOAD = {"lambda_c": 1.0, "residual": 1e-9, "criticality": "product-critical"}


class TestConnection:

    def test_disabled_service_never_connects(self, mock_redis):
        service = CacheService(enabled=False)
        assert service.redis_client is None
        mock_redis.assert_not_called()

    def test_enabled_service_pings(self, mock_redis):
        service = CacheService(enabled=True)
        mock_redis.return_value.ping.assert_called_once()
        assert service.redis_client is mock_redis.return_value

    def test_failed_ping_degrades(self, mock_redis):
        mock_redis.return_value.ping.side_effect = RedisError("refused")
        service = CacheService(enabled=True)
        assert service.redis_client is None
        assert service.get_triple("abc") is None

    def test_cache_key(self):
        assert CacheService(enabled=False)._get_cache_key("abc123") == "spectral:abc123"


class TestTriples:

    def test_hit(self, service):
        service.redis_client.get.return_value = json.dumps(PAYLOAD)
        assert service.get_triple("abc") == PAYLOAD
        service.redis_client.get.assert_called_once_with("spectral:abc")

    def test_miss(self, service):
        service.redis_client.get.return_value = None
        assert service.get_triple("abc") is None

    def test_get_error_is_a_miss(self, service):
        service.redis_client.get.side_effect = RedisError("Connection failed")
        assert service.get_triple("abc") is None

    def test_corrupt_entry_is_a_miss(self, service):
        service.redis_client.get.return_value = "{not json"
        assert service.get_triple("abc") is None

    def test_set_with_ttl(self, service):
        service.set_triple("abc", PAYLOAD, ttl_seconds=300)
        service.redis_client.setex.assert_called_once_with("spectral:abc", 300, json.dumps(PAYLOAD))

    def test_set_error_swallowed(self, service):
        service.redis_client.setex.side_effect = RedisError("Connection failed")
        service.set_triple("abc", PAYLOAD)

    def test_unserializable_payload_swallowed(self, service):
        service.set_triple("abc", {"phi": object()})
        service.redis_client.setex.assert_not_called()

    def test_no_client_is_a_no_op(self):
        service = CacheService(enabled=False)
        assert service.get_triple("abc") is None
        service.set_triple("abc", PAYLOAD)
        service.invalidate("abc")

    def test_invalidate(self, service):
        service.redis_client.delete.return_value = 1
        service.invalidate("abc")
        service.redis_client.delete.assert_called_once_with("spectral:abc")


class TestHealth:

    def test_healthy(self, service):
        service.redis_client.ping.return_value = True
        assert service.health_check() is True

    def test_unhealthy(self, service):
        service.redis_client.ping.side_effect = RedisError("Connection failed")
        assert service.health_check() is False

    def test_no_client(self):
        assert CacheService(enabled=False).health_check() is False
