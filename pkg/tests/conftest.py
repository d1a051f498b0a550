"""Shared fixtures: mock world backends, mock reference images and a no-network guard."""

import socket
from typing import Iterable

import httpx
import pytest

from repaint.backend import Backends
from repaint.cache import MemoryCache
from repaint.core import ImageSettings, ReferenceImage, RunConfig
from repaint.mockworld import MockWorld, render_scene_png


def _scene_image(
    tokens: Iterable[str], caption: str | None = None, category: str | None = None
) -> ReferenceImage:
    return ReferenceImage.from_bytes(
        render_scene_png(tokens), 64, 64, category=category, caption=caption
    )


def _make_backends(world: MockWorld, **kwargs) -> Backends:
    kwargs.setdefault("cache", MemoryCache())
    return Backends(world.mllm, world.t2i, world.embedder, **kwargs)


@pytest.fixture
def scene_image():
    """Factory turning a token set into a mock reference image."""
    return _scene_image


@pytest.fixture
def make_backends():
    """Factory wrapping a mock world in a Backends facade with a memory cache."""
    return _make_backends


@pytest.fixture
def world():
    return MockWorld()


@pytest.fixture
def backends(world):
    return _make_backends(world)


@pytest.fixture
def run_config():
    """Default schedule with small images."""
    return RunConfig(image=ImageSettings(width=64, height=64, steps=1))


@pytest.fixture
def no_network(monkeypatch):
    """Fail the test on any attempt to open a socket or send an HTTP request."""

    def refuse(*args, **kwargs):
        raise AssertionError("network access attempted")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)
    monkeypatch.setattr(httpx.AsyncClient, "send", refuse)
    monkeypatch.setattr(httpx.Client, "send", refuse)
