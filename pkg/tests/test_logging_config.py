"""Tests for root logging setup and the per-command run id."""

from __future__ import annotations

import logging

import pytest

from src import logging_config
from src.logging_config import RunIdFilter, configure_logging, current_run_id, new_run_id


@pytest.fixture
def fresh_root(monkeypatch):
    root = logging.getLogger()
    saved_handlers, saved_level = list(root.handlers), root.level
    monkeypatch.setattr(logging_config, "_CONFIGURED", False)
    yield root
    for handler in list(root.handlers):
        root.removeHandler(handler)
    for handler in saved_handlers:
        root.addHandler(handler)
    root.setLevel(saved_level)


def test_new_run_id_sets_context():
    token = current_run_id.set("-")
    try:
        run_id = new_run_id()
        assert len(run_id) == 8
        int(run_id, 16)
        assert current_run_id.get() == run_id
    finally:
        current_run_id.reset(token)


def test_filter_injects_run_id():
    token = current_run_id.set("abc12345")
    try:
        record = logging.LogRecord("x", logging.INFO, __file__, 1, "msg", None, None)
        assert RunIdFilter().filter(record)
        assert record.run_id == "abc12345"
    finally:
        current_run_id.reset(token)


def test_configure_reads_level_and_is_idempotent(fresh_root, monkeypatch):
    monkeypatch.setenv("LOG_LEVEL", "debug")
    configure_logging()
    assert fresh_root.level == logging.DEBUG
    assert len(fresh_root.handlers) == 1
    handler = fresh_root.handlers[0]
    assert any(isinstance(f, RunIdFilter) for f in handler.filters)

    configure_logging()
    assert fresh_root.handlers == [handler]


def test_unknown_level_falls_back_to_info(fresh_root, monkeypatch):
    monkeypatch.setenv("LOG_LEVEL", "chatty")
    configure_logging()
    assert fresh_root.level == logging.INFO
