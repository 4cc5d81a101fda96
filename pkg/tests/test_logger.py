import logging

import pytest

from src.utils.logger import log_step, setup_logger


def test_setup_logger_replaces_its_handler():
    log = setup_logger("siu3r_engine_test", logging.DEBUG)
    log = setup_logger("siu3r_engine_test", logging.DEBUG)
    assert len(log.handlers) == 1
    assert log.level == logging.DEBUG


def test_log_step(caplog):
    log = logging.getLogger("siu3r_engine_step")
    with caplog.at_level(logging.INFO, logger="siu3r_engine_step"):
        with log_step("Rendering view0", log):
            pass
        with pytest.raises(ValueError):
            with log_step("Lifting", log):
                raise ValueError("no queries")
    messages = [r.getMessage() for r in caplog.records]
    assert messages[0] == "Rendering view0..."
    assert messages[1].startswith("Rendering view0 done in")
    assert messages[-1].startswith("Lifting failed after") and messages[-1].endswith("ValueError")
