"""
Helper utilities for testing: log capture and small shared builders.
"""

import logging
from contextlib import contextmanager
from io import StringIO

import numpy as np

from madiff.config import ModelConfig, RunConfig, ScheduleConfig, TrainingConfig
from madiff.denoiser import ConditionId, GaussianDenoiser, build_model
from madiff.scheduler import make_schedule


@contextmanager
def capture_logs(logger_name="madiff", level=logging.INFO):
    """Context manager to capture log output for testing.

    Args:
        logger_name: Name of the logger to capture
        level: Minimum log level to capture

    Yields:
        StringIO object containing captured log messages
    """
    logger = logging.getLogger(logger_name)
    log_capture = StringIO()

    handler = logging.StreamHandler(log_capture)
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter("%(message)s"))

    logger.addHandler(handler)
    original_level = logger.level
    logger.setLevel(level)

    try:
        yield log_capture
    finally:
        logger.removeHandler(handler)
        logger.setLevel(original_level)
        handler.close()


def assert_in_logs(log_capture, text):
    """Assert that text appears in captured logs."""
    log_content = log_capture.getvalue()
    assert text in log_content, f"'{text}' not found in logs:\n{log_content}"


def get_log_lines(log_capture):
    """Get log content as list of lines."""
    return log_capture.getvalue().strip().split("\n") if log_capture.getvalue() else []


def random_image(seed, shape=(16, 16, 3)):
    """Image in model range [-1, 1]."""
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=shape)


def tiny_schedule(T=50):
    return make_schedule(T, 1e-3, 0.2)


def gaussian_model(schedule, shape=(16, 16, 3), vocabulary=("red_lips",)):
    """Exact predictor: non-makeup data near -0.2, makeup near 0.3, one tag near 0.6."""
    components = {
        ConditionId.non_makeup(): (-0.2, 0.3),
        ConditionId.makeup(): (0.3, 0.3),
    }
    for index, _ in enumerate(vocabulary):
        components[ConditionId.tag(index)] = (0.6, 0.2)
    return GaussianDenoiser(schedule, shape, components, vocabulary)


def tiny_config(architecture="mlp", iterations=0, widths=(4, 8), T=50):
    """RunConfig sized for gradient checks and quick training runs."""
    return RunConfig(
        schedule=ScheduleConfig(T=T, beta_start=1e-3, beta_end=0.2),
        model=ModelConfig(
            architecture=architecture,
            widths=tuple(widths),
            groups=2,
            time_dim=8,
            cond_dim=8,
            mlp_hidden=16,
            init_seed=3,
        ),
        training=TrainingConfig(
            iterations=iterations, batch_size=4, lr=1e-3, warmup_steps=10, log_every=0
        ),
    )


def tiny_model(architecture="mlp", shape=(8, 8, 3), widths=(4, 8), vocabulary=("red_lips",)):
    config = tiny_config(architecture, widths=widths)
    schedule = make_schedule(config.schedule.T, config.schedule.beta_start, config.schedule.beta_end)
    return build_model(config, shape, schedule, vocabulary), schedule
