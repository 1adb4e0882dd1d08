from logging import Formatter
from copy import copy
import hashlib
import json
import math

import numpy as np
from scipy.special import expit


def check_param(param, options):
    if param not in options:
        raise ValueError(f"Expected one of {','.join(options)}. Got {param}")


def sigmoid(x):
    """
    The sigmoid map ``1 / (1 + exp(-x))``, elementwise.

    Examples
    --------
    >>> sigmoid(0.0)
    0.5
    >>> sigmoid(np.log(9))
    0.9
    """
    return expit(x)


def sigmoid_derivatives(phi):
    """
    The first three derivatives of the sigmoid, expressed through its value
    ``phi = sigmoid(x)``.

    Returns
    -------
    (ndarray, ndarray, ndarray)
        ``phi(1 - phi)``, ``phi(1 - phi)(1 - 2 phi)`` and
        ``phi(1 - phi)(1 - 6 phi + 6 phi^2)``.
    """
    d1 = phi * (1 - phi)
    d2 = d1 * (1 - 2 * phi)
    d3 = d1 * (1 - 6 * phi + 6 * phi**2)
    return d1, d2, d3


def logistic(x, omega):
    """
    The smoothed indicator ``1 / (1 + exp(-2 omega x))``. Tends to the
    indicator of ``[0, inf)`` as ``omega`` grows and is ``0.5`` at ``x = 0``
    for every ``omega``.
    """
    return expit(2 * omega * np.asarray(x, dtype=float))


def logistic_prime(x, omega):
    l = logistic(x, omega)
    return 2 * omega * l * (1 - l)


def indicator(x):
    """
    ``1`` where ``x >= 0`` and ``0`` elsewhere.
    """
    return (np.asarray(x) >= 0).astype(float)


def quadratic_penalty(x, gamma):
    """
    The one-sided quadratic penalty ``(gamma / 2) max(0, x)^2``.

    Examples
    --------
    >>> quadratic_penalty(3, 2)
    9.0
    >>> quadratic_penalty(-1, 10)
    0.0
    """
    return 0.5 * gamma * max(0.0, float(x))**2


def quadratic_penalty_prime(x, gamma):
    return gamma * max(0.0, float(x))


def deterministic_sum(values):
    """
    A correctly rounded sum of ``values``. The result does not depend on the
    order in which a worker pool produced the values.
    """
    return math.fsum(float(v) for v in values)


def deterministic_mean(values):
    values = list(values)
    return deterministic_sum(values) / len(values)


def seed_streams(seed, count):
    """
    ``count`` independent seeds split off a single seed. Each can be passed
    wherever an integer seed is accepted.
    """
    return np.random.SeedSequence(seed).spawn(count)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config_dict):
    """
    The SHA-256 hex digest of ``config_dict`` in canonical form. Reordering
    keys does not change the hash.
    """
    return hashlib.sha256(canonical_json(config_dict).encode()).hexdigest()


def file_hash(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


TRACE = 5

class ColoredFormatter(Formatter):
    """
    A subclass of :class:`logging.Formatter` that uses ANSI escape codes
    to color different parts of the :class:`logging.LogRecord` when printed to
    the console.
    """

    COLOR_PREFIX = '\033['
    COLOR_SUFFIX = '\033[0m'
    COLOR_MAPPING = {
        "TRACE"    : 90, # bright black
        "DEBUG"    : 94, # bright blue
        "INFO"     : 95, # bright magenta
        "WARNING"  : 31, # red
        "ERROR"    : 91, # bright red
        "CRITICAL" : 41, # white on red bg

        "NAME"     : 32, # green
        "MESSAGE"  : 93, # bright yellow
        "FILENAME" : 92, # bright green
        "LINENO"   : 91  # bright red
    }
    # record attribute -> color key
    COLORED_FIELDS = {
        "threadName": "NAME",
        "name": "NAME",
        "msg": "MESSAGE",
        "filename": "FILENAME",
        "lineno": "LINENO"
    }

    def __init__(self, pattern):
        Formatter.__init__(self, pattern)
        self.colored_log = "{prefix}{{color}}m{{msg}}{suffix}".format(
                    prefix=self.COLOR_PREFIX, suffix=self.COLOR_SUFFIX)

    def format(self, record):
        # c as in colored, not as in copy
        c_record = copy(record)

        for attr, key in self.COLORED_FIELDS.items():
            color = self.COLOR_MAPPING[key]
            value = getattr(c_record, attr)
            setattr(c_record, attr,
                self.colored_log.format(color=color, msg=value))

        color = self.COLOR_MAPPING.get(c_record.levelname, 37) # default white
        c_record.levelname = self.colored_log.format(color=color,
            msg=c_record.levelname)

        return Formatter.format(self, c_record)
