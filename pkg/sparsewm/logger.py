# logger.py -
#   simple functions for logging
#

import sys
import time

_debug = False


def set_debug(value):
    global _debug
    _debug = bool(value)


def _write(msg):
    sys.stderr.write(time.strftime("%H:%M:%S ") + msg + '\n')
    sys.stderr.flush()


def log(msg):
    _write(msg)


def debug(msg):
    if _debug:
        _write(msg)
