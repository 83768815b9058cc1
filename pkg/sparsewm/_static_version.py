# -*- coding: utf-8 -*-
# _static_version.py -
#   overwritten by setup.py when a source or binary distribution is made.
#   the value "__use_git__" makes _version.py ask git instead.

version = "__use_git__"
