# -*- coding: utf-8 -*-
# _version.py -
#   resolves the package version from _static_version.py or git,
#   in the manner of miniver
#

import os
import subprocess

from setuptools.command.build_py import build_py as build_py_orig
from setuptools.command.sdist import sdist as sdist_orig

__all__ = []

package_root = os.path.dirname(os.path.realpath(__file__))
package_name = os.path.basename(package_root)
distr_root = os.path.dirname(package_root)

STATIC_VERSION_FILE = "_static_version.py"


def get_static_version(version_file=STATIC_VERSION_FILE):
    info = {}
    with open(os.path.join(package_root, version_file), "rb") as f:
        exec(f.read(), {}, info)
    return info["version"]


def git_describe():
    '''returns `git describe` output for the distribution root, or None'''
    try:
        p = subprocess.run(["git", "describe", "--long", "--always", "--dirty"],
                           cwd=distr_root, capture_output=True)
    except OSError:
        return None
    if p.returncode != 0:
        return None
    return p.stdout.decode().strip().lstrip("v") or None


def pep440_format(description):
    # "1.2-3-gabc123-dirty" -> "1.2.dev3+gabc123.dirty"
    parts = description.split("-")
    dirty = parts[-1] == "dirty"
    if dirty:
        parts = parts[:-1]
    if len(parts) < 3:
        labels = ["g" + parts[0]] + (["dirty"] if dirty else [])
        return "unknown+" + ".".join(labels)
    release, dev, ghash = "-".join(parts[:-2]), parts[-2], parts[-1]
    version = release
    labels = []
    if dev != "0":
        version += ".dev" + dev
        labels.append(ghash)
    if dirty:
        labels.append("dirty")
    if labels:
        version += "+" + ".".join(labels)
    return version


def get_version():
    version = get_static_version()
    if version != "__use_git__":
        return version
    description = git_describe()
    if not description:
        return "0+unknown"
    return pep440_format(description)


__version__ = get_version()


def _write_version(fname):
    try:
        os.remove(fname)
    except OSError:
        pass
    with open(fname, "w") as f:
        f.write("# This file has been created by setup.py.\n"
                "version = '{}'\n".format(__version__))


class _build_py(build_py_orig):
    def run(self):
        super().run()
        _write_version(os.path.join(self.build_lib, package_name, STATIC_VERSION_FILE))


class _sdist(sdist_orig):
    def make_release_tree(self, base_dir, files):
        super().make_release_tree(base_dir, files)
        _write_version(os.path.join(base_dir, package_name, STATIC_VERSION_FILE))


cmdclass = dict(sdist=_sdist, build_py=_build_py)
