from setuptools import setup, find_packages

# from miniver
def get_version_and_cmdclass(package_path):
    """Load version.py module without importing the whole package.

    Template code from miniver
    """
    import os
    from importlib.util import module_from_spec, spec_from_file_location

    spec = spec_from_file_location("version", os.path.join(package_path, "_version.py"))
    module = module_from_spec(spec)
    spec.loader.exec_module(module)
    return module.__version__, module.cmdclass


version, cmdclass = get_version_and_cmdclass("sparsewm")

setup(name = 'sparsewm',
      version = version,
      cmdclass = cmdclass,
      packages = find_packages(exclude=['tests']),
      scripts = ['bin/sparsewm'],
      python_requires = '>=3.10',
      install_requires = ['numpy>=1.24', 'Pillow>=9.0', 'tomli>=1.1; python_version < "3.11"'],
      extras_require = {'tests': ['pytest>=7.0']},
      description = 'World-model planning with sparse imagination over patch tokens',
      include_package_data = True,
      zip_safe = False,
      )
