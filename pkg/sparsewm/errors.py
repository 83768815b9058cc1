# errors.py -
#   exception types raised throughout sparsewm
#


class SparseWMError(Exception):
    '''base class for all errors raised by sparsewm'''


class ConfigError(SparseWMError):
    '''bad or missing configuration; the cli exits with code 2'''


class DimensionError(SparseWMError, ValueError):
    pass


class DegenerateInputError(SparseWMError, ValueError):
    pass


class MaskError(SparseWMError, ValueError):
    '''an attention row with every key forbidden'''


class TrainingAborted(SparseWMError):
    pass


class PlanningError(SparseWMError):
    pass


class FormatError(SparseWMError):
    '''a container file could not be parsed'''
