class LcfError(Exception):
    pass


class DimensionError(LcfError, ValueError):
    pass


class TokenIndexError(LcfError, IndexError):
    pass


class DegenerateRowError(LcfError):
    pass


class ContractError(LcfError):
    pass


class NondeterministicError(ContractError):
    pass


class ConfigError(LcfError):
    pass


class DatasetError(LcfError):
    pass


class DatasetParseError(DatasetError):
    pass


class DatasetFormatError(DatasetError):
    pass


class IntegrityError(DatasetError):
    pass


class AlignmentError(DatasetError):
    pass


class CheckpointError(LcfError):
    pass
