class AgnomapError(Exception):
    pass


class ConfigError(AgnomapError, ValueError):
    """Bad configuration: shapes that do not chain, invalid hyper-parameters, missing files."""


class InputError(AgnomapError, ValueError):
    """Bad runtime input such as an out-of-range label or mismatched shapes."""


class TrainingError(AgnomapError, RuntimeError):
    pass
