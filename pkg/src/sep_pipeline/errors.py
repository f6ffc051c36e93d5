"""Exception hierarchy shared by every stage of the pipeline."""


class SepPipelineError(Exception):
    exit_code = 1


class ValidationError(SepPipelineError, ValueError):
    exit_code = 1


class MissingDependencyError(SepPipelineError):
    exit_code = 2


class NumericalError(SepPipelineError, ArithmeticError):
    exit_code = 3
