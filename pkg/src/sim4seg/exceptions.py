"""Exception hierarchy shared by every stage of the pipeline."""


class Sim4SegError(Exception):
    """Base class for all package errors."""


class InvalidInputError(Sim4SegError, ValueError):
    """Malformed or out-of-contract input (shape, dimension, finiteness)."""


class NoSegTokenError(Sim4SegError, LookupError):
    """The generated token stream contains no segmentation token."""


class GridTooFineError(InvalidInputError):
    """Requested region grid is finer than the similarity map allows."""


class ContractViolation(Sim4SegError, RuntimeError):
    """A stage received a value that breaks its documented precondition."""


class UnparseableVerdictError(Sim4SegError, ValueError):
    """Critic output carries no final-decision marker."""


class PipelineIOError(Sim4SegError, IOError):
    """Assistant transport failed after all retries."""

    def __init__(self, message, sample_id=None):
        super().__init__(message)
        self.sample_id = sample_id


class EmptyDatasetError(Sim4SegError, ValueError):
    """No approved records to package."""


class SampleError(Sim4SegError, RuntimeError):
    """A pipeline stage failed on one sample; ``sample_id`` names it."""

    def __init__(self, message, sample_id=None):
        super().__init__(f"{sample_id}: {message}" if sample_id else message)
        self.sample_id = sample_id
