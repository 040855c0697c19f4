class DsolocateError(Exception):
    """
    Base of every error raised by the package.
    """
    pass

class ConfigurationError(DsolocateError):
    pass

class DomainError(DsolocateError):
    pass

class TrainingError(DsolocateError):

    def __init__(self, msg: str, epoch: int):
        super(TrainingError, self).__init__(f"{msg} (epoch {epoch})")
        self.epoch = epoch

class SchemaError(DsolocateError):

    def __init__(self, field: str, msg: str):
        super(SchemaError, self).__init__(f"{field}: {msg}")
        self.field = field

class ArtifactIOError(DsolocateError):

    def __init__(self, path, msg: str):
        super(ArtifactIOError, self).__init__(f"{path}: {msg}")
        self.path = path
