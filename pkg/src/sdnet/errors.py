"""Exception hierarchy shared by all pipeline stages."""


class SDNetError(Exception):
    """Base class; `code` is the machine-readable name used by the CLI."""

    @property
    def code(self) -> str:
        return type(self).__name__


class InvalidManifest(SDNetError):
    """Carries every offending row as (row_number, message) in `diagnostics`."""

    def __init__(self, diagnostics):
        if isinstance(diagnostics, str):
            diagnostics = [(None, diagnostics)]
        self.diagnostics = list(diagnostics)
        lines = [msg if row is None else f"row {row}: {msg}" for row, msg in self.diagnostics]
        super().__init__("; ".join(lines))


class InvalidRale(SDNetError):
    pass


class InvalidCombination(SDNetError):
    pass


class InsufficientData(SDNetError):
    pass


class BackendFailure(SDNetError):
    pass


class EmptyMask(SDNetError):
    pass


class BoxOutOfRange(SDNetError):
    pass


class DegenerateImage(SDNetError):
    pass


class ImageReadError(SDNetError):
    def __init__(self, image_id, reason):
        self.image_id = image_id
        super().__init__(f"cannot read image for id {image_id!r}: {reason}")


class ShapeMismatch(SDNetError):
    pass


class NonFiniteLoss(SDNetError):
    pass


class NonFiniteInput(SDNetError):
    pass


class EmptyDataset(SDNetError):
    pass


class DivergedTraining(SDNetError):
    pass


class CheckpointMissing(SDNetError):
    pass


class LabelArityMismatch(SDNetError):
    pass


class DegenerateProbabilities(SDNetError):
    pass


class LengthMismatch(SDNetError):
    pass


class EmptyInput(SDNetError):
    pass


class EmptyConfusion(SDNetError):
    pass


class MissingSeverity(SDNetError):
    pass


class InvalidClass(SDNetError):
    pass


class ConfigError(SDNetError):
    pass


class UnknownSubcommand(SDNetError):
    pass
