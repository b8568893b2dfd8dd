class PFCMError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(PFCMError, ValueError):
    pass


class DataError(PFCMError, ValueError):
    pass


class CsvFormatError(DataError):
    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class LayoutError(PFCMError, ValueError):
    pass


class ShapeError(PFCMError, ValueError):
    def __init__(self, layer, message):
        self.layer = layer
        super().__init__(f"[{layer}] {message}")


class LabelError(PFCMError, ValueError):
    def __init__(self, index, label, num_classes):
        self.index = index
        self.label = label
        super().__init__(f"sample {index}: label {label} outside [0, {num_classes})")
