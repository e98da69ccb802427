"""Exception types shared by the solver modules and the CLI."""


class ConfigurationError(ValueError):
    """Invalid scenario, grid or run parameters."""


class DomainError(ValueError):
    """A scalar argument lies outside the domain of a model function."""


class GridMismatchError(ValueError):
    """Two fields (or a field and a grid) do not share the same shape."""


class StabilityError(RuntimeError):
    """The explicit scheme produced an inadmissible state.

    Carries the offending cell (row, col), direction and time step so the
    failure can be reported without re-running.
    """

    def __init__(self, message, *, step=None, cell=None, direction=None, value=None):
        super().__init__(message)
        self.step = step
        self.cell = cell
        self.direction = direction
        self.value = value

    def __str__(self):
        base = super().__str__()
        parts = []
        if self.step is not None:
            parts.append(f"step={self.step}")
        if self.cell is not None:
            parts.append(f"cell={self.cell}")
        if self.direction is not None:
            parts.append(f"direction={self.direction}")
        if self.value is not None:
            parts.append(f"value={self.value:.3e}")
        return f"{base} ({', '.join(parts)})" if parts else base
