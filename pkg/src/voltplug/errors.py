"""Exception hierarchy shared across the package."""


class VoltplugError(Exception):
    """Base class for every error raised by voltplug."""


class ConfigurationError(VoltplugError, ValueError):
    """A scenario, sensor chain, ADC or timing description is invalid."""


class DomainError(VoltplugError, ValueError):
    """An input lies outside the domain of a conversion."""


class InsufficientDataError(VoltplugError):
    """Not enough samples or cycles to compute the requested quantity."""


class InvalidPairError(VoltplugError, ValueError):
    """A crossing pair does not straddle zero."""


class PairingError(VoltplugError):
    """No voltage crossing could be matched to a current crossing."""


class InconsistencyError(VoltplugError, ValueError):
    """Apparent power is smaller than active power beyond tolerance."""


class ProtocolStateError(VoltplugError):
    """A command arrived in a device mode that does not accept it."""


class PreconditionError(VoltplugError, ValueError):
    """A validation protocol was started on an unsuitable scenario."""
