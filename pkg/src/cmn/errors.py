class RostamError(Exception):
    """Root of every error raised by the protocol library."""


# crypto
class GenerationError(RostamError): pass
class EncodingError(RostamError): pass
class IntegrityError(RostamError): pass
class UnwrapError(RostamError): pass
class UnexportableKeyError(RostamError): pass

# server / directory
class AlreadyRegistered(RostamError): pass
class NotFound(RostamError): pass
class FingerprintMismatch(RostamError): pass

# actors
class AuthError(RostamError): pass
class StateError(RostamError): pass
class GateDenied(RostamError): pass
class VerificationError(RostamError):
    """A public key fetched from the server does not hash to the scanned fingerprint."""
class ParseError(RostamError): pass
class RecoveryError(RostamError): pass

# harness
class ScenarioError(RostamError): pass
