"""Exception taxonomy shared by every module.

DomainError   -- a caller passed values outside an operation's domain
                 (bad ranges, mismatched shapes, empty intervals).
ContractError -- an API was used out of order or against its state
                 machine (consumed tape, missing head, config mismatch).
FormatError   -- an on-disk artifact does not parse (PLY/JSON/config);
                 the message names the offending token.

The CLI maps DomainError/FormatError/usage problems to exit code 2 and
numeric failures to exit code 1.
"""


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class FormatError(ValueError):
    pass
