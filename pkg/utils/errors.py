from typing import Any, List, Optional


class InspectionError(Exception):
    """Base class for every error raised by the inspection stack"""


class InvalidArgumentError(InspectionError, ValueError):
    """A caller passed a value outside an operation's domain"""


class InvalidModelError(InspectionError, ValueError):
    """Vehicle model is not physically meaningful (e.g. singular inertia)"""


class IntegrationError(InspectionError, ArithmeticError):
    """Numerical integration produced a non-finite state"""

    def __init__(self, message: str, component: Optional[str] = None):
        super().__init__(message)
        self.component = component


class InvalidGeometryError(InspectionError, ValueError):
    """Keep-in/keep-out geometry is malformed or infeasible"""

    def __init__(self, message: str, violations: Optional[List[Any]] = None):
        super().__init__(message)
        self.violations = violations or []


class InvalidMissionError(InspectionError, ValueError):
    """Inspection points do not form a usable mission"""


class MissionParseError(InspectionError):
    """Mission file is not valid JSON"""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message)
        self.line = line


class MissionSchemaError(InspectionError):
    """Mission file parsed but does not match the schema"""

    def __init__(self, message: str, fields: Optional[List[str]] = None):
        super().__init__(message)
        self.fields = fields or []


class MissionValidationError(InspectionError):
    """Mission is well-formed but geometrically infeasible"""

    def __init__(self, message: str, violations: Optional[List[Any]] = None):
        super().__init__(message)
        self.violations = violations or []
