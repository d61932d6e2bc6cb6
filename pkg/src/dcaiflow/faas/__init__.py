"""Function-serving endpoint: the compute action provider."""

from dcaiflow.faas.endpoint import (
    CapacityReport,
    EndpointError,
    EndpointInfo,
    EndpointUnavailable,
    FunctionBody,
    FunctionEndpoint,
    FunctionNotFound,
    FunctionRegistration,
    InvocationError,
    RegistrationError,
    TaskNotFound,
    TaskRecord,
    TaskState,
)
from dcaiflow.faas.server import EndpointClient, EndpointConfig, load_endpoint_config, parse_endpoint_config, serve_endpoint

__all__ = [
    "CapacityReport",
    "EndpointClient",
    "EndpointConfig",
    "EndpointError",
    "EndpointInfo",
    "EndpointUnavailable",
    "FunctionBody",
    "FunctionEndpoint",
    "FunctionNotFound",
    "FunctionRegistration",
    "InvocationError",
    "RegistrationError",
    "TaskNotFound",
    "TaskRecord",
    "TaskState",
    "load_endpoint_config",
    "parse_endpoint_config",
    "serve_endpoint",
]
