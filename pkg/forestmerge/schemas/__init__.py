"""Domain schemas: pydantic configurations and array bundles."""
