# CLI commands for bdo-tool
