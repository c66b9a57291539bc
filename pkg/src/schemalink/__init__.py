"""Progressive multi-granularity schema linking for Text-to-SQL."""

from .catalog import SchemaCatalog, SchemaElementId, SchemaSet, TableSchema, ColumnSchema
from .data import Instance

__all__ = ["SchemaCatalog", "SchemaElementId", "SchemaSet", "TableSchema", "ColumnSchema", "Instance"]
__version__ = "0.1.0"
