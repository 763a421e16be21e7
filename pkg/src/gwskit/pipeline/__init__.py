from .config import ConfigError, RunConfig, ValidationError, load_config, parse_config
from .external import AlignmentError, evaluate_external, sample_at_wells
from .io import (CorruptFileError, IngestError, ingest_points, read_grids, read_polygon,
                 read_storage, write_grids, write_manifest, write_points)
from .report import NoResultsError, write_report
