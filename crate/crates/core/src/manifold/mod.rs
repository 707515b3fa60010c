//! Synthetic parametric manifold: generator, databases, partitions and window tuning.

mod database;
mod generator;
mod partition;
mod tuning;

pub use database::{
    draw_patient, load_database, sample_database, save_database, HealthFilter, ParameterRanges, SnapshotDatabase,
    FORMAT_VERSION, PARAM_COLUMNS,
};
pub(crate) use database::{ensure_dir, read_f64s, read_json, write_f64s, write_json};
pub use generator::{
    inlet_profile, label_health, station_flux, synthesize_snapshot, waveform, Component, GridConfig, Health,
    ParameterPoint, Segment, Snapshot, ETA_RANGES, HEALTHY_ETA, HR_RANGE, S_RANGE, T_SYS_RANGE, U0_RANGE,
};
pub use partition::{longest_cycle, partition_database, CellKey, Partition, WindowGrid};
pub use tuning::{tune_windows, WindowCandidate, WindowScore};
