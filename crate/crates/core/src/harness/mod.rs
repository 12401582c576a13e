//! Synthetic instances, benchmark runners and file formats.

pub mod bench;
pub mod generate;
pub mod io;

pub use bench::{
    run_can_benchmark, run_local_benchmark, CanConfig, ExperimentConfig, LocalConfig, MetricRecord,
    RunReport, Summary,
};
pub use generate::{
    gen_can_instance, gen_local_instance, instance_seed, random_pd_covariance, shared_spectrum_gap,
    CanInstance, LocalInstance, Topology,
};
pub use io::{deserialize_can, serialize_can};
