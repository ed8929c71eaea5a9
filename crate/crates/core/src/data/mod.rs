//! Domain-shift datasets: synthetic generators, CSV ingestion and seeded
//! batch iteration.

mod csv_io;
mod dataset;
mod generators;

pub use csv_io::{load_csv, read_csv, write_csv, CsvSchema};
pub use dataset::{batch_indices, DomainDataset, DomainTag, LabeledData, UnlabeledData};
pub use generators::{
    blob_centers, gen_blobs_shift, gen_two_moons_shift, rotate_translate, BlobsConfig, TwoMoonsConfig,
};
