//! File formats and command-line plumbing: CSV datasets with missing-value
//! tokens, MCAR injection, the results CSV, and the TOML experiment config.

mod config;
mod dataset;
mod results;

pub use config::{config_to_string, load_config, parse_config};
pub use dataset::{inject_mcar, load_csv_dataset, read_csv_dataset, write_csv_dataset, CsvDataset};
pub use results::{
    emit_results, format_g, read_results, results_rows, write_results, ResultsRow, RESULTS_HEADER,
};
