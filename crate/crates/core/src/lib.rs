//! Conformal prediction with missing covariates.
//!
//! Impute-then-predict pipelines are calibrated with conformalized quantile
//! regression (CQR). Two missing-data-augmentation calibrators (CP-MDA) target
//! coverage conditional on the test point's missingness pattern: the exact
//! variant calibrates on the rows whose pattern is contained in the test
//! pattern, and the nested variant re-masks every calibration row with the
//! union of both patterns.
//!
//! ```
//! use cpmda::conformal_core::PipelineConfig;
//! use cpmda::cp_mda::{mda_exact_interval, MdaPipeline};
//! use cpmda::gaussian_oracle::{generate_glm_dataset, GlmParams};
//! use cpmda::missingness::McarSpec;
//! use cpmda::{split_train_cal, MaskPattern};
//!
//! let params = GlmParams::reference(3).unwrap();
//! let data = generate_glm_dataset(&params, 600, &McarSpec::new(0.2), 7).unwrap();
//! let split = split_train_cal(data.n(), 0.5, 7).unwrap();
//! let p = MdaPipeline::fit(&data, &split, &PipelineConfig::default()).unwrap();
//! let m = MaskPattern::from_bits(&[1, 1, 0]);
//! let iv = mda_exact_interval(&p, &[f64::NAN, f64::NAN, 0.5], &m).unwrap();
//! assert!(iv.lower < iv.upper);
//! ```

pub mod cli_io;
pub mod conformal_core;
pub mod cp_mda;
pub mod data_model;
pub mod error;
pub mod evaluation;
pub mod gaussian_oracle;
pub mod imputation;
mod linalg;
pub mod missingness;
pub mod quantile_regression;
pub mod rng;

pub use data_model::{
    split_train_cal, MaskPattern, MaskedDataset, PredictionInterval, SplitIndices, MISSING,
};
pub use error::{Error, Result};
