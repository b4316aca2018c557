//! Stage rules, temporal filters, stage combination and mask refinement.

pub mod combine;
pub mod config;
pub mod pipeline;
pub mod refine;
pub mod rules;
pub mod temporal;

pub use combine::{combine_stages, CombinationPolicy};
pub use config::{DistrictCalibration, ExclusionConfig, OutlierConfig, CALIBRATION_SCHEMA_VERSION};
pub use pipeline::{classify_district, Classification, ClassificationDiagnostics, ExclusionInputs};
pub use refine::{exclude_landcover, exclude_water, focal_mode, ClassPlane};
pub use rules::{
    apply_stage_rule, Comparator, CriterionKind, Method, PixelValues, RangeBound, RatioCriterion, StageRule,
};
pub use temporal::{tpa_filter, tsp_filter, TpaParams, TspParams};
