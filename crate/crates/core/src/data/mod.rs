//! Dataset ingestion, patient-wise splitting, synthetic phantoms and manual
//! prompt simulation.

pub mod dataset;
pub mod prompts;
pub mod resize;
pub mod split;
pub mod synth;

pub use dataset::{load_dataset, load_dataset_unlabeled, load_image_dir, read_mask, write_mask, Dataset, ImageRecord, SampleEntry};
pub use prompts::{perturb_bbox, sample_point};
pub use resize::Letterbox;
pub use split::{split_by_patient, PatientSplit, SplitPart};
pub use synth::{gen_synthetic, write_tree, Ellipse, SyntheticFrame};
