//! Synthetic thermal clips with co-registered gas maps, plume masks and flux
//! labels, their on-disk layout, and the threshold / statistics baseline.

pub mod baseline;
pub mod dataset;
pub mod plume;
pub mod pnm;

pub use baseline::{otsu_segment, psi_stats_features, PsiStatsBaseline};
pub use dataset::{load_dataset, make_dataset, plan_dataset, ClipSpec, Dataset, DatasetConfig, Split};
pub use plume::{generate_clip, AnimalTraits, ClipDims, ClipSample, FluxClass, PlumeParams};
