//! From raw taps to per-user activity histories, plus the synthetic generator.

pub mod context;
pub mod ingest;
pub mod split;
pub mod synth;

pub use context::{build_context, FeatureSchema, HistoryStats};
pub use ingest::{derive_activities, segment_days, CalendarData, RawTapRecord};
pub use split::split_train_test;
pub use synth::{synthesize, SyntheticScenario};
