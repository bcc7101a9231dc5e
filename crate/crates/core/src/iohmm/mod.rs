//! The input-output HMM: probability functions, forward-backward and EM.

pub mod em;
pub mod inference;
pub mod optim;
pub mod params;

pub use em::{fit, fit_encoded, m_step, EmConfig, EmReport, MStepDesigns, TrainingData};
pub use inference::{
    e_step, forward_backward, log_likelihood, ForwardBackwardResult, Modality, SufficientStats,
};
pub use params::{EncodedSequence, IOHMMParams};
