//! Additive coupled hidden Markov models for multi-site longitudinal
//! carriage data.
//!
//! * [`model`]: state space, sum-to-zero β parameters and transition math.
//! * [`sampler`]: Metropolis-within-Gibbs inference with FFBS trajectories.
//! * [`generative`]: cohort simulation and posterior predictive curves.
//! * [`analysis`]: persistence, transmission graphs, protocol predictions
//!   and therapy contributions.
//! * [`oracle`]: exact joint-HMM reference for small models.
//! * [`io`]: CSV/JSON ingestion and output, run configuration.

pub mod analysis;
pub mod data;
pub mod error;
pub mod generative;
pub mod io;
pub mod model;
pub mod oracle;
pub mod sampler;
pub mod stats;

pub use analysis::{
    compose_protocol, contribution_analysis, persistence, persistence_summary, predict_protocol,
    transmission_graph, ComposedDraws, ContributionReport, ContributionSetup, PersistenceSummary,
    ProtocolSpec, SiteSource, Therapy, TransmissionGraph,
};
pub use data::{Arm, CohortDataset, Observation, Patient};
pub use error::{ChmmError, Result};
pub use generative::{
    observed_curve, posterior_predictive_curve, simulate_cohort, simulate_with_clearance,
    CarriageCurve, InitialSource, Measure, SimulationSpec,
};
pub use io::{ingest, read_posterior, write_posterior, RunConfig, VisitRecord};
pub use model::{
    build_transition, complete_beta_row, transition_logodds, BetaParams, BetaRow, ChmmParams,
    EmissionMatrix, InitialDistribution, State, StateSpace, TransitionMatrix, TransitionTable,
};
pub use sampler::{run_mcmc, run_mcmc_in, LatentTrajectories, McmcConfig, PosteriorSamples};
