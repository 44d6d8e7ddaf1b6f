//! Causal falling rule lists: ordered if-then rules whose subgroups carry
//! strictly decreasing treatment effects, selected by approximate Bayesian
//! evidence.

pub mod data;
pub mod error;
pub mod gibbs;
mod la_serde;
pub mod mining;
pub mod model;
pub mod rule_list;
pub mod search;
pub mod sim;
pub mod truncnorm;
pub mod vi;

pub use data::{
    assemble_dataset, binarize, load_csv, load_dataset, BinarizationSpec, BinaryMatrix, DataConfig,
    Dataset, RawTable,
};
pub use error::{Error, Result};
pub use mining::{mine_rules, rule_eval, Rule, RulePool};
pub use model::{
    log_joint, sample_prior, simulate_data, treatment_effects, Hyperparameters, LatentParams,
    PotentialOutcomes,
};
pub use rule_list::{assign_all, assign_subgroup, edit_distance, propose_move, MoveKind, RuleList};
pub use vi::{elbo, fit_vi, posterior_effect_summary, ElboTrace, VariationalConfig, VariationalPosterior};
pub use gibbs::{run_gibbs, trace_effect_summary, GibbsConfig, GibbsTrace};
pub use search::{anneal, score_model, AnnealConfig, ScoreCache, SearchResult, Temperature};
pub use sim::{planted_instance, run_recovery_study, RecoveryConfig, RecoveryRow};
