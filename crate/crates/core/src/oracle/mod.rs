//! Exact computations on small, explicitly enumerated Markov games.

pub mod bellman;
pub mod bound;
pub mod info;
pub mod local;
pub mod tabular;

pub use bellman::{
    centralized_bellman, exact_q_star, expected_start_value, local_bellman, occupancy, policy_value, JointPolicy,
    Occupancy, QTable, Support,
};
pub use bound::{decentralized_greedy, tabular_study, theorem_bound, BoundInputs, BoundReport, StudyParams, StudyReport};
pub use info::{cmi, target_cmi, target_joint, DiscreteJoint};
pub use local::{
    bellman_target, concentrability, deterministic_policies, epsilon_terms, induce_local_model, inherent_error,
    Concentrability, DataDistribution, InherentError, LocalModel,
};
pub use tabular::{Radix, TabularEnv, TabularGame, Termination};
