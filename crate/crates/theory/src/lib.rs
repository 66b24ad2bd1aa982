//! Generated instances and numeric checks for the null-routing bounds.
//!
//! Every checker returns one [`InstanceResult`] per instance; a
//! [`CheckReport`] aggregates a seeded corpus. Computation is in `f64`.

pub mod lemma2;
pub mod proposition;
pub mod report;
pub mod separation;
pub mod simplex;
pub mod suite;
pub mod thm3;

pub use lemma2::{check_lemma2, gen_lemma2, lemma2_from_trace, Lemma2Instance};
pub use proposition::{check_proposition, gen_proposition, PropositionInstance};
pub use report::{summary_csv, CheckReport, InstanceResult, Status, VIOLATION_TOL};
pub use separation::{check_lemma1, check_thm2, gen_lemma1, gen_thm2, Lemma1Instance, SeparationSpec, Thm2Instance};
pub use suite::{run_instance, run_suite, Suite};
pub use thm3::{check_thm3, gen_thm3, Thm3Instance};
