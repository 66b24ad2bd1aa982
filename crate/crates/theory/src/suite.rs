//! Seeded corpora for every checker, run in parallel and merged in index order.

use std::time::Instant;

use oasis_core::{Error, Result, SeededRng};
use rayon::prelude::*;

use crate::lemma2::{check_lemma2, gen_lemma2};
use crate::proposition::{check_proposition, gen_proposition};
use crate::report::{CheckReport, InstanceResult};
use crate::separation::{check_lemma1, check_thm2, gen_lemma1, gen_thm2, SeparationSpec};
use crate::thm3::{check_thm3, gen_thm3};

/// Random restarts per separation instance.
pub const DEFAULT_PROBES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    Lemma1,
    Thm2,
    Lemma2,
    Thm3,
    Proposition,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Lemma1, Suite::Thm2, Suite::Lemma2, Suite::Thm3, Suite::Proposition];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Lemma1 => "lemma1",
            Suite::Thm2 => "thm2",
            Suite::Lemma2 => "lemma2",
            Suite::Thm3 => "thm3",
            Suite::Proposition => "proposition",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

/// Instance `i` of a suite draws only from the stream `"{suite}/{i}"`.
pub fn run_instance(suite: Suite, seed: u64, i: usize) -> Result<InstanceResult> {
    let mut rng = SeededRng::new(seed).fork(&format!("{}/{i}", suite.name()));
    match suite {
        Suite::Lemma1 => {
            let spec = SeparationSpec::random(&mut rng);
            let inst = gen_lemma1(&mut rng, &spec)?;
            check_lemma1(i, &inst, DEFAULT_PROBES, &mut rng)
        }
        Suite::Thm2 => {
            let spec = SeparationSpec::random(&mut rng);
            let inst = gen_thm2(&mut rng, &spec)?;
            check_thm2(i, &inst, DEFAULT_PROBES, &mut rng)
        }
        Suite::Lemma2 => check_lemma2(i, &gen_lemma2(&mut rng)),
        Suite::Thm3 => check_thm3(i, &gen_thm3(&mut rng)),
        Suite::Proposition => check_proposition(i, &gen_proposition(&mut rng)?),
    }
}

pub fn run_suite(suite: Suite, n: usize, seed: u64) -> Result<CheckReport> {
    if n == 0 {
        return Err(Error::Parameter("suite size must be positive".into()));
    }
    let start = Instant::now();
    let rows = (0..n)
        .into_par_iter()
        .map(|i| run_instance(suite, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckReport::from_rows(suite.name(), rows, start.elapsed()))
}
