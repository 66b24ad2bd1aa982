use std::fmt::Write as _;
use std::time::Duration;

/// Tolerance below which a negative bound margin counts as a violation.
pub const VIOLATION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    /// No feasible point was found, so the bound was not exercised.
    Inconclusive,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceResult {
    pub instance_id: usize,
    pub feasible_points_found: usize,
    pub bound_value: f64,
    pub worst_observed: f64,
    /// Smallest slack of the checked inequalities; negative means violated.
    pub margin: f64,
    pub status: Status,
}

impl InstanceResult {
    /// Status from a margin with the given tolerance.
    pub fn judged(
        instance_id: usize,
        feasible_points_found: usize,
        bound_value: f64,
        worst_observed: f64,
        margin: f64,
        tol: f64,
    ) -> Self {
        let status = if feasible_points_found == 0 {
            Status::Inconclusive
        } else if margin >= -tol {
            Status::Pass
        } else {
            Status::Fail
        };
        Self {
            instance_id,
            feasible_points_found,
            bound_value,
            worst_observed,
            margin,
            status,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub suite: String,
    pub instances_tested: usize,
    pub violations: usize,
    pub inconclusive: usize,
    /// Minimum margin over conclusive instances; `+inf` if there are none.
    pub worst_margin: f64,
    pub runtime: Duration,
    pub rows: Vec<InstanceResult>,
}

impl CheckReport {
    pub fn from_rows(suite: &str, rows: Vec<InstanceResult>, runtime: Duration) -> Self {
        let violations = rows.iter().filter(|r| r.status == Status::Fail).count();
        let inconclusive = rows.iter().filter(|r| r.status == Status::Inconclusive).count();
        let worst_margin = rows
            .iter()
            .filter(|r| r.status != Status::Inconclusive)
            .map(|r| r.margin)
            .fold(f64::INFINITY, f64::min);
        Self {
            suite: suite.to_string(),
            instances_tested: rows.len(),
            violations,
            inconclusive,
            worst_margin,
            runtime,
            rows,
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("instance_id,feasible_points_found,bound_value,worst_observed,margin,status\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{:.16e},{:.16e},{:.16e},{}",
                r.instance_id,
                r.feasible_points_found,
                r.bound_value,
                r.worst_observed,
                r.margin,
                r.status.name()
            )
            .unwrap();
        }
        s
    }
}

/// One row per suite; runtimes are left out so the file is reproducible.
pub fn summary_csv(reports: &[CheckReport]) -> String {
    let mut s = String::from("suite,instances_tested,violations,inconclusive,worst_margin\n");
    for r in reports {
        writeln!(
            s,
            "{},{},{},{},{:.16e}",
            r.suite, r.instances_tested, r.violations, r.inconclusive, r.worst_margin
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn judging() {
        assert_eq!(InstanceResult::judged(0, 0, 0.5, 0.4, -1.0, 1e-9).status, Status::Inconclusive);
        assert_eq!(InstanceResult::judged(0, 3, 0.5, 0.5, -1e-10, 1e-9).status, Status::Pass);
        assert_eq!(InstanceResult::judged(0, 3, 0.5, 0.4, -0.1, 1e-9).status, Status::Fail);
    }

    #[test]
    fn aggregation() {
        let rows = vec![
            InstanceResult::judged(0, 1, 0.5, 0.7, 0.2, 1e-9),
            InstanceResult::judged(1, 0, 0.5, 0.0, -5.0, 1e-9),
            InstanceResult::judged(2, 2, 0.5, 0.6, 0.1, 1e-9),
        ];
        let r = CheckReport::from_rows("x", rows, Duration::ZERO);
        assert_eq!((r.violations, r.inconclusive), (0, 1));
        assert_eq!(r.worst_margin, 0.1);
        assert!(r.passed());
        assert_eq!(r.to_csv().lines().count(), 4);
        assert!(summary_csv(&[r]).contains("x,3,0,1,"));
    }
}
