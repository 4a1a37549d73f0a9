//! Bookkeeping for the acceptance target: each check runs once, is timed
//! against its budget and prints one `PASS` or `FAIL` line.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

/// Result of one check.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "{} {} ({:.1}s of {:.0}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs_f64(),
            self.detail
        )
    }
}

/// Collects outcomes in order.
#[derive(Debug, Default)]
pub struct Report {
    outcomes: Vec<Outcome>,
}

impl Report {
    /// Runs `check`, which returns a short description on success and the
    /// reason on failure. A panic or an overrun budget is a failure.
    pub fn run(
        &mut self,
        name: &str,
        budget: Duration,
        check: impl FnOnce() -> Result<String, String>,
    ) -> &Outcome {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let (mut passed, mut detail) = match result {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        if elapsed > budget {
            passed = false;
            detail = format!("over budget; {detail}");
        }
        let outcome = Outcome {
            name: name.to_string(),
            passed,
            detail,
            elapsed,
            budget,
        };
        println!("{}", outcome.line());
        self.outcomes.push(outcome);
        self.outcomes.last().expect("just pushed")
    }

    pub fn outcomes(&self) -> &[Outcome] {
        &self.outcomes
    }

    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| !o.passed).count()
    }
}

/// `Err` naming `what` unless `|got - want| <= tol`.
pub fn close(what: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol && got.is_finite() {
        Ok(())
    } else {
        Err(format!(
            "{what}: got {got}, expected {want} (tolerance {tol})"
        ))
    }
}

/// Relative error `|a - n| / max(|a|, |n|)` of two vectors, 0 when both vanish.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_and_overruns_fail() {
        let mut r = Report::default();
        assert!(
            r.run("ok", Duration::from_secs(5), || Ok("fine".into()))
                .passed
        );
        assert!(
            !r.run("panic", Duration::from_secs(5), || panic!("boom"))
                .passed
        );
        assert!(!r.run("slow", Duration::ZERO, || Ok("late".into())).passed);
        assert_eq!(r.failures(), 2);
    }

    #[test]
    fn relative_error_is_scale_free() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        let e = relative_error(&[1.0, 0.0], &[1.0, 0.001]);
        assert!((e - 0.001).abs() < 1e-6);
        assert!(close("x", 1.0, 1.0 + 1e-9, 1e-6).is_ok());
        assert!(close("x", f64::NAN, f64::NAN, 1.0).is_err());
    }
}
