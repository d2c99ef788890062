//! Metrics rows shared between learners and the experiment harness, and
//! the float formatting used everywhere numbers leave the process.

use crate::oracle::QueryLedger;

/// One emitted metrics record. Counters are cumulative per run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub round: u64,
    pub t_data: u64,
    pub t_comp_weak: u64,
    pub t_comp_strong: u64,
    pub t_prompt: u64,
    pub resets: u64,
    pub exact_regret: Option<f64>,
    pub estimation_error: Option<f64>,
    /// Learner-specific diagnostics, emitted as extra named columns.
    pub diagnostics: Vec<(&'static str, f64)>,
}

impl MetricsRow {
    pub fn from_ledger(seed: u64, round: u64, ledger: &QueryLedger) -> Self {
        Self {
            seed,
            round,
            t_data: ledger.t_data,
            t_comp_weak: ledger.t_comp_weak,
            t_comp_strong: ledger.t_comp_strong,
            t_prompt: ledger.t_prompt,
            resets: ledger.resets,
            exact_regret: None,
            estimation_error: None,
            diagnostics: Vec::new(),
        }
    }

    pub fn csv_header(diag_names: &[&str]) -> String {
        let mut h = String::from(
            "seed,round,t_data,t_comp_weak,t_comp_strong,t_prompt,resets,exact_regret,estimation_error",
        );
        for name in diag_names {
            h.push(',');
            h.push_str(name);
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.round,
            self.t_data,
            self.t_comp_weak,
            self.t_comp_strong,
            self.t_prompt,
            self.resets,
            opt_f64(self.exact_regret),
            opt_f64(self.estimation_error),
        );
        for (_, v) in &self.diagnostics {
            s.push(',');
            s.push_str(&fmt_f64(*v));
        }
        s
    }
}

/// Decimal with 17 significant digits; round-trips f64 bit-exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_round_trips_bit_exactly() {
        for &v in &[0.1, 1.0 / 3.0, std::f64::consts::PI, 1e-300, -2.5e17, 0.0] {
            let parsed: f64 = fmt_f64(v).parse().unwrap();
            assert_eq!(parsed.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn csv_row_layout() {
        let row = MetricsRow {
            seed: 3,
            round: 7,
            t_data: 10,
            t_comp_weak: 20,
            t_comp_strong: 0,
            t_prompt: 5,
            resets: 0,
            exact_regret: Some(0.25),
            estimation_error: None,
            diagnostics: vec![("spanner_size", 4.0)],
        };
        let line = row.csv_row();
        assert!(line.starts_with("3,7,10,20,0,5,0,"));
        assert_eq!(line.split(',').count(), 10);
        assert_eq!(
            MetricsRow::csv_header(&["spanner_size"]).split(',').count(),
            10
        );
    }
}
