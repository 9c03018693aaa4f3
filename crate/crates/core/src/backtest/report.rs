//! Ledger CSV and the key-value metrics report.

use std::fmt::Write as _;
use std::io::Write;

use super::data::format_number;
use super::{DataError, Ledger};

/// Largest breach of each position limit over the run, as a fraction of
/// the wealth at the decision.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConstraintViolations {
    pub asset_lower: f64,
    pub asset_upper: f64,
    pub riskfree: f64,
    pub borrowing: f64,
}

impl ConstraintViolations {
    pub fn max(&self) -> f64 {
        self.asset_lower.max(self.asset_upper).max(self.riskfree).max(self.borrowing)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub decisions: usize,
    pub terminal_wealth: f64,
    pub terminal_benchmark: f64,
    /// `(V - V0) / V0` at the end of the run.
    pub terminal_deviation: f64,
    pub mean_deviation: f64,
    pub max_abs_deviation: f64,
    pub total_cost: f64,
    pub total_turnover: f64,
    pub violations: ConstraintViolations,
    pub regime_counts: Vec<usize>,
    pub max_kkt_residual: f64,
}

/// Summary of a ledger. Tracking deviations cover the decision rows and
/// the terminal point when present.
pub fn metrics(ledger: &Ledger) -> Metrics {
    let spec = &ledger.constraints;
    let n = spec.assets();
    let mut violations = ConstraintViolations::default();
    let mut regime_counts = vec![0; ledger.regimes];
    let mut deviations = Vec::with_capacity(ledger.rows.len() + 1);
    let (mut cost, mut turnover, mut kkt) = (0.0, 0.0, 0.0f64);
    for row in &ledger.rows {
        let v = row.v;
        let u = row.u.as_vector();
        for i in 0..n {
            violations.asset_lower = violations.asset_lower.max((spec.beta()[i] * v - u[i]) / v);
            violations.asset_upper = violations.asset_upper.max((u[i] - spec.gamma()[i] * v) / v);
        }
        violations.riskfree = violations
            .riskfree
            .max(-row.u0 / v)
            .max((row.u0 - spec.riskfree_cap() * v) / v);
        violations.borrowing = violations
            .borrowing
            .max(-u[n] / v)
            .max((u[n] - spec.borrowing_cap() * v) / v);
        if let Some(c) = regime_counts.get_mut(row.regime) {
            *c += 1;
        }
        deviations.push((row.v - row.v0) / row.v0);
        cost += row.cost_paid;
        turnover += row.turnover;
        kkt = kkt.max(row.kkt_residual);
    }
    let (terminal_wealth, terminal_benchmark) = match (&ledger.terminal, ledger.rows.last()) {
        (Some(t), _) => {
            deviations.push((t.v - t.v0) / t.v0);
            (t.v, t.v0)
        }
        (None, Some(row)) => (row.v, row.v0),
        (None, None) => (f64::NAN, f64::NAN),
    };
    let mean_deviation = if deviations.is_empty() {
        0.0
    } else {
        deviations.iter().sum::<f64>() / deviations.len() as f64
    };
    Metrics {
        decisions: ledger.rows.len(),
        terminal_wealth,
        terminal_benchmark,
        terminal_deviation: (terminal_wealth - terminal_benchmark) / terminal_benchmark,
        mean_deviation,
        max_abs_deviation: deviations.iter().fold(0.0, |m, d| m.max(d.abs())),
        total_cost: cost,
        total_turnover: turnover,
        violations,
        regime_counts,
        max_kkt_residual: kkt,
    }
}

/// Columns: `date, V, V0, u_1..u_{n+1}, u_0, regime, turnover, cost_paid`;
/// regimes are written 1-based.
pub fn write_ledger<W: Write>(ledger: &Ledger, out: W) -> Result<(), DataError> {
    let io = |e: csv::Error| DataError::Io { path: "<ledger>".into(), reason: e.to_string() };
    let n = ledger.constraints.assets();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = vec!["date".into(), "V".into(), "V0".into()];
    header.extend((1..=n + 1).map(|i| format!("u_{i}")));
    header.extend(["u_0", "regime", "turnover", "cost_paid"].map(String::from));
    w.write_record(&header).map_err(io)?;
    for row in &ledger.rows {
        let mut rec = vec![row.date.to_string(), format_number(row.v), format_number(row.v0)];
        rec.extend(row.u.as_vector().iter().map(|x| format_number(*x)));
        rec.push(format_number(row.u0));
        rec.push((row.regime + 1).to_string());
        rec.push(format_number(row.turnover));
        rec.push(format_number(row.cost_paid));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| DataError::Io { path: "<ledger>".into(), reason: e.to_string() })
}

pub fn render_metrics(m: &Metrics) -> String {
    let mut s = String::new();
    let mut line = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    line("decisions", m.decisions.to_string());
    line("terminal_wealth", format_number(m.terminal_wealth));
    line("terminal_benchmark", format_number(m.terminal_benchmark));
    line("terminal_deviation", format_number(m.terminal_deviation));
    line("mean_deviation", format_number(m.mean_deviation));
    line("max_abs_deviation", format_number(m.max_abs_deviation));
    line("total_cost", format_number(m.total_cost));
    line("total_turnover", format_number(m.total_turnover));
    line("violation_asset_lower", format_number(m.violations.asset_lower));
    line("violation_asset_upper", format_number(m.violations.asset_upper));
    line("violation_riskfree", format_number(m.violations.riskfree));
    line("violation_borrowing", format_number(m.violations.borrowing));
    line("max_kkt_residual", format_number(m.max_kkt_residual));
    for (q, c) in m.regime_counts.iter().enumerate() {
        line(&format!("regime_{}_days", q + 1), c.to_string());
    }
    s
}

pub fn write_metrics<W: Write>(m: &Metrics, mut out: W) -> std::io::Result<()> {
    out.write_all(render_metrics(m).as_bytes())
}
