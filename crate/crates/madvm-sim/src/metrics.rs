use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::{Result, SimError};

/// One accrued slot, measured on the pre-migration placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRow {
    pub slot: usize,
    pub power_watts: f64,
    pub shortage_sum: f64,
    pub migrations: usize,
    pub active_pms: usize,
}

/// Time-averages over a span of slots. `total_cost` is the average of the
/// instantaneous cost: power + (λ/|V_m|) · shortage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub slots: usize,
    pub avg_power: f64,
    pub avg_shortage_per_vm: f64,
    pub avg_migrations: f64,
    pub avg_active_pms: f64,
    pub total_cost: f64,
}

impl Aggregates {
    pub fn empty() -> Self {
        Self {
            slots: 0,
            avg_power: 0.0,
            avg_shortage_per_vm: 0.0,
            avg_migrations: 0.0,
            avg_active_pms: 0.0,
            total_cost: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<SlotRow>,
    /// Averages over the whole horizon.
    pub full: Aggregates,
    /// Averages excluding the first `warm_up_slots` slots.
    pub post_warm_up: Aggregates,
    pub warm_up_slots: usize,
    pub lambda_weight: f64,
    pub num_vms: usize,
}

/// Recomputes averages from rows; the stored aggregates carry no state of
/// their own, so they always match a recount.
pub fn aggregate(rows: &[SlotRow], skip: usize, lambda_weight: f64, num_vms: usize) -> Aggregates {
    let span = &rows[skip.min(rows.len())..];
    if span.is_empty() {
        return Aggregates::empty();
    }
    let n = span.len() as f64;
    let avg_power = span.iter().map(|r| r.power_watts).sum::<f64>() / n;
    let avg_shortage_per_vm =
        span.iter().map(|r| r.shortage_sum).sum::<f64>() / (n * num_vms as f64);
    let avg_migrations = span.iter().map(|r| r.migrations as f64).sum::<f64>() / n;
    let avg_active_pms = span.iter().map(|r| r.active_pms as f64).sum::<f64>() / n;
    let total_cost = avg_power + lambda_weight * avg_shortage_per_vm;
    Aggregates {
        slots: span.len(),
        avg_power,
        avg_shortage_per_vm,
        avg_migrations,
        avg_active_pms,
        total_cost,
    }
}

impl MetricsReport {
    pub fn new(rows: Vec<SlotRow>, warm_up_slots: usize, lambda_weight: f64, num_vms: usize) -> Self {
        let full = aggregate(&rows, 0, lambda_weight, num_vms);
        let post_warm_up = aggregate(&rows, warm_up_slots, lambda_weight, num_vms);
        Self { rows, full, post_warm_up, warm_up_slots, lambda_weight, num_vms }
    }

    /// Per-slot CSV; the byte output is a pure function of the rows.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let io_err = |e: std::io::Error| SimError::Input(format!("cannot write report: {e}"));
        writeln!(out, "slot,power_watts,shortage_sum,migrations,active_pms").map_err(io_err)?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.slot, r.power_watts, r.shortage_sum, r.migrations, r.active_pms
            )
            .map_err(io_err)?;
        }
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| SimError::Input(e.to_string()))
    }

    /// Everything except the per-slot rows, for the aggregate JSON file.
    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            slots: usize,
            warm_up_slots: usize,
            lambda_weight: f64,
            num_vms: usize,
            full: &'a Aggregates,
            post_warm_up: &'a Aggregates,
        }
        let s = Summary {
            slots: self.rows.len(),
            warm_up_slots: self.warm_up_slots,
            lambda_weight: self.lambda_weight,
            num_vms: self.num_vms,
            full: &self.full,
            post_warm_up: &self.post_warm_up,
        };
        serde_json::to_string_pretty(&s).map_err(|e| SimError::Input(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<SlotRow> {
        vec![
            SlotRow { slot: 0, power_watts: 300.0, shortage_sum: 0.0, migrations: 1, active_pms: 1 },
            SlotRow { slot: 1, power_watts: 400.0, shortage_sum: 0.2, migrations: 0, active_pms: 2 },
            SlotRow { slot: 2, power_watts: 500.0, shortage_sum: 0.1, migrations: 1, active_pms: 2 },
        ]
    }

    #[test]
    fn averages_match_a_recount() {
        let a = aggregate(&rows(), 0, 10.0, 2);
        assert_eq!(a.slots, 3);
        assert!((a.avg_power - 400.0).abs() < 1e-12);
        assert!((a.avg_shortage_per_vm - 0.3 / 6.0).abs() < 1e-12);
        assert!((a.avg_migrations - 2.0 / 3.0).abs() < 1e-12);
        assert!((a.avg_active_pms - 5.0 / 3.0).abs() < 1e-12);
        assert!((a.total_cost - (a.avg_power + 10.0 * a.avg_shortage_per_vm)).abs() < 1e-12);
    }

    #[test]
    fn warm_up_skips_leading_slots() {
        let r = MetricsReport::new(rows(), 1, 10.0, 2);
        assert_eq!(r.post_warm_up.slots, 2);
        assert!((r.post_warm_up.avg_power - 450.0).abs() < 1e-12);
        // Warm-up longer than the horizon leaves nothing to average.
        let r = MetricsReport::new(rows(), 5, 10.0, 2);
        assert_eq!(r.post_warm_up, Aggregates::empty());
    }

    #[test]
    fn zero_lambda_cost_is_power() {
        let a = aggregate(&rows(), 0, 0.0, 2);
        assert_eq!(a.total_cost, a.avg_power);
    }

    #[test]
    fn csv_has_header_and_one_line_per_slot() {
        let r = MetricsReport::new(rows(), 0, 10.0, 2);
        let text = r.csv_string().unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "slot,power_watts,shortage_sum,migrations,active_pms");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "0,300,0,1,1");
    }

    #[test]
    fn summary_json_carries_both_spans() {
        let r = MetricsReport::new(rows(), 1, 10.0, 2);
        let v: serde_json::Value = serde_json::from_str(&r.summary_json().unwrap()).unwrap();
        assert_eq!(v["slots"], 3);
        assert_eq!(v["warm_up_slots"], 1);
        assert_eq!(v["full"]["slots"], 3);
        assert_eq!(v["post_warm_up"]["slots"], 2);
        assert!(v.get("rows").is_none());
    }
}
