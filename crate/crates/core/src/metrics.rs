//! Per-epoch metrics as CSV.

use std::path::Path;

use crate::error::{Error, Result};
use crate::train::MetricsRecord;

pub const HEADER: &str = "epoch,mean_loss,accuracy_pct,dice,wall_seconds";

/// `%g`-style formatting with six significant digits.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            format_sig6(r.mean_loss),
            format_sig6(r.accuracy_pct),
            format_sig6(r.dice),
            format_sig6(r.wall_seconds)
        ));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Format {
            offset: 0,
            message: format!("expected header {HEADER:?}"),
        });
    }
    let mut offset = HEADER.len() + 1;
    let mut out = Vec::new();
    for line in lines {
        let bad = |what: &str| Error::Format {
            offset,
            message: format!("bad {what} in metrics row {line:?}"),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad("field count"));
        }
        let num = |i: usize, what: &str| fields[i].parse::<f64>().map_err(|_| bad(what));
        out.push(MetricsRecord {
            epoch: fields[0].parse().map_err(|_| bad("epoch"))?,
            mean_loss: num(1, "mean_loss")?,
            accuracy_pct: num(2, "accuracy_pct")?,
            dice: num(3, "dice")?,
            wall_seconds: num(4, "wall_seconds")?,
        });
        offset += line.len() + 1;
    }
    Ok(out)
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_to_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&text)
}
