//! JSON-lines telemetry. One object per batch, plus one epoch-summary
//! object per epoch. Keys always appear in the same order and reals are
//! written with 17 significant digits, so a file re-serializes to the same
//! bytes after parsing.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Batch,
    Epoch,
    Diverged,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryRecord {
    pub epoch: usize,
    /// `None` on epoch summaries.
    pub batch: Option<usize>,
    pub kind: Option<RecordKind>,
    pub method: String,
    pub loss: Option<f64>,
    pub p_a: Option<f64>,
    pub p_v: Option<f64>,
    pub pbar_a: Option<f64>,
    pub pbar_v: Option<f64>,
    pub s_a: Option<f64>,
    pub s_v: Option<f64>,
    pub red_a: Option<f64>,
    pub red_v: Option<f64>,
    pub r_a: Option<f64>,
    pub r_v: Option<f64>,
    pub sim: Option<f64>,
    pub tau: Option<f64>,
    pub gate_a: Option<u8>,
    pub gate_v: Option<u8>,
    pub gnorm_a: Option<f64>,
    pub gnorm_v: Option<f64>,
    pub dperp_a: Option<f64>,
    pub dperp_v: Option<f64>,
    /// `⟨g̃, g⟩ / ‖g‖²` on gated steps.
    pub descent_a: Option<f64>,
    pub descent_v: Option<f64>,
    pub rlc_a: Option<f64>,
    pub rlc_v: Option<f64>,
    pub dominant: Option<Modality>,
    pub acc: Option<f64>,
    pub acc_a: Option<f64>,
    pub acc_v: Option<f64>,
    pub f1: Option<f64>,
}

/// Formats a real with 17 significant digits.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_key(out: &mut String, key: &str) {
    if out.len() > 1 {
        out.push(',');
    }
    out.push('"');
    out.push_str(key);
    out.push_str("\":");
}

fn push_real(out: &mut String, key: &str, v: Option<f64>) {
    push_key(out, key);
    match v {
        Some(v) if v.is_finite() => out.push_str(&format_real(v)),
        _ => out.push_str("null"),
    }
}

fn push_int(out: &mut String, key: &str, v: Option<usize>) {
    push_key(out, key);
    match v {
        Some(v) => write!(out, "{v}").unwrap(),
        None => out.push_str("null"),
    }
}

fn push_str(out: &mut String, key: &str, v: Option<&str>) {
    push_key(out, key);
    match v {
        Some(s) => out.push_str(&serde_json::to_string(s).unwrap()),
        None => out.push_str("null"),
    }
}

impl TelemetryRecord {
    pub fn gate(&self, m: Modality) -> Option<u8> {
        match m {
            Modality::A => self.gate_a,
            Modality::V => self.gate_v,
        }
    }

    pub fn red(&self, m: Modality) -> Option<f64> {
        match m {
            Modality::A => self.red_a,
            Modality::V => self.red_v,
        }
    }

    pub fn descent(&self, m: Modality) -> Option<f64> {
        match m {
            Modality::A => self.descent_a,
            Modality::V => self.descent_v,
        }
    }

    pub fn to_json_line(&self) -> String {
        let mut s = String::with_capacity(512);
        s.push('{');
        push_int(&mut s, "epoch", Some(self.epoch));
        push_int(&mut s, "batch", self.batch);
        let kind = self.kind.map(|k| match k {
            RecordKind::Batch => "batch",
            RecordKind::Epoch => "epoch",
            RecordKind::Diverged => "diverged",
        });
        push_str(&mut s, "kind", kind);
        push_str(&mut s, "method", Some(&self.method));
        push_real(&mut s, "loss", self.loss);
        push_real(&mut s, "p_a", self.p_a);
        push_real(&mut s, "p_v", self.p_v);
        push_real(&mut s, "pbar_a", self.pbar_a);
        push_real(&mut s, "pbar_v", self.pbar_v);
        push_real(&mut s, "s_a", self.s_a);
        push_real(&mut s, "s_v", self.s_v);
        push_real(&mut s, "red_a", self.red_a);
        push_real(&mut s, "red_v", self.red_v);
        push_real(&mut s, "r_a", self.r_a);
        push_real(&mut s, "r_v", self.r_v);
        push_real(&mut s, "sim", self.sim);
        push_real(&mut s, "tau", self.tau);
        push_int(&mut s, "gate_a", self.gate_a.map(usize::from));
        push_int(&mut s, "gate_v", self.gate_v.map(usize::from));
        push_real(&mut s, "gnorm_a", self.gnorm_a);
        push_real(&mut s, "gnorm_v", self.gnorm_v);
        push_real(&mut s, "dperp_a", self.dperp_a);
        push_real(&mut s, "dperp_v", self.dperp_v);
        push_real(&mut s, "descent_a", self.descent_a);
        push_real(&mut s, "descent_v", self.descent_v);
        push_real(&mut s, "rlc_a", self.rlc_a);
        push_real(&mut s, "rlc_v", self.rlc_v);
        push_str(&mut s, "dominant", self.dominant.map(Modality::name));
        push_real(&mut s, "acc", self.acc);
        push_real(&mut s, "acc_a", self.acc_a);
        push_real(&mut s, "acc_v", self.acc_v);
        push_real(&mut s, "f1", self.f1);
        s.push('}');
        s
    }

    pub fn parse_line(line: &str, line_no: usize) -> Result<TelemetryRecord> {
        serde_json::from_str(line).map_err(|e| Error::Malformed {
            line: line_no,
            msg: e.to_string(),
        })
    }
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[TelemetryRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", r.to_json_line())?;
    }
    Ok(())
}

/// Reads every non-blank line; errors carry 1-based line numbers.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TelemetryRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Malformed { line: i + 1, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(TelemetryRecord::parse_line(&line, i + 1)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TelemetryRecord {
        TelemetryRecord {
            epoch: 3,
            batch: Some(7),
            kind: Some(RecordKind::Batch),
            method: "redreg".into(),
            loss: Some(std::f64::consts::LN_2),
            p_a: Some(0.1 + 0.2),
            sim: Some(-1.0e-300),
            tau: Some(0.35),
            gate_a: Some(1),
            gate_v: Some(0),
            descent_a: Some(1.0),
            dominant: Some(Modality::A),
            ..Default::default()
        }
    }

    #[test]
    fn reals_carry_seventeen_digits() {
        assert_eq!(format_real(0.1), "1.0000000000000001e-1");
        assert_eq!(format_real(-2.5), "-2.5000000000000000e0");
    }

    #[test]
    fn line_round_trip_is_byte_identical() {
        let r = sample();
        let line = r.to_json_line();
        let back = TelemetryRecord::parse_line(&line, 1).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json_line(), line);
    }

    #[test]
    fn malformed_line_reports_position() {
        let text = format!("{}\n{{\"epoch\": \"x\"}}\n", sample().to_json_line());
        match read_jsonl(text.as_bytes()).unwrap_err() {
            Error::Malformed { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }
}
