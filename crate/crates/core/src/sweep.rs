//! One-axis sweeps of the SR and NR convergence bounds.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::experiments::write_atomic;
use crate::theory::{nr_bound, sr_bound, BoundTerms, ProblemConstants};

#[allow(non_camel_case_types)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    #[serde(rename = "d")]
    D,
    R,
    L,
    F0_minus_Fstar,
    #[serde(rename = "alpha")]
    Alpha,
    #[serde(rename = "beta2")]
    Beta2,
    #[serde(rename = "eps")]
    Eps,
    Delta,
    T,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::D => "d",
            Axis::R => "R",
            Axis::L => "L",
            Axis::F0_minus_Fstar => "F0_minus_Fstar",
            Axis::Alpha => "alpha",
            Axis::Beta2 => "beta2",
            Axis::Eps => "eps",
            Axis::Delta => "Delta",
            Axis::T => "T",
        }
    }

    fn set(self, c: &mut ProblemConstants, v: f64) {
        match self {
            Axis::D => c.d = v,
            Axis::R => c.r = v,
            Axis::L => c.l = v,
            Axis::F0_minus_Fstar => c.f0_minus_fstar = v,
            Axis::Alpha => c.alpha = v,
            Axis::Beta2 => c.beta2 = v,
            Axis::Eps => c.eps = v,
            Axis::Delta => c.delta = v,
            Axis::T => c.t = v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRange {
    pub start: f64,
    pub stop: f64,
    pub points: usize,
    /// Geometric spacing.
    #[serde(default)]
    pub log: bool,
}

/// `constants` fixes every axis except `axis`, which takes either the
/// explicit `values` or the points of `range`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSweepSpec {
    pub constants: ProblemConstants,
    pub axis: Axis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<SweepRange>,
}

impl BoundSweepSpec {
    pub fn points(&self) -> Result<Vec<f64>> {
        match (&self.values, &self.range) {
            (Some(v), None) => {
                if v.is_empty() {
                    return Err(Error::config("values", "must not be empty"));
                }
                Ok(v.clone())
            }
            (None, Some(r)) => {
                if r.points == 0 {
                    return Err(Error::config("range.points", "must be >= 1"));
                }
                if r.log && !(r.start > 0.0 && r.stop > 0.0) {
                    return Err(Error::config("range", "log spacing needs positive endpoints"));
                }
                let n = r.points;
                Ok((0..n)
                    .map(|i| {
                        let f = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                        if r.log {
                            (r.start.ln() + f * (r.stop.ln() - r.start.ln())).exp()
                        } else {
                            r.start + f * (r.stop - r.start)
                        }
                    })
                    .collect())
            }
            _ => Err(Error::config("values", "give exactly one of `values` or `range`")),
        }
    }

    /// Constants at every sweep point, each validated.
    pub fn instances(&self) -> Result<Vec<ProblemConstants>> {
        self.points()?
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let mut c = self.constants;
                self.axis.set(&mut c, v);
                c.validate().map_err(|e| match e {
                    Error::InvalidConfig { field, reason } => Error::InvalidConfig {
                        field: format!("{field}[{i}]"),
                        reason,
                    },
                    e => e,
                })?;
                Ok(c)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub sr: BoundTerms,
    pub nr: BoundTerms,
}

pub const BOUND_HEADER: [&str; 11] = [
    "axis",
    "value",
    "sr_total",
    "sr_vanishing",
    "sr_adam_gap",
    "sr_quantization",
    "nr_total",
    "nr_vanishing",
    "nr_adam_gap",
    "nr_quantization",
    "nr_bias",
];

pub fn bound_sweep(spec: &BoundSweepSpec) -> Result<Vec<SweepRow>> {
    let points = spec.points()?;
    Ok(spec
        .instances()?
        .iter()
        .zip(points)
        .map(|(c, value)| SweepRow {
            value,
            sr: sr_bound(c),
            nr: nr_bound(c),
        })
        .collect())
}

pub fn bound_csv(axis: Axis, rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(BOUND_HEADER)?;
    for r in rows {
        let nums = [
            r.value,
            r.sr.total,
            r.sr.vanishing,
            r.sr.adam_gap,
            r.sr.quantization,
            r.nr.total,
            r.nr.vanishing,
            r.nr.adam_gap,
            r.nr.quantization,
            r.nr.bias,
        ];
        let mut rec = vec![axis.name().to_owned()];
        rec.extend(nums.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::config("csv", e.to_string()))
}

/// Writes `bounds.csv` and `manifest.json` into `out`.
pub fn write_sweep(out: &Path, spec: &BoundSweepSpec, rows: &[SweepRow]) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("bounds.csv"), &bound_csv(spec.axis, rows)?)?;
    let ordered = rows.iter().all(|r| r.nr.total >= r.sr.total);
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "kind": "bound",
        "seed": null,
        "spec": spec,
        "csv_columns": BOUND_HEADER,
        "summary": {"rows": rows.len(), "nr_at_least_sr": ordered},
    });
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_atomic(&out.join("manifest.json"), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ProblemConstants {
        ProblemConstants {
            d: 1e4,
            r: 1.0,
            l: 1.0,
            f0_minus_fstar: 1.0,
            alpha: 1e-3,
            beta2: 0.95,
            eps: 1e-8,
            delta: 2f64.powi(-8),
            t: 1e4,
        }
    }

    #[test]
    fn delta_sweep_starts_without_quantization() {
        let spec = BoundSweepSpec {
            constants: base(),
            axis: Axis::Delta,
            values: Some(vec![0.0, 1e-4, 1e-3, 1e-2]),
            range: None,
        };
        let rows = bound_sweep(&spec).unwrap();
        assert_eq!(rows[0].sr.quantization, 0.0);
        assert_eq!(rows[0].sr, rows[0].nr);
        for w in rows.windows(2) {
            assert!(w[1].sr.quantization > w[0].sr.quantization);
        }
        assert!(rows[1..].iter().all(|r| r.nr.total > r.sr.total));
    }

    #[test]
    fn beta2_sweep_grows_quantization() {
        let spec = BoundSweepSpec {
            constants: base(),
            axis: Axis::Beta2,
            values: Some(vec![0.9, 0.99, 0.999, 0.9999]),
            range: None,
        };
        let rows = bound_sweep(&spec).unwrap();
        let q: Vec<f64> = rows.iter().map(|r| r.sr.quantization).collect();
        assert!(q.windows(2).all(|w| w[1] > w[0]), "{q:?}");
    }

    #[test]
    fn alpha_sweep_bias_is_inverse() {
        let spec = BoundSweepSpec {
            constants: base(),
            axis: Axis::Alpha,
            values: None,
            range: Some(SweepRange {
                start: 1e-4,
                stop: 1e-2,
                points: 3,
                log: true,
            }),
        };
        let rows = bound_sweep(&spec).unwrap();
        assert!((rows[0].value - 1e-4).abs() < 1e-18 && (rows[2].value - 1e-2).abs() < 1e-16);
        let k0 = rows[0].nr.bias * rows[0].value;
        for r in &rows {
            assert!((r.nr.bias * r.value - k0).abs() <= 1e-12 * k0);
        }
    }

    #[test]
    fn invalid_points_are_rejected() {
        let mut spec = BoundSweepSpec {
            constants: base(),
            axis: Axis::Beta2,
            values: Some(vec![0.5, 1.0]),
            range: None,
        };
        match bound_sweep(&spec) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "beta2[1]"),
            other => panic!("{other:?}"),
        }
        spec.values = None;
        assert!(bound_sweep(&spec).is_err());
        let parsed: std::result::Result<BoundSweepSpec, _> =
            serde_json::from_str(r#"{"constants": {}, "axis": "gamma", "values": [1]}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn csv_has_one_row_per_point() {
        let spec = BoundSweepSpec {
            constants: base(),
            axis: Axis::T,
            values: Some(vec![10.0, 100.0]),
            range: None,
        };
        let text = String::from_utf8(bound_csv(spec.axis, &bound_sweep(&spec).unwrap()).unwrap()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], BOUND_HEADER.join(","));
        assert!(lines[1].starts_with("T,1e1,"));
    }
}
