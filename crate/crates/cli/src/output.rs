//! JSON and CSV emitters.

use std::io::Write;

use serde::Serialize;

use dips::{Dataset, EffectEstimate, Method, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Serialize)]
pub struct DiagnosticsRecord {
    pub negative_ps_count: usize,
    pub bandwidth: Option<f64>,
    pub ps_support: Vec<String>,
    pub om_support: Vec<String>,
    pub resample_failures: usize,
    pub ps_lambda: f64,
    pub om_lambda: f64,
    pub min_abs_ps: f64,
    pub max_weight_share: f64,
    pub mu1: f64,
    pub mu0: f64,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
pub struct EstimateRecord {
    pub method: Method,
    pub n: usize,
    pub p: usize,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci: Option<[f64; 2]>,
    pub p_value: Option<f64>,
    pub diagnostics: DiagnosticsRecord,
    pub seed: u64,
    pub version: &'static str,
}

impl EstimateRecord {
    pub fn new(e: EffectEstimate, data: &Dataset, seed: u64) -> Self {
        let d = e.diagnostics;
        Self {
            method: e.method,
            n: data.n(),
            p: data.p(),
            estimate: e.delta,
            se: e.se,
            ci: e.ci.map(|(lo, hi)| [lo, hi]),
            p_value: e.p_value,
            diagnostics: DiagnosticsRecord {
                negative_ps_count: d.negative_ps_count,
                bandwidth: d.bandwidth,
                ps_support: d.ps_support,
                om_support: d.om_support,
                resample_failures: d.resample_failures,
                ps_lambda: d.ps_lambda,
                om_lambda: d.om_lambda,
                min_abs_ps: d.min_abs_ps,
                max_weight_share: d.max_weight_share,
                mu1: e.mu1,
                mu0: e.mu0,
                warnings: d.warnings,
            },
            seed,
            version: VERSION,
        }
    }
}

pub fn write_json<T: Serialize, W: Write>(value: &T, mut w: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
    writeln!(w)?;
    Ok(())
}

/// Long format: `method,resample,estimate`.
pub fn write_resamples<W: Write>(draws: &[(Method, Vec<f64>)], w: W) -> Result<()> {
    let mut w = std::io::BufWriter::new(w);
    writeln!(w, "method,resample,estimate")?;
    for (m, vals) in draws {
        for (b, v) in vals.iter().enumerate() {
            writeln!(w, "{m},{b},{v}")?;
        }
    }
    w.flush()?;
    Ok(())
}
