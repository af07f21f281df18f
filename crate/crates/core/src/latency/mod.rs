//! Analytic latency decomposition for split generation.
//!
//! Total latency is on-device compute plus cloud base-model time plus network
//! time, where network time charges `τ + T_data` for every cloud/device
//! transmission and `M` counts transmissions per generated token.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runtime::{count_transmissions, TransmissionKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LatencyError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("profile parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// Inputs to the latency model. Times are seconds, work is FLOPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyProfile {
    /// Connection latency charged per transmission.
    pub tau: f64,
    /// Payload time per transmission.
    pub t_data: f64,
    /// Device compute capability in FLOP/s.
    pub f_e: f64,
    /// Device-side FLOPs per token.
    #[serde(rename = "F_data")]
    pub f_data: f64,
    #[serde(rename = "C_devices")]
    pub c_devices: f64,
    /// Cloud base-model seconds per token.
    pub t_pretrained: f64,
}

impl LatencyProfile {
    /// 6.2 ms per transmission, 3.29 s per 50 tokens on the cloud and
    /// negligible device compute.
    pub fn paper_calibration() -> Self {
        Self {
            tau: 5.0e-3,
            t_data: 1.2e-3,
            f_e: 1.0e12,
            f_data: 0.0,
            c_devices: 1.0,
            t_pretrained: 3.29 / 50.0,
        }
    }

    pub fn validate(&self) -> Result<(), LatencyError> {
        let fields = [
            ("tau", self.tau),
            ("t_data", self.t_data),
            ("f_e", self.f_e),
            ("F_data", self.f_data),
            ("C_devices", self.c_devices),
            ("t_pretrained", self.t_pretrained),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(LatencyError::Domain(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.f_e <= 0.0 {
            return Err(LatencyError::Domain("f_e must be positive".into()));
        }
        Ok(())
    }

    /// Parses `key = value` lines.
    pub fn parse(text: &str) -> Result<Self, LatencyError> {
        let p: Self = toml::from_str(text).map_err(|e| LatencyError::Parse(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, LatencyError> {
        let text = std::fs::read_to_string(path).map_err(|e| LatencyError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Cost of one transmission.
    pub fn per_transmission(&self) -> f64 {
        self.tau + self.t_data
    }
}

/// Device compute seconds per token.
///
/// The processor count multiplies the workload as written in the latency
/// model; `cdev_divides` switches to the conventional division.
pub fn t_on_devices(p: &LatencyProfile, cdev_divides: bool) -> Result<f64, LatencyError> {
    if p.f_e.is_nan() || p.f_e <= 0.0 {
        return Err(LatencyError::Domain("f_e must be positive".into()));
    }
    if cdev_divides {
        if p.c_devices <= 0.0 {
            return Err(LatencyError::Domain("C_devices must be positive when dividing".into()));
        }
        Ok(p.f_data / (p.c_devices * p.f_e))
    } else {
        Ok(p.f_data * p.c_devices / p.f_e)
    }
}

pub fn t_net(p: &LatencyProfile, m: f64, n_tokens: usize) -> f64 {
    net_with_cost(p.per_transmission(), m, n_tokens)
}

fn net_with_cost(cost: f64, m: f64, n_tokens: usize) -> f64 {
    n_tokens as f64 * m * cost
}

pub fn t_total(p: &LatencyProfile, m: f64, n_tokens: usize, cdev_divides: bool) -> Result<f64, LatencyError> {
    let n = n_tokens as f64;
    Ok(t_on_devices(p, cdev_divides)? * n + p.t_pretrained * n + t_net(p, m, n_tokens))
}

/// Reference cells for one architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaperRow {
    pub param_percent: f64,
    pub infer: f64,
    pub net: f64,
    pub total: f64,
    pub ratio: f64,
}

/// Published per-architecture cells over a 50-token horizon with L = 32.
pub fn paper_reference(kind: TransmissionKind) -> Option<PaperRow> {
    let row = |param_percent, infer, net, total, ratio| PaperRow {
        param_percent,
        infer,
        net,
        total,
        ratio,
    };
    match kind {
        TransmissionKind::Lora => Some(row(0.19, 3.26, 6.37, 9.63, 32.0)),
        TransmissionKind::Adapter => Some(row(0.38, 3.32, 12.56, 15.88, 64.0)),
        TransmissionKind::Lst => Some(row(0.2, 3.29, 0.31, 3.60, 1.0)),
        TransmissionKind::SpaClassifier => Some(row(0.21, 3.30, 0.18, 3.48, 0.62)),
        _ => None,
    }
}

pub const COMPARED: [TransmissionKind; 4] = [
    TransmissionKind::Lora,
    TransmissionKind::Adapter,
    TransmissionKind::Lst,
    TransmissionKind::SpaClassifier,
];

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonOptions {
    pub n_tokens: usize,
    pub cdev_divides: bool,
    /// Per-architecture `τ + T_data` replacing the profile's value.
    pub cost_overrides: BTreeMap<&'static str, f64>,
    pub param_percent: BTreeMap<&'static str, f64>,
}

impl Default for ComparisonOptions {
    fn default() -> Self {
        Self {
            n_tokens: 50,
            cdev_divides: false,
            cost_overrides: BTreeMap::new(),
            param_percent: BTreeMap::new(),
        }
    }
}

impl ComparisonOptions {
    /// Overrides that back out each architecture's per-transmission cost from
    /// its published net latency.
    pub fn paper_costs(mut self) -> Self {
        for kind in COMPARED {
            if let Some(r) = paper_reference(kind) {
                self.cost_overrides.insert(kind.name(), r.net / (50.0 * r.ratio));
            }
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchLatencyRow {
    pub kind: TransmissionKind,
    pub architecture: &'static str,
    pub param_percent: Option<f64>,
    pub m: f64,
    pub t_on_devices: f64,
    pub t_pretrained: f64,
    pub t_net: f64,
    pub t_total: f64,
    /// Transmissions per token; equal to `m`.
    pub ratio: f64,
    pub paper: Option<PaperRow>,
}

/// Rows for LoRA, adapter, ladder and gated side networks.
pub fn build_comparison_table(
    p: &LatencyProfile,
    usage: f64,
    n_layers: usize,
    opts: &ComparisonOptions,
) -> Result<Vec<ArchLatencyRow>, LatencyError> {
    p.validate()?;
    if n_layers == 0 {
        return Err(LatencyError::Domain("need at least one layer".into()));
    }
    if !(0.0..=1.0).contains(&usage) {
        return Err(LatencyError::Domain(format!("usage must lie in [0, 1], got {usage}")));
    }
    let n = opts.n_tokens as f64;
    let on = t_on_devices(p, opts.cdev_divides)? * n;
    let pre = p.t_pretrained * n;
    COMPARED
        .iter()
        .map(|&kind| {
            let m = match kind {
                TransmissionKind::SpaClassifier => usage,
                k => count_transmissions(k, n_layers, None).map_err(|e| LatencyError::Domain(e.to_string()))?,
            };
            let cost = opts
                .cost_overrides
                .get(kind.name())
                .copied()
                .unwrap_or_else(|| p.per_transmission());
            let net = net_with_cost(cost, m, opts.n_tokens);
            Ok(ArchLatencyRow {
                kind,
                architecture: kind.name(),
                param_percent: opts.param_percent.get(kind.name()).copied(),
                m,
                t_on_devices: on,
                t_pretrained: pre,
                t_net: net,
                t_total: on + pre + net,
                ratio: m,
                paper: paper_reference(kind),
            })
        })
        .collect()
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

/// Aligned text table with modeled and reference columns side by side.
/// Fixed precision with trailing zeros dropped.
fn trimmed(v: f64, digits: usize) -> String {
    let s = format!("{v:.digits$}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn render_table(rows: &[ArchLatencyRow]) -> String {
    let header = [
        "arch", "%param", "ratio", "t_on", "t_pre", "t_net", "t_total", "paper %param", "paper ratio", "paper infer",
        "paper net", "paper total",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let pr = r.paper;
            vec![
                r.architecture.to_string(),
                opt(r.param_percent, 2),
                trimmed(r.ratio, 4),
                format!("{:.4}", r.t_on_devices),
                format!("{:.4}", r.t_pretrained),
                format!("{:.4}", r.t_net),
                format!("{:.4}", r.t_total),
                opt(pr.map(|p| p.param_percent), 2),
                opt(pr.map(|p| p.ratio), 2),
                opt(pr.map(|p| p.infer), 2),
                opt(pr.map(|p| p.net), 2),
                opt(pr.map(|p| p.total), 2),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: Vec<&str>| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, header.to_vec());
    for row in &body {
        line(&mut out, row.iter().map(String::as_str).collect());
    }
    out
}

#[derive(Serialize)]
struct CsvRow<'a> {
    architecture: &'a str,
    param_percent: Option<f64>,
    ratio: f64,
    t_on_devices: f64,
    t_pretrained: f64,
    t_net: f64,
    t_total: f64,
    paper_param_percent: Option<f64>,
    paper_ratio: Option<f64>,
    paper_infer: Option<f64>,
    paper_net: Option<f64>,
    paper_total: Option<f64>,
}

pub fn render_csv(rows: &[ArchLatencyRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        let p = r.paper;
        w.serialize(CsvRow {
            architecture: r.architecture,
            param_percent: r.param_percent,
            ratio: r.ratio,
            t_on_devices: r.t_on_devices,
            t_pretrained: r.t_pretrained,
            t_net: r.t_net,
            t_total: r.t_total,
            paper_param_percent: p.map(|p| p.param_percent),
            paper_ratio: p.map(|p| p.ratio),
            paper_infer: p.map(|p| p.infer),
            paper_net: p.map(|p| p.net),
            paper_total: p.map(|p| p.total),
        })
        .expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

pub fn render_json(rows: &[ArchLatencyRow]) -> String {
    serde_json::to_string_pretty(rows).expect("rows serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn calib() -> LatencyProfile {
        LatencyProfile::paper_calibration()
    }

    #[test]
    fn on_device_cases() {
        let mut p = calib();
        assert_eq!(t_on_devices(&p, false).unwrap(), 0.0);
        p.f_data = 1e9;
        p.f_e = 1e9;
        assert_eq!(t_on_devices(&p, false).unwrap(), 1.0);
        p.c_devices = 2.0;
        assert_eq!(t_on_devices(&p, false).unwrap(), 2.0);
        assert_eq!(t_on_devices(&p, true).unwrap(), 0.5);
        p.f_e = 0.0;
        assert!(matches!(t_on_devices(&p, false), Err(LatencyError::Domain(_))));
    }

    #[test]
    fn net_and_total_calibration() {
        let p = calib();
        assert_eq!(t_net(&p, 0.0, 50), 0.0);
        assert!((t_net(&p, 1.0, 50) - 0.31).abs() < 1e-12);
        assert!((t_net(&p, 0.62, 50) - 0.1922).abs() < 1e-12);
        assert!((t_total(&p, 1.0, 50, false).unwrap() - 3.60).abs() < 0.01);
        assert!((t_total(&p, 0.62, 50, false).unwrap() - 3.48).abs() < 0.02);
        let zero = LatencyProfile {
            tau: 0.0,
            t_data: 0.0,
            f_e: 1.0,
            f_data: 0.0,
            c_devices: 0.0,
            t_pretrained: 0.0,
        };
        assert_eq!(t_total(&zero, 3.0, 50, false).unwrap(), 0.0);
    }

    #[test]
    fn ratio_columns() {
        let o = ComparisonOptions::default();
        let rows = build_comparison_table(&calib(), 0.62, 32, &o).unwrap();
        let r: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
        assert_eq!(r, vec![32.0, 64.0, 1.0, 0.62]);
        let rows = build_comparison_table(&calib(), 0.5, 4, &o).unwrap();
        let r: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
        assert_eq!(r, vec![4.0, 8.0, 1.0, 0.5]);
        assert!(build_comparison_table(&calib(), 0.5, 0, &o).is_err());
    }

    #[test]
    fn paper_costs_recover_net_cells() {
        let o = ComparisonOptions::default().paper_costs();
        for r in build_comparison_table(&calib(), 0.62, 32, &o).unwrap() {
            assert!((r.t_net - r.paper.unwrap().net).abs() < 1e-9, "{}", r.architecture);
        }
    }

    #[test]
    fn single_calibration_misses_lora() {
        let rows = build_comparison_table(&calib(), 0.62, 32, &ComparisonOptions::default()).unwrap();
        assert!((rows[0].t_net - 9.92).abs() < 1e-9);
        assert!((rows[0].t_net - rows[0].paper.unwrap().net).abs() > 1.0);
    }

    #[test]
    fn renderings_carry_both_columns() {
        let rows = build_comparison_table(&calib(), 0.62, 32, &ComparisonOptions::default()).unwrap();
        let t = render_table(&rows);
        assert!(t.contains("paper net") && t.contains("12.56") && t.contains("9.9200"));
        let c = render_csv(&rows);
        assert_eq!(c.lines().count(), 5);
        assert!(c.starts_with("architecture,param_percent,ratio"));
        let j: serde_json::Value = serde_json::from_str(&render_json(&rows)).unwrap();
        assert_eq!(j[3]["ratio"], 0.62);
    }

    #[test]
    fn profile_file_parsing() {
        let p = LatencyProfile::parse(
            "tau = 0.005\nt_data = 0.0012\nf_e = 1e12\nF_data = 0\nC_devices = 1\nt_pretrained = 0.0658\n",
        )
        .unwrap();
        assert_eq!(p.tau, 0.005);
        assert_eq!(p.f_data, 0.0);
        assert!(matches!(
            LatencyProfile::parse("tau = 0.005\nbogus = 1\n"),
            Err(LatencyError::Parse(_))
        ));
        assert!(matches!(
            LatencyProfile::parse("tau = -1\nt_data = 0\nf_e = 1\nF_data = 0\nC_devices = 1\nt_pretrained = 0\n"),
            Err(LatencyError::Domain(_))
        ));
    }

    proptest! {
        #[test]
        fn additivity_is_exact(usage in 0.0f64..=1.0, l in 1usize..64, n in 0usize..500, tp in 0.0f64..1.0, fd in 0.0f64..1e9) {
            let mut p = calib();
            p.t_pretrained = tp;
            p.f_data = fd;
            let rows = build_comparison_table(&p, usage, l, &ComparisonOptions { n_tokens: n, ..Default::default() }).unwrap();
            for r in rows {
                prop_assert_eq!(r.t_total, r.t_on_devices + r.t_pretrained + r.t_net);
                prop_assert_eq!(r.t_total, t_total(&p, r.m, n, false).unwrap());
            }
        }

        #[test]
        fn net_is_linear(m in 0.0f64..64.0, n in 1usize..200, cost in 1e-4f64..1e-1, k in 1u32..8) {
            let k = f64::from(k);
            let p = LatencyProfile { tau: cost, t_data: 0.0, ..calib() };
            let base = t_net(&p, m, n);
            let tol = 1e-12 * base.abs().max(1.0);
            prop_assert!((t_net(&p, m * k, n) - k * base).abs() <= tol * k);
            prop_assert!((t_net(&p, m, n * k as usize) - k * base).abs() <= tol * k);
            let scaled = LatencyProfile { tau: cost * k, ..p };
            prop_assert!((t_net(&scaled, m, n) - k * base).abs() <= tol * k);
        }

        #[test]
        fn ratio_ordering(l in 1usize..128, usage in 0.0f64..0.999) {
            let rows = build_comparison_table(&calib(), usage, l, &ComparisonOptions::default()).unwrap();
            let (lora, adapter, lst, spa) = (rows[0].ratio, rows[1].ratio, rows[2].ratio, rows[3].ratio);
            prop_assert!(spa < lst && lst <= lora && lora < adapter);
        }
    }
}
