use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{perplexity, rouge_l, usage_percentage, EvalError};
use crate::latency::{build_comparison_table, render_table, t_net, t_total, ArchLatencyRow, ComparisonOptions, LatencyProfile};
use crate::model::{checksum, RungSource, SpaModel};
use crate::runtime::{count_transmissions, decode_monolithic, DecodeConfig, GatingPolicy};
use crate::train::{decode, encode, Checkpoint, EOS};

/// Checkpoints and held-out text for one data-size tier.
#[derive(Debug, Clone, PartialEq)]
pub struct TierInput {
    pub tier: String,
    pub spa_checkpoint: PathBuf,
    /// Ladder side network trained without a gate; needed by the `lst` policy.
    pub lst_checkpoint: Option<PathBuf>,
    pub test_documents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub tiers: Vec<TierInput>,
    pub policies: Vec<GatingPolicy>,
    /// `policy` is replaced per row.
    pub decode: DecodeConfig,
    /// Leading words of each test document used as the prompt.
    pub prompt_words: usize,
    pub max_prompts: usize,
    pub profile: LatencyProfile,
    pub latency_tokens: usize,
}

impl SuiteConfig {
    pub fn new(tiers: Vec<TierInput>) -> Self {
        Self {
            tiers,
            policies: vec![
                GatingPolicy::SpaClassifier,
                GatingPolicy::Lst,
                GatingPolicy::AlwaysSide,
                GatingPolicy::DeviceOnly,
                GatingPolicy::BaseOnly,
            ],
            decode: DecodeConfig::default(),
            prompt_words: 3,
            max_prompts: 40,
            profile: LatencyProfile::paper_calibration(),
            latency_tokens: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub run_id: String,
    /// Checksum over every parameter of the checkpoint the row used.
    pub config_digest: String,
    pub tier: String,
    pub policy: GatingPolicy,
    pub usage_percentage: f64,
    /// Transmissions per token.
    pub m: f64,
    pub t_net: f64,
    pub t_total: f64,
    pub rouge_l: f64,
    pub perplexity: f64,
    #[serde(skip)]
    pub wall_clock: Duration,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub digest: String,
    pub rows: Vec<ExperimentReport>,
    pub latency: Vec<(String, Vec<ArchLatencyRow>)>,
    pub warnings: Vec<String>,
}

/// Prompt text and the continuation it should produce.
fn split_prompt(doc: &str, words: usize) -> Option<(String, String)> {
    let parts: Vec<&str> = doc.split(' ').collect();
    if parts.len() <= words {
        return None;
    }
    Some((parts[..words].join(" ") + " ", parts[words..].join(" ")))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn load(path: &Path) -> Result<SpaModel, String> {
    Checkpoint::load(path)
        .and_then(|c| c.into_model())
        .map_err(|e| format!("{}: {e}", path.display()))
}

struct RowMetrics {
    sigma: Vec<u8>,
    rouge: f64,
    ppl: f64,
}

fn evaluate(model: &SpaModel, tier: &TierInput, policy: GatingPolicy, cfg: &SuiteConfig) -> Result<RowMetrics, String> {
    let dcfg = DecodeConfig { policy, ..cfg.decode };
    let mut sigma = Vec::new();
    let mut rouge = 0.0;
    let mut n = 0usize;
    for doc in &tier.test_documents {
        if n == cfg.max_prompts {
            break;
        }
        let Some((prompt, reference)) = split_prompt(doc, cfg.prompt_words) else {
            continue;
        };
        let out = decode_monolithic(model, &encode(&prompt), &dcfg, RungSource::AllLayers).map_err(|e| e.to_string())?;
        let body: Vec<u32> = out.tokens.iter().copied().take_while(|&t| t != EOS).collect();
        rouge += rouge_l(&decode(&body), &reference).f_measure;
        sigma.extend(out.sigma_trace);
        n += 1;
    }
    if n == 0 {
        return Err("no usable test prompts".into());
    }
    let ppl = perplexity(model, &tier.test_documents, policy).map_err(|e| e.to_string())?;
    Ok(RowMetrics {
        sigma,
        rouge: rouge / n as f64,
        ppl,
    })
}

#[derive(Serialize)]
struct DigestInput<'a> {
    tiers: Vec<(&'a str, String, Option<String>, usize)>,
    policies: &'a [GatingPolicy],
    decode: &'a DecodeConfig,
    prompt_words: usize,
    max_prompts: usize,
    profile: &'a LatencyProfile,
    latency_tokens: usize,
}

/// Runs every policy on every tier; failures become rows with `error` set.
pub fn run_experiment_suite(cfg: &SuiteConfig) -> SuiteReport {
    let mut rows = Vec::new();
    let mut latency = Vec::new();
    let mut warnings = Vec::new();
    let mut digests = Vec::new();
    let mut spa_usage: Vec<(String, f64)> = Vec::new();
    for tier in &cfg.tiers {
        let spa = load(&tier.spa_checkpoint);
        let lst = match &tier.lst_checkpoint {
            Some(p) => load(p),
            None => Err("no ladder checkpoint configured".into()),
        };
        let digest_of = |m: &Result<SpaModel, String>| m.as_ref().ok().map(|m| checksum(&m.named()));
        digests.push((
            tier.tier.as_str(),
            digest_of(&spa).unwrap_or_default(),
            digest_of(&lst),
            tier.test_documents.len(),
        ));
        let mut tier_rouge = Vec::new();
        for &policy in &cfg.policies {
            let start = Instant::now();
            let model = if policy == GatingPolicy::Lst { &lst } else { &spa };
            let mut row = ExperimentReport {
                run_id: format!("{}/{}", tier.tier, policy.name()),
                config_digest: digest_of(model).unwrap_or_default(),
                tier: tier.tier.clone(),
                policy,
                usage_percentage: 0.0,
                m: 0.0,
                t_net: 0.0,
                t_total: 0.0,
                rouge_l: 0.0,
                perplexity: 0.0,
                wall_clock: Duration::ZERO,
                error: None,
            };
            let result = model.as_ref().map_err(Clone::clone).and_then(|m| {
                let r = evaluate(m, tier, policy, cfg)?;
                let usage = usage_percentage(&r.sigma).map_err(|e: EvalError| e.to_string())?;
                let mval = count_transmissions(policy.into(), m.config.n_layers, Some(&r.sigma)).map_err(|e| e.to_string())?;
                let total = t_total(&cfg.profile, mval, cfg.latency_tokens, false).map_err(|e| e.to_string())?;
                Ok((r, usage, mval, total))
            });
            match result {
                Ok((r, usage, mval, total)) => {
                    row.usage_percentage = usage;
                    row.m = mval;
                    row.t_net = t_net(&cfg.profile, mval, cfg.latency_tokens);
                    row.t_total = total;
                    row.rouge_l = r.rouge;
                    row.perplexity = r.ppl;
                    tier_rouge.push((policy, r.rouge));
                    if policy == GatingPolicy::SpaClassifier {
                        spa_usage.push((tier.tier.clone(), usage));
                        let l = model.as_ref().map(|m| m.config.n_layers).unwrap_or(1);
                        match build_comparison_table(&cfg.profile, usage / 100.0, l, &ComparisonOptions {
                            n_tokens: cfg.latency_tokens,
                            ..Default::default()
                        }) {
                            Ok(t) => latency.push((tier.tier.clone(), t)),
                            Err(e) => warnings.push(format!("{}: latency table: {e}", tier.tier)),
                        }
                    }
                }
                Err(e) => row.error = Some(e),
            }
            row.wall_clock = start.elapsed();
            rows.push(row);
        }
        let find = |p| tier_rouge.iter().find(|(q, _)| *q == p).map(|(_, r)| *r);
        if let (Some(s), Some(l)) = (find(GatingPolicy::SpaClassifier), find(GatingPolicy::Lst)) {
            if s < l {
                warnings.push(format!("{}: SPA ROUGE-L {s:.4} is below LST {l:.4}", tier.tier));
            }
        }
    }
    for w in spa_usage.windows(2) {
        if w[1].1 > w[0].1 {
            warnings.push(format!(
                "usage rises from {} ({:.1}%) to {} ({:.1}%)",
                w[0].0, w[0].1, w[1].0, w[1].1
            ));
        }
    }
    let input = DigestInput {
        tiers: digests,
        policies: &cfg.policies,
        decode: &cfg.decode,
        prompt_words: cfg.prompt_words,
        max_prompts: cfg.max_prompts,
        profile: &cfg.profile,
        latency_tokens: cfg.latency_tokens,
    };
    let digest = hex(&Sha256::digest(serde_json::to_vec(&input).expect("digest input serializes")));
    SuiteReport {
        digest,
        rows,
        latency,
        warnings,
    }
}

impl SuiteReport {
    pub fn short_digest(&self) -> &str {
        &self.digest[..12]
    }

    pub fn spa_usage(&self, tier: &str) -> Option<f64> {
        self.row(tier, GatingPolicy::SpaClassifier).map(|r| r.usage_percentage)
    }

    pub fn row(&self, tier: &str, policy: GatingPolicy) -> Option<&ExperimentReport> {
        self.rows
            .iter()
            .find(|r| r.tier == tier && r.policy == policy && r.error.is_none())
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Experiment report {}\n", self.short_digest());
        let _ = writeln!(s, "## Side usage by tier\n\n| tier | usage % |\n|---|---|");
        for r in self.rows.iter().filter(|r| r.policy == GatingPolicy::SpaClassifier) {
            match &r.error {
                None => {
                    let _ = writeln!(s, "| {} | {:.1} |", r.tier, r.usage_percentage);
                }
                Some(e) => {
                    let _ = writeln!(s, "| {} | error: {e} |", r.tier);
                }
            }
        }
        let _ = writeln!(s, "\n## Latency by architecture\n");
        for (tier, rows) in &self.latency {
            let _ = writeln!(s, "{tier}:\n\n```\n{}```\n", render_table(rows));
        }
        let _ = writeln!(
            s,
            "## Policies\n\n| tier | policy | ratio | usage % | ROUGE-L | perplexity | t_net | t_total | digest |\n|---|---|---|---|---|---|---|---|---|"
        );
        for r in &self.rows {
            match &r.error {
                None => {
                    let _ = writeln!(
                        s,
                        "| {} | {} | {:.4} | {:.1} | {:.4} | {:.4} | {:.4} | {:.4} | {} |",
                        r.tier,
                        r.policy.name(),
                        r.m,
                        r.usage_percentage,
                        r.rouge_l,
                        r.perplexity,
                        r.t_net,
                        r.t_total,
                        &r.config_digest[..12.min(r.config_digest.len())]
                    );
                }
                Some(e) => {
                    let _ = writeln!(s, "| {} | {} | error: {e} | | | | | | |", r.tier, r.policy.name());
                }
            }
        }
        if !self.warnings.is_empty() {
            let _ = writeln!(s, "\n## Warnings\n");
            for w in &self.warnings {
                let _ = writeln!(s, "- {w}");
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }

    /// Writes `report-<digest>.md` and `report-<digest>.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
        std::fs::create_dir_all(dir).map_err(|e| EvalError::Io(e.to_string()))?;
        let md = dir.join(format!("report-{}.md", self.short_digest()));
        let csv = dir.join(format!("report-{}.csv", self.short_digest()));
        std::fs::write(&md, self.to_markdown()).map_err(|e| EvalError::Io(e.to_string()))?;
        std::fs::write(&csv, self.to_csv()).map_err(|e| EvalError::Io(e.to_string()))?;
        Ok((md, csv))
    }
}
