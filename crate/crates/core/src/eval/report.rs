//! Evaluation reports and their canonical JSON / CSV forms.
//!
//! Canonical JSON: object keys sorted, floats printed with exactly six
//! decimals, rates in percent. Two runs with the same inputs give the same
//! bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::protocol::ProtocolMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassCounts {
    pub train_real: usize,
    pub test_real: usize,
    pub test_spoof: usize,
}

/// Rates at one threshold policy. Rates are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMetrics {
    pub policy: String,
    /// Threshold on the real-vs-spoof log-odds score.
    pub threshold_log_odds: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub hter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: String,
    pub source_domains: Vec<String>,
    pub target_domains: Vec<String>,
    pub held_out_attack: Option<String>,
    pub mode: ProtocolMode,
    pub auc: f64,
    pub eer: f64,
    pub policies: Vec<PolicyMetrics>,
    pub counts: ClassCounts,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn policy(&self, name: &str) -> Option<&PolicyMetrics> {
        self.policies.iter().find(|p| p.policy == name)
    }

    /// Keeps only the named policies (`fixed`, `eer`).
    pub fn retain_policies(&mut self, names: &[&str]) {
        self.policies.retain(|p| names.contains(&p.policy.as_str()));
    }

    pub fn to_canonical_json(&self) -> String {
        let mut policies = BTreeMap::new();
        for p in &self.policies {
            let mut o = BTreeMap::new();
            o.insert("threshold_log_odds".into(), Canon::Float(p.threshold_log_odds));
            o.insert("apcer".into(), Canon::Float(100.0 * p.apcer));
            o.insert("bpcer".into(), Canon::Float(100.0 * p.bpcer));
            o.insert("acer".into(), Canon::Float(100.0 * p.acer));
            o.insert("hter".into(), Canon::Float(100.0 * p.hter));
            policies.insert(p.policy.clone(), Canon::Object(o));
        }
        let mut counts = BTreeMap::new();
        counts.insert("train_real".into(), Canon::Int(self.counts.train_real as u64));
        counts.insert("test_real".into(), Canon::Int(self.counts.test_real as u64));
        counts.insert("test_spoof".into(), Canon::Int(self.counts.test_spoof as u64));

        let strings = |v: &[String]| Canon::Array(v.iter().map(|s| Canon::Str(s.clone())).collect());
        let mut root = BTreeMap::new();
        root.insert("protocol".into(), Canon::Str(self.protocol.clone()));
        root.insert("source_domains".into(), strings(&self.source_domains));
        root.insert("target_domains".into(), strings(&self.target_domains));
        root.insert(
            "held_out_attack".into(),
            self.held_out_attack.clone().map_or(Canon::Null, Canon::Str),
        );
        root.insert("mode".into(), Canon::Str(mode_name(self.mode).into()));
        root.insert("auc".into(), Canon::Float(100.0 * self.auc));
        root.insert("eer".into(), Canon::Float(100.0 * self.eer));
        root.insert("policies".into(), Canon::Object(policies));
        root.insert("counts".into(), Canon::Object(counts));
        root.insert("seed".into(), Canon::Int(self.seed));
        root.insert("config_hash".into(), Canon::Str(self.config_hash.clone()));
        root.insert("units".into(), Canon::Str("percent".into()));

        let mut out = String::new();
        Canon::Object(root).write(&mut out, 0);
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Metadata(e.to_string()))?;
        let pct = |v: &Value, k: &str| -> Result<f64> { Ok(number(v, k)? / 100.0) };
        let mut policies = Vec::new();
        let pol = field(&v, "policies")?
            .as_object()
            .ok_or_else(|| Error::Metadata("policies is not an object".into()))?;
        for (name, p) in pol {
            policies.push(PolicyMetrics {
                policy: name.clone(),
                threshold_log_odds: number(p, "threshold_log_odds")?,
                apcer: pct(p, "apcer")?,
                bpcer: pct(p, "bpcer")?,
                acer: pct(p, "acer")?,
                hter: pct(p, "hter")?,
            });
        }
        let counts = field(&v, "counts")?;
        let count = |k: &str| -> Result<usize> {
            field(counts, k)?
                .as_u64()
                .map(|n| n as usize)
                .ok_or_else(|| Error::Metadata(format!("{k} is not a count")))
        };
        let mode = match string(&v, "mode")?.as_str() {
            "cross_domain" => ProtocolMode::CrossDomain,
            "intra_domain" => ProtocolMode::IntraDomain,
            m => return Err(Error::Metadata(format!("unknown mode {m:?}"))),
        };
        let held_out_attack = match field(&v, "held_out_attack")? {
            Value::Null => None,
            Value::String(s) => Some(s.clone()),
            _ => return Err(Error::Metadata("held_out_attack must be string or null".into())),
        };
        Ok(EvalReport {
            protocol: string(&v, "protocol")?,
            source_domains: strings(&v, "source_domains")?,
            target_domains: strings(&v, "target_domains")?,
            held_out_attack,
            mode,
            auc: pct(&v, "auc")?,
            eer: pct(&v, "eer")?,
            policies,
            counts: ClassCounts {
                train_real: count("train_real")?,
                test_real: count("test_real")?,
                test_spoof: count("test_spoof")?,
            },
            seed: field(&v, "seed")?
                .as_u64()
                .ok_or_else(|| Error::Metadata("seed is not an integer".into()))?,
            config_hash: string(&v, "config_hash")?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn mode_name(mode: ProtocolMode) -> &'static str {
    match mode {
        ProtocolMode::CrossDomain => "cross_domain",
        ProtocolMode::IntraDomain => "intra_domain",
    }
}

fn field<'v>(v: &'v Value, k: &str) -> Result<&'v Value> {
    v.get(k).ok_or_else(|| Error::Metadata(format!("missing field {k:?}")))
}

fn string(v: &Value, k: &str) -> Result<String> {
    field(v, k)?
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| Error::Metadata(format!("{k} is not a string")))
}

fn strings(v: &Value, k: &str) -> Result<Vec<String>> {
    field(v, k)?
        .as_array()
        .and_then(|a| a.iter().map(|s| s.as_str().map(str::to_owned)).collect())
        .ok_or_else(|| Error::Metadata(format!("{k} is not a list of strings")))
}

/// Numbers, plus the `"inf"` / `"-inf"` strings used for unbounded thresholds.
fn number(v: &Value, k: &str) -> Result<f64> {
    match field(v, k)? {
        Value::Number(n) => n.as_f64(),
        Value::String(s) if s == "inf" => Some(f64::INFINITY),
        Value::String(s) if s == "-inf" => Some(f64::NEG_INFINITY),
        _ => None,
    }
    .ok_or_else(|| Error::Metadata(format!("{k} is not a number")))
}

enum Canon {
    Null,
    Int(u64),
    Float(f64),
    Str(String),
    Array(Vec<Canon>),
    Object(BTreeMap<String, Canon>),
}

impl Canon {
    fn write(&self, out: &mut String, indent: usize) {
        match self {
            Canon::Null => out.push_str("null"),
            Canon::Int(n) => write!(out, "{n}").unwrap(),
            Canon::Float(x) => write_float(out, *x),
            Canon::Str(s) => out.push_str(&Value::String(s.clone()).to_string()),
            Canon::Array(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    item.write(out, indent);
                }
                out.push(']');
            }
            Canon::Object(map) => {
                out.push_str("{\n");
                for (i, (k, v)) in map.iter().enumerate() {
                    out.push_str(&"  ".repeat(indent + 1));
                    write!(out, "\"{k}\": ").unwrap();
                    v.write(out, indent + 1);
                    if i + 1 < map.len() {
                        out.push(',');
                    }
                    out.push('\n');
                }
                out.push_str(&"  ".repeat(indent));
                out.push('}');
            }
        }
    }
}

fn write_float(out: &mut String, x: f64) {
    if x == f64::INFINITY {
        out.push_str("\"inf\"");
    } else if x == f64::NEG_INFINITY {
        out.push_str("\"-inf\"");
    } else if x.is_nan() {
        out.push_str("null");
    } else {
        // Avoid printing "-0.000000".
        let s = format!("{x:.6}");
        if s.trim_start_matches('-').bytes().all(|b| b == b'0' || b == b'.') {
            out.push_str("0.000000");
        } else {
            out.push_str(&s);
        }
    }
}

/// Mean of each metric over a group of reports for one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub policy: String,
    pub reports: usize,
    pub auc: f64,
    pub eer: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub hter: f64,
}

pub fn summarize(reports: &[EvalReport]) -> Vec<SummaryRow> {
    let mut names: Vec<&str> = reports
        .iter()
        .flat_map(|r| r.policies.iter().map(|p| p.policy.as_str()))
        .collect();
    names.sort_unstable();
    names.dedup();
    names
        .into_iter()
        .map(|name| {
            let rows: Vec<(&EvalReport, &PolicyMetrics)> = reports
                .iter()
                .filter_map(|r| r.policy(name).map(|p| (r, p)))
                .collect();
            let n = rows.len() as f64;
            let mean = |f: &dyn Fn(&EvalReport, &PolicyMetrics) -> f64| {
                rows.iter().map(|(r, p)| f(r, p)).sum::<f64>() / n
            };
            SummaryRow {
                policy: name.to_owned(),
                reports: rows.len(),
                auc: mean(&|r, _| r.auc),
                eer: mean(&|r, _| r.eer),
                apcer: mean(&|_, p| p.apcer),
                bpcer: mean(&|_, p| p.bpcer),
                acer: mean(&|_, p| p.acer),
                hter: mean(&|_, p| p.hter),
            }
        })
        .collect()
}

const CSV_HEADER: &str = "protocol,seed,policy,threshold_log_odds,auc,eer,apcer,bpcer,acer,hter,test_real,test_spoof,config_hash";

/// One CSV line per (report, policy), then one `mean` line per policy.
/// Rates are in percent.
pub fn summary_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let f = |x: f64| {
        let mut s = String::new();
        write_float(&mut s, x);
        s.trim_matches('"').to_owned()
    };
    for r in reports {
        for p in &r.policies {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                csv_field(&r.protocol),
                r.seed,
                p.policy,
                f(p.threshold_log_odds),
                f(100.0 * r.auc),
                f(100.0 * r.eer),
                f(100.0 * p.apcer),
                f(100.0 * p.bpcer),
                f(100.0 * p.acer),
                f(100.0 * p.hter),
                r.counts.test_real,
                r.counts.test_spoof,
                r.config_hash,
            )
            .unwrap();
        }
    }
    for s in summarize(reports) {
        writeln!(
            out,
            "mean,,{},,{},{},{},{},{},{},,,",
            s.policy,
            f(100.0 * s.auc),
            f(100.0 * s.eer),
            f(100.0 * s.apcer),
            f(100.0 * s.bpcer),
            f(100.0 * s.acer),
            f(100.0 * s.hter),
        )
        .unwrap();
    }
    out
}

/// Canonical JSON for the aggregated summary.
pub fn summary_json(reports: &[EvalReport]) -> String {
    let mut per_policy = BTreeMap::new();
    for s in summarize(reports) {
        let mut o = BTreeMap::new();
        o.insert("reports".into(), Canon::Int(s.reports as u64));
        o.insert("auc".into(), Canon::Float(100.0 * s.auc));
        o.insert("eer".into(), Canon::Float(100.0 * s.eer));
        o.insert("apcer".into(), Canon::Float(100.0 * s.apcer));
        o.insert("bpcer".into(), Canon::Float(100.0 * s.bpcer));
        o.insert("acer".into(), Canon::Float(100.0 * s.acer));
        o.insert("hter".into(), Canon::Float(100.0 * s.hter));
        per_policy.insert(s.policy, Canon::Object(o));
    }
    let mut root = BTreeMap::new();
    root.insert(
        "protocols".into(),
        Canon::Array(reports.iter().map(|r| Canon::Str(r.protocol.clone())).collect()),
    );
    root.insert("mean".into(), Canon::Object(per_policy));
    root.insert("units".into(), Canon::Str("percent".into()));
    let mut out = String::new();
    Canon::Object(root).write(&mut out, 0);
    out.push('\n');
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}
