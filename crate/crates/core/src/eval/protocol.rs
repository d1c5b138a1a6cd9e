//! Evaluation protocols: which rows train, which rows test, and the full
//! fit → score → metrics run.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::encoder::{FrozenTextEncoder, Tokenizer};
use crate::error::{Error, Result};
use crate::eval::metrics::{self, ScoredSample, ThresholdPolicy};
use crate::eval::report::{ClassCounts, EvalReport, PolicyMetrics};
use crate::prompts::{self, PriorBank, PromptSet};
use crate::store::{EmbeddingStore, Label, Split};
use crate::trainer::{self, FitOutput, TrainConfig};
use crate::vector::{self, Prob};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    CrossDomain,
    IntraDomain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub name: String,
    pub source_domains: Vec<String>,
    pub target_domains: Vec<String>,
    /// When set, the test set holds this attack type only.
    pub held_out_attack: Option<String>,
    pub mode: ProtocolMode,
}

impl ProtocolSpec {
    pub fn cross_domain(
        name: impl Into<String>,
        source: &[&str],
        target: &[&str],
        held_out_attack: Option<&str>,
    ) -> Self {
        ProtocolSpec {
            name: name.into(),
            source_domains: source.iter().map(|s| s.to_string()).collect(),
            target_domains: target.iter().map(|s| s.to_string()).collect(),
            held_out_attack: held_out_attack.map(str::to_owned),
            mode: ProtocolMode::CrossDomain,
        }
    }

    /// Parses `SRC[+SRC…]->TGT[+TGT…][@ATTACK]`, e.g. `source->target` or
    /// `WMCA->SiW-Mv2@silicone_mask`.
    pub fn parse(text: &str) -> Result<Self> {
        let (domains, attack) = match text.split_once('@') {
            Some((d, a)) if !a.is_empty() => (d, Some(a)),
            Some(_) => return Err(Error::Config(format!("empty attack in protocol {text:?}"))),
            None => (text, None),
        };
        let (src, tgt) = domains
            .split_once("->")
            .ok_or_else(|| Error::Config(format!("protocol {text:?} lacks '->'")))?;
        let split = |s: &str| -> Result<Vec<String>> {
            let parts: Vec<String> = s.split('+').map(|p| p.trim().to_owned()).collect();
            if parts.iter().any(String::is_empty) {
                return Err(Error::Config(format!("empty domain in protocol {text:?}")));
            }
            Ok(parts)
        };
        let source_domains = split(src)?;
        let target_domains = split(tgt)?;
        let mode = if source_domains == target_domains {
            ProtocolMode::IntraDomain
        } else {
            ProtocolMode::CrossDomain
        };
        Ok(ProtocolSpec {
            name: text.to_owned(),
            source_domains,
            target_domains,
            held_out_attack: attack.map(str::to_owned),
            mode,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_domains.is_empty() || self.target_domains.is_empty() {
            return Err(Error::Config(format!(
                "protocol {:?} needs source and target domains",
                self.name
            )));
        }
        if self.mode == ProtocolMode::IntraDomain {
            let s: BTreeSet<_> = self.source_domains.iter().collect();
            let t: BTreeSet<_> = self.target_domains.iter().collect();
            if s != t {
                return Err(Error::Config(format!(
                    "intra-domain protocol {:?} has different source and target",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// The 14 attack types of the wide-coverage target set used by the A protocols.
pub const SIW_MV2_ATTACKS: [&str; 14] = [
    "half_mask",
    "paper_mask",
    "transparent_mask",
    "silicone_mask",
    "mannequin",
    "partial_eye",
    "funny_eye_glasses",
    "partial_mouth",
    "paper_glasses",
    "replay",
    "print",
    "cosmetic_makeup",
    "impersonation_makeup",
    "obfuscation_makeup",
];

/// The 7 attack types of the B protocols' target set.
pub const WMCA_ATTACKS: [&str; 7] = [
    "fake_head",
    "paper_mask",
    "rigid_mask",
    "flexible_mask",
    "glasses",
    "replay",
    "print",
];

/// One leave-one-attack-out protocol per attack type.
pub fn leave_one_attack_out(
    prefix: &str,
    source: &[&str],
    target: &[&str],
    attacks: &[&str],
) -> Vec<ProtocolSpec> {
    attacks
        .iter()
        .enumerate()
        .map(|(i, a)| ProtocolSpec::cross_domain(format!("{prefix}{}", i + 1), source, target, Some(a)))
        .collect()
}

/// The 27 named protocols (P1–P6, A1–A14, B1–B7). Domains use the usual
/// one-letter dataset codes plus `WMCA` and `SiW-Mv2`.
pub fn standard_protocols() -> Vec<ProtocolSpec> {
    let mut out = vec![
        ProtocolSpec::cross_domain("P1", &["O", "M"], &["D", "H", "U"], None),
        ProtocolSpec::cross_domain("P2", &["O", "M", "C", "I"], &["D", "H", "U"], None),
        ProtocolSpec::cross_domain("P3", &["O", "M", "D"], &["O", "M", "C", "I"], Some("print")),
        ProtocolSpec::cross_domain(
            "P4",
            &["O", "M", "C", "I", "D", "H", "U"],
            &["O", "M", "C", "I"],
            Some("print"),
        ),
        ProtocolSpec::cross_domain("P5", &["O", "M", "D"], &["O", "M", "C", "I"], Some("replay")),
        ProtocolSpec::cross_domain(
            "P6",
            &["O", "M", "C", "I", "D", "H", "U"],
            &["O", "M", "C", "I"],
            Some("replay"),
        ),
    ];
    out.extend(leave_one_attack_out("A", &["WMCA"], &["SiW-Mv2"], &SIW_MV2_ATTACKS));
    out.extend(leave_one_attack_out("B", &["SiW-Mv2"], &["WMCA"], &WMCA_ATTACKS));
    out
}

/// Looks up a named protocol, falling back to [`ProtocolSpec::parse`].
pub fn resolve_protocol(name: &str) -> Result<ProtocolSpec> {
    if let Some(p) = standard_protocols().into_iter().find(|p| p.name == name) {
        return Ok(p);
    }
    if name == "default" {
        let mut p = ProtocolSpec::parse("source->target")?;
        p.name = "default".into();
        return Ok(p);
    }
    ProtocolSpec::parse(name)
}

/// Splits `store` into the one-class training set and the test set.
///
/// Train: real rows of the source domains in the train split. Test: target
/// rows in the test split, reals plus spoofs (only the held-out attack when
/// one is named).
pub fn build_protocol(
    store: &EmbeddingStore,
    spec: &ProtocolSpec,
) -> Result<(EmbeddingStore, EmbeddingStore)> {
    spec.validate()?;
    let known: BTreeSet<&str> = store.rows().iter().map(|r| r.meta.domain.as_str()).collect();
    for d in spec.source_domains.iter().chain(&spec.target_domains) {
        if !known.contains(d.as_str()) {
            return Err(Error::UnknownDomain(d.clone()));
        }
    }
    let in_target = |d: &str| spec.target_domains.iter().any(|t| t == d);
    if let Some(attack) = &spec.held_out_attack {
        let present = store.rows().iter().any(|r| {
            r.meta.label == Label::Spoof
                && in_target(&r.meta.domain)
                && r.meta.attack_type.as_deref() == Some(attack.as_str())
        });
        if !present {
            return Err(Error::UnknownAttack(attack.clone()));
        }
    }

    let train = store.filtered(|r| {
        r.meta.label == Label::Real
            && r.meta.split == Split::Train
            && spec.source_domains.contains(&r.meta.domain)
    });
    let test = store.filtered(|r| {
        if r.meta.split != Split::Test || !in_target(&r.meta.domain) {
            return false;
        }
        match (r.meta.label, &spec.held_out_attack) {
            (Label::Real, _) => true,
            (Label::Spoof, None) => true,
            (Label::Spoof, Some(a)) => r.meta.attack_type.as_deref() == Some(a.as_str()),
        }
    });
    for (split, s) in [("train", &train), ("test", &test)] {
        if s.is_empty() {
            return Err(Error::EmptySplit {
                protocol: spec.name.clone(),
                split,
            });
        }
    }
    Ok((train, test))
}

/// Scores every row of `test` against the learned prompts.
pub fn score_store(
    test: &EmbeddingStore,
    prompts: &PromptSet,
    bank: &PriorBank,
    encoder: &dyn FrozenTextEncoder,
    config: &TrainConfig,
) -> Result<Vec<ScoredSample>> {
    let e_r = prompts.encode_real(encoder)?;
    let e_s = prompts::overall_spoof_embedding(prompts, bank, encoder)?;
    let vectors = trainer::prepare_embeddings(test, config.normalize_embeddings)?;
    test.rows()
        .iter()
        .zip(vectors)
        .map(|(row, f)| {
            let log_odds = metrics::real_log_odds(&f, &e_r, &e_s, config.tau)?;
            Ok(ScoredSample {
                id: row.meta.id.clone(),
                p_real: Prob::new(vector::sigmoid(log_odds))?,
                log_odds,
                label: row.meta.label,
                attack_type: row.meta.attack_type.clone(),
            })
        })
        .collect()
}

/// Output of [`run_protocol`]: the report plus what produced it.
#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub report: EvalReport,
    pub fit: FitOutput,
    pub scores: Vec<ScoredSample>,
}

/// Log-odds threshold equivalent to `p_real ≥ 0.5`.
pub const FIXED_LOG_ODDS_THRESHOLD: f64 = 0.0;

/// Trains on the protocol's source reals and evaluates on its target set,
/// reporting both the fixed 0.5 and the EER threshold policies.
pub fn run_protocol(
    spec: &ProtocolSpec,
    config: &TrainConfig,
    store: &EmbeddingStore,
    bank: &PriorBank,
    encoder: &dyn FrozenTextEncoder,
    tokenizer: &Tokenizer,
) -> Result<ProtocolRun> {
    let (train, test) = build_protocol(store, spec)?;
    let fit = trainer::fit(config, &train, bank, encoder, tokenizer)?;
    let scores = score_store(&test, &fit.prompts, bank, encoder, config)?;

    let auc = metrics::auc(&scores)?;
    let fixed = metrics::eer_and_hter(&scores, ThresholdPolicy::Fixed(FIXED_LOG_ODDS_THRESHOLD))?;
    let eer = metrics::eer_and_hter(&scores, ThresholdPolicy::Eer)?;
    let policy = |name: &str, r: &metrics::EerResult| PolicyMetrics {
        policy: name.to_owned(),
        threshold_log_odds: r.threshold,
        apcer: r.rates.apcer,
        bpcer: r.rates.bpcer,
        acer: r.rates.acer,
        hter: r.hter,
    };
    let real = scores.iter().filter(|s| s.label == Label::Real).count();
    let report = EvalReport {
        protocol: spec.name.clone(),
        source_domains: spec.source_domains.clone(),
        target_domains: spec.target_domains.clone(),
        held_out_attack: spec.held_out_attack.clone(),
        mode: spec.mode,
        auc,
        eer: eer.eer,
        policies: vec![policy("fixed", &fixed), policy("eer", &eer)],
        counts: ClassCounts {
            train_real: train.len(),
            test_real: real,
            test_spoof: scores.len() - real,
        },
        seed: config.seed,
        config_hash: config.hash(),
    };
    Ok(ProtocolRun { report, fit, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{Record, RecordMeta};

    fn row(id: &str, label: Label, attack: Option<&str>, domain: &str, split: Split) -> Record {
        Record {
            vector: vec![1.0, 0.0],
            meta: RecordMeta {
                id: id.into(),
                label,
                attack_type: attack.map(str::to_owned),
                domain: domain.into(),
                split,
            },
        }
    }

    fn manifest() -> EmbeddingStore {
        let mut rows = vec![
            row("s-r0", Label::Real, None, "src", Split::Train),
            row("s-r1", Label::Real, None, "src", Split::Train),
            row("s-x0", Label::Spoof, Some("print"), "src", Split::Train),
            row("t-r0", Label::Real, None, "tgt", Split::Test),
        ];
        for a in ["print", "replay", "silicone"] {
            for k in 0..2 {
                rows.push(row(&format!("t-{a}{k}"), Label::Spoof, Some(a), "tgt", Split::Test));
            }
        }
        EmbeddingStore::from_records(2, rows).unwrap()
    }

    #[test]
    fn held_out_attack_filters_test_set() {
        let spec = ProtocolSpec::cross_domain("x", &["src"], &["tgt"], Some("silicone"));
        let (train, test) = build_protocol(&manifest(), &spec).unwrap();
        assert!(train.rows().iter().all(|r| r.meta.label == Label::Real));
        assert_eq!(train.len(), 2);
        let spoofs: Vec<_> = test.rows().iter().filter(|r| r.meta.label == Label::Spoof).collect();
        assert_eq!(spoofs.len(), 2);
        assert!(spoofs.iter().all(|r| r.meta.attack_type.as_deref() == Some("silicone")));
        assert_eq!(test.len(), 3);
    }

    #[test]
    fn all_attacks_when_none_held_out() {
        let spec = ProtocolSpec::cross_domain("x", &["src"], &["tgt"], None);
        let (_, test) = build_protocol(&manifest(), &spec).unwrap();
        assert_eq!(test.len(), 7);
    }

    #[test]
    fn name_errors() {
        let m = manifest();
        let bad_domain = ProtocolSpec::cross_domain("x", &["nope"], &["tgt"], None);
        assert!(matches!(build_protocol(&m, &bad_domain), Err(Error::UnknownDomain(d)) if d == "nope"));
        let bad_attack = ProtocolSpec::cross_domain("x", &["src"], &["tgt"], Some("mask"));
        assert!(matches!(build_protocol(&m, &bad_attack), Err(Error::UnknownAttack(_))));
    }

    #[test]
    fn empty_split_is_an_error() {
        // Target domain used as source: it has no train-split reals.
        let spec = ProtocolSpec::cross_domain("x", &["tgt"], &["tgt"], None);
        assert!(matches!(
            build_protocol(&manifest(), &spec),
            Err(Error::EmptySplit { split: "train", .. })
        ));
    }

    #[test]
    fn parse_protocol_strings() {
        let p = ProtocolSpec::parse("O+M->D+H+U").unwrap();
        assert_eq!(p.source_domains, ["O", "M"]);
        assert_eq!(p.target_domains, ["D", "H", "U"]);
        assert_eq!(p.held_out_attack, None);
        assert_eq!(p.mode, ProtocolMode::CrossDomain);
        let p = ProtocolSpec::parse("WMCA->SiW-Mv2@silicone_mask").unwrap();
        assert_eq!(p.held_out_attack.as_deref(), Some("silicone_mask"));
        assert_eq!(ProtocolSpec::parse("a->a").unwrap().mode, ProtocolMode::IntraDomain);
        assert!(ProtocolSpec::parse("nothing").is_err());
        assert!(ProtocolSpec::parse("a->").is_err());
        assert!(ProtocolSpec::parse("a->b@").is_err());
    }

    #[test]
    fn standard_catalog() {
        let all = standard_protocols();
        assert_eq!(all.len(), 27);
        let a4 = resolve_protocol("A4").unwrap();
        assert_eq!(a4.held_out_attack.as_deref(), Some("silicone_mask"));
        assert_eq!(a4.source_domains, ["WMCA"]);
        let b7 = resolve_protocol("B7").unwrap();
        assert_eq!(b7.held_out_attack.as_deref(), Some("print"));
        assert_eq!(resolve_protocol("default").unwrap().source_domains, ["source"]);
        let names: BTreeSet<_> = all.iter().map(|p| p.name.clone()).collect();
        assert_eq!(names.len(), 27);
    }
}
