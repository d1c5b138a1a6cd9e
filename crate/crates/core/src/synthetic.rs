//! Seeded Gaussian-cluster benchmarks with covariate shift (a per-domain
//! mean offset) and semantic shift (attack clusters absent from the source).

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{FrozenTextEncoder, TokenSeq, Tokenizer};
use crate::error::{Error, Result};
use crate::prompts::CLASS_NAME;
use crate::trainer::TrainConfig;
use crate::store::{EmbeddingStore, Label, Record, RecordMeta, Split};
use crate::vector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cluster {
    /// Pre-normalization mean.
    pub mean: Vec<f64>,
    /// Isotropic per-coordinate standard deviation.
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackCluster {
    pub attack_type: String,
    pub mean: Vec<f64>,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub split: Split,
    pub real_cluster: Cluster,
    #[serde(default)]
    pub attack_clusters: Vec<AttackCluster>,
    /// Added to every sample of the domain before normalization.
    pub covariate_offset: Vec<f64>,
    pub seed: u64,
}

impl DomainSpec {
    pub fn dim(&self) -> usize {
        self.real_cluster.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::ZeroDim);
        }
        let check = |what: &str, mean: &[f64], std: f64, count: usize| -> Result<()> {
            Error::check_dim(d, mean.len())?;
            if !(std > 0.0 && std.is_finite()) {
                return Err(Error::InvalidParameter(format!("{what}: std must be > 0, got {std}")));
            }
            if count == 0 {
                return Err(Error::InvalidParameter(format!("{what}: count must be ≥ 1")));
            }
            if mean.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("cluster mean"));
            }
            Ok(())
        };
        let r = &self.real_cluster;
        check(&format!("{}/real", self.name), &r.mean, r.std, r.count)?;
        for a in &self.attack_clusters {
            check(&format!("{}/{}", self.name, a.attack_type), &a.mean, a.std, a.count)?;
        }
        Error::check_dim(d, self.covariate_offset.len())?;
        if self.covariate_offset.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("covariate offset"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub domains: Vec<DomainSpec>,
}

impl BenchmarkSpec {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("benchmark spec serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn generate(&self) -> Result<EmbeddingStore> {
        let first = self.domains.first().ok_or(Error::Empty("benchmark domains"))?;
        let mut store = EmbeddingStore::new(first.dim())?;
        for d in &self.domains {
            store.extend(generate(d)?)?;
        }
        Ok(store)
    }
}

/// Samples every cluster of `spec`, adds the domain offset and normalizes.
///
/// Cluster `k` (0 = reals, then attacks in order) draws from its own
/// ChaCha stream `k`, so clusters are independent of each other's counts.
pub fn generate(spec: &DomainSpec) -> Result<EmbeddingStore> {
    spec.validate()?;
    let dim = spec.dim();
    let mut store = EmbeddingStore::new(dim)?;
    let r = &spec.real_cluster;
    let clusters = std::iter::once((Label::Real, None, &r.mean, r.std, r.count)).chain(
        spec.attack_clusters
            .iter()
            .map(|a| (Label::Spoof, Some(a.attack_type.as_str()), &a.mean, a.std, a.count)),
    );
    for (k, (label, attack, mean, std, count)) in clusters.enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(k as u64);
        let tag = attack.unwrap_or("real");
        for i in 0..count {
            let raw: Vec<f64> = (0..dim)
                .map(|j| {
                    let z: f64 = rng.sample(StandardNormal);
                    mean[j] + std * z + spec.covariate_offset[j]
                })
                .collect();
            let unit = vector::normalize(&raw)?;
            store.push(Record {
                vector: unit.iter().map(|&x| x as f32).collect(),
                meta: RecordMeta {
                    id: format!("{}-{tag}-{i:05}", spec.name),
                    label,
                    attack_type: attack.map(str::to_owned),
                    domain: spec.name.clone(),
                    split: spec.split,
                },
            })?;
        }
    }
    Ok(store)
}

/// Knobs of the default two-domain benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkParams {
    pub dim: usize,
    pub source_reals: usize,
    pub target_reals: usize,
    pub attack_types: Vec<String>,
    pub attack_count: usize,
    pub std: f64,
    /// Angle between the real mean and each attack mean, in degrees.
    pub attack_angle_deg: f64,
    /// Covariate offset per coordinate, in units of `std`.
    pub offset_scale: f64,
    /// Unit direction of the real cluster mean; random when `None`.
    pub real_direction: Option<Vec<f64>>,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        BenchmarkParams {
            dim: crate::encoder::DEFAULT_D_EMB,
            source_reals: 2000,
            target_reals: 500,
            attack_types: ["print", "replay", "mask"].map(String::from).to_vec(),
            attack_count: 300,
            std: 0.045,
            attack_angle_deg: 80.0,
            offset_scale: 0.5,
            real_direction: None,
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = vector::normalize(&v) {
            return u;
        }
    }
}

/// Unit vector at `angle` radians from unit `from`, in a random direction.
fn rotate_away(rng: &mut ChaCha8Rng, from: &[f64], angle: f64) -> Vec<f64> {
    loop {
        let mut v = random_unit(rng, from.len());
        let along = vector::dot_unchecked(&v, from);
        v.iter_mut().zip(from).for_each(|(x, f)| *x -= along * f);
        if let Ok(perp) = vector::normalize(&v) {
            return from
                .iter()
                .zip(&perp)
                .map(|(f, p)| angle.cos() * f + angle.sin() * p)
                .collect();
        }
    }
}

/// A direction the text encoder can produce: the encoding of a random
/// word-scale context followed by the class name.
///
/// The toy encoder's outputs cover only a low-dimensional manifold of the
/// sphere. Real image embeddings of a vision-language model sit near what
/// its text side can express, so the default benchmark centres its real
/// cluster here.
pub fn text_reachable_direction(
    encoder: &dyn FrozenTextEncoder,
    tokenizer: &Tokenizer,
    context_len: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let d_tok = encoder.token_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let scale = 1.0 / (d_tok as f64).sqrt();
    let context: Vec<f64> = (0..context_len * d_tok)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let seq = TokenSeq::new(d_tok, context)?.concat(&tokenizer.tokenize(CLASS_NAME)?)?;
    encoder.encode(&seq)
}

/// Source domain `"source"` (train-split reals only) and target domain
/// `"target"` (test-split reals plus one cluster per attack type), all drawn
/// from `seed`.
pub fn default_benchmark(params: &BenchmarkParams, seed: u64) -> Result<BenchmarkSpec> {
    if params.dim == 0 {
        return Err(Error::ZeroDim);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let real_mean = match &params.real_direction {
        Some(d) => {
            Error::check_dim(params.dim, d.len())?;
            vector::normalize(d)?
        }
        None => random_unit(&mut rng, params.dim),
    };
    let angle = params.attack_angle_deg.to_radians();
    let attack_clusters = params
        .attack_types
        .iter()
        .map(|a| AttackCluster {
            attack_type: a.clone(),
            mean: rotate_away(&mut rng, &real_mean, angle),
            std: params.std,
            count: params.attack_count,
        })
        .collect();
    let offset: Vec<f64> = (0..params.dim)
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * params.offset_scale * params.std
        })
        .collect();
    let source = DomainSpec {
        name: "source".into(),
        split: Split::Train,
        real_cluster: Cluster {
            mean: real_mean.clone(),
            std: params.std,
            count: params.source_reals,
        },
        attack_clusters: Vec::new(),
        covariate_offset: vec![0.0; params.dim],
        seed: rng.next_u64(),
    };
    let target = DomainSpec {
        name: "target".into(),
        split: Split::Test,
        real_cluster: Cluster {
            mean: real_mean,
            std: params.std,
            count: params.target_reals,
        },
        attack_clusters,
        covariate_offset: offset,
        seed: rng.next_u64(),
    };
    Ok(BenchmarkSpec {
        domains: vec![source, target],
    })
}

/// The default benchmark with its real cluster centred on a direction the
/// configured text encoder can reach.
pub fn standard_benchmark(config: &TrainConfig, seed: u64) -> Result<BenchmarkSpec> {
    let encoder = config.encoder()?;
    let anchor = text_reachable_direction(&encoder, &config.tokenizer(), config.context_len, seed)?;
    let params = BenchmarkParams {
        dim: config.d_emb,
        real_direction: Some(anchor),
        ..BenchmarkParams::default()
    };
    default_benchmark(&params, seed)
}
