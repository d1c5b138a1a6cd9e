//! Learnable prompts, the frozen prior-description bank, and the prototypes
//! built from them.
//!
//! Every prompt is `L` learnable context vectors followed by the shared,
//! fixed tokens of the class name `"human face"`. The set holds one real
//! prompt and `N^u` unknown-spoof prompts; nothing else is trainable.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{FrozenTextEncoder, TokenSeq, Tokenizer};
use crate::error::{Error, Result};
use crate::store::{self, EmbeddingStore};
use crate::vector;

pub const CLASS_NAME: &str = "human face";
pub const INIT_STD: f64 = 0.02;

/// The 21 bundled prior spoof descriptions.
pub const DEFAULT_PRIOR_DESCRIPTIONS: [&str; 21] = [
    "a human face with paper surface texture",
    "a human face with plastic surface texture",
    "a human face with screens surface texture",
    "a human face with glossiness or lack of skin-like reflectance properties",
    "a human face with lack of natural facial movements, such as blinking or subtle micro-expression",
    "a human face with misalignment or unnatural motion when the spoof medium is manipulated (e.g., hand-held photos or masks)",
    "a human face with absence of natural depth information, as seen in flat surfaces like printed photos or screens",
    "a human face with distorted or unnatural depth in 3D masks or molded faces",
    "a human face with abnormal color distribution, such as oversaturation or uneven illumination",
    "a human face with differences in skin tone and shading compared to live faces under similar conditions",
    "a human face with reflection and shadow inconsistencies",
    "a human face with unnatural reflections caused by glossy materials like screens or masks",
    "a human face with shadows that do not align with expected lighting conditions",
    "a human face with visible edges or seams around the spoofing medium, such as cutouts or mask borders",
    "a human face with blurred or jagged transitions at boundaries, especially in digital forgeries",
    "a human face with low-quality reproduction",
    "a human face with pixelation, moiré patterns, or resolution mismatches in screen-based spoofs",
    "a human face with artifacts from printing or photo degradation in paper-based attacks",
    "a human face printed on paper, leading to loss of depth and texture fidelity",
    "a human face with screens or displays, resulting in moiré patterns, pixelation, or unnatural luminance",
    "a human face with 3D Masks: real faces are replicated using materials like silicone or plastic, which may introduce unnatural textures or geometric distortions",
];

/// How the unknown-prompt prototype is formed before it enters the
/// contrastive and guidance terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeMode {
    /// Average the context vectors, then encode the averaged prompt.
    #[default]
    PromptSpace,
    /// Encode every prompt, then average the embeddings.
    EmbeddingSpace,
}

impl std::str::FromStr for PrototypeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompt-space" => Ok(PrototypeMode::PromptSpace),
            "embedding-space" => Ok(PrototypeMode::EmbeddingSpace),
            other => Err(Error::Config(format!("unknown prototype mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for PrototypeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PrototypeMode::PromptSpace => "prompt-space",
            PrototypeMode::EmbeddingSpace => "embedding-space",
        })
    }
}

/// `L` learnable context vectors, row-major `L × d_tok`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    context: Vec<f64>,
}

impl Prompt {
    pub fn new(context: Vec<f64>) -> Self {
        Prompt { context }
    }

    pub fn context(&self) -> &[f64] {
        &self.context
    }

    pub fn context_mut(&mut self) -> &mut [f64] {
        &mut self.context
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    context_len: usize,
    d_tok: usize,
    real: Prompt,
    unknown: Vec<Prompt>,
    class_tokens: TokenSeq,
}

impl PromptSet {
    /// Assembles a set from explicit parts, validating shapes.
    pub fn from_parts(
        context_len: usize,
        real: Prompt,
        unknown: Vec<Prompt>,
        class_tokens: TokenSeq,
    ) -> Result<Self> {
        if context_len == 0 {
            return Err(Error::InvalidParameter("context length must be ≥ 1".into()));
        }
        if unknown.is_empty() {
            return Err(Error::Empty("unknown prompt set"));
        }
        let d_tok = class_tokens.token_dim();
        for p in std::iter::once(&real).chain(&unknown) {
            Error::check_dim(context_len * d_tok, p.context.len())?;
            if p.context.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("prompt context"));
            }
        }
        Ok(PromptSet {
            context_len,
            d_tok,
            real,
            unknown,
            class_tokens,
        })
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn token_dim(&self) -> usize {
        self.d_tok
    }

    pub fn num_unknown(&self) -> usize {
        self.unknown.len()
    }

    pub fn real(&self) -> &Prompt {
        &self.real
    }

    pub fn unknown(&self) -> &[Prompt] {
        &self.unknown
    }

    pub fn class_tokens(&self) -> &TokenSeq {
        &self.class_tokens
    }

    /// Number of learnable scalars: `(N^u + 1) · L · d_tok`.
    pub fn num_parameters(&self) -> usize {
        (self.unknown.len() + 1) * self.context_len * self.d_tok
    }

    /// Real prompt first, then each unknown prompt in order.
    pub fn prompts(&self) -> impl Iterator<Item = &Prompt> {
        std::iter::once(&self.real).chain(&self.unknown)
    }

    pub fn prompts_mut(&mut self) -> impl Iterator<Item = &mut Prompt> {
        std::iter::once(&mut self.real).chain(self.unknown.iter_mut())
    }

    /// Learnable parameters flattened in [`PromptSet::prompts`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.prompts().flat_map(|p| p.context.iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        Error::check_dim(self.num_parameters(), flat.len())?;
        let chunk = self.context_len * self.d_tok;
        for (p, src) in self.prompts_mut().zip(flat.chunks_exact(chunk)) {
            p.context.copy_from_slice(src);
        }
        Ok(())
    }

    /// Full token sequence `[v_1] … [v_L] [human] [face]` for a context.
    pub fn token_seq(&self, context: &[f64]) -> Result<TokenSeq> {
        TokenSeq::new(self.d_tok, context.to_vec())?.concat(&self.class_tokens)
    }

    pub fn encode_real(&self, enc: &dyn FrozenTextEncoder) -> Result<Vec<f64>> {
        enc.encode(&self.token_seq(&self.real.context)?)
    }

    pub fn encode_unknown(&self, enc: &dyn FrozenTextEncoder) -> Result<Vec<Vec<f64>>> {
        self.unknown
            .iter()
            .map(|p| enc.encode(&self.token_seq(&p.context)?))
            .collect()
    }

    /// Componentwise mean of the unknown context matrices.
    pub fn mean_unknown_context(&self) -> Vec<f64> {
        let contexts: Vec<&[f64]> = self.unknown.iter().map(|p| p.context.as_slice()).collect();
        vector::prototype(&contexts).expect("unknown set is nonempty with equal shapes")
    }
}

/// Draws every context vector i.i.d. from `N(0, 0.02²)`; class tokens come
/// from tokenizing `"human face"`.
pub fn init_prompt_set(
    context_len: usize,
    num_unknown: usize,
    seed: u64,
    tokenizer: &Tokenizer,
) -> Result<PromptSet> {
    if context_len == 0 || num_unknown == 0 {
        return Err(Error::InvalidParameter(format!(
            "need L ≥ 1 and N^u ≥ 1, got L={context_len}, N^u={num_unknown}"
        )));
    }
    let d_tok = tokenizer.d_tok;
    let class_tokens = tokenizer.tokenize(CLASS_NAME)?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || Prompt::new((0..context_len * d_tok).map(|_| normal.sample(&mut rng)).collect());
    let real = draw();
    let unknown = (0..num_unknown).map(|_| draw()).collect();
    PromptSet::from_parts(context_len, real, unknown, class_tokens)
}

/// Prototype of the unknown prompts in embedding space.
pub fn unknown_prototype(
    set: &PromptSet,
    enc: &dyn FrozenTextEncoder,
    mode: PrototypeMode,
) -> Result<Vec<f64>> {
    match mode {
        PrototypeMode::PromptSpace => enc.encode(&set.token_seq(&set.mean_unknown_context())?),
        PrototypeMode::EmbeddingSpace => vector::prototype(&set.encode_unknown(enc)?),
    }
}

/// Prior descriptions and their frozen embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBank {
    descriptions: Vec<String>,
    embeddings: Vec<Vec<f64>>,
}

impl PriorBank {
    pub fn encode(
        descriptions: &[impl AsRef<str>],
        tokenizer: &Tokenizer,
        enc: &dyn FrozenTextEncoder,
    ) -> Result<Self> {
        if descriptions.is_empty() {
            return Err(Error::Empty("prior descriptions"));
        }
        let embeddings = descriptions
            .iter()
            .map(|d| enc.encode(&tokenizer.tokenize(d.as_ref())?))
            .collect::<Result<Vec<_>>>()?;
        Ok(PriorBank {
            descriptions: descriptions.iter().map(|d| d.as_ref().to_owned()).collect(),
            embeddings,
        })
    }

    pub fn default_bank(tokenizer: &Tokenizer, enc: &dyn FrozenTextEncoder) -> Result<Self> {
        Self::encode(&DEFAULT_PRIOR_DESCRIPTIONS, tokenizer, enc)
    }

    /// Uses precomputed embeddings, e.g. produced by an external text encoder.
    pub fn from_embeddings(descriptions: Vec<String>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::Empty("prior embeddings"));
        }
        if descriptions.len() != embeddings.len() {
            return Err(Error::DimensionMismatch {
                expected: embeddings.len(),
                found: descriptions.len(),
            });
        }
        let dim = embeddings[0].len();
        for e in &embeddings {
            Error::check_dim(dim, e.len())?;
        }
        Ok(PriorBank {
            descriptions,
            embeddings,
        })
    }

    /// Loads a bank from an embedding file; descriptions are the row ids.
    pub fn from_store(store: &EmbeddingStore) -> Result<Self> {
        let descriptions = store.rows().iter().map(|r| r.meta.id.clone()).collect();
        Self::from_embeddings(descriptions, store.vectors_f64())
    }

    pub fn descriptions(&self) -> &[String] {
        &self.descriptions
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }
}

/// Mean of the frozen description embeddings.
pub fn prior_prototype(bank: &PriorBank) -> Result<Vec<f64>> {
    vector::prototype(&bank.embeddings)
}

/// Unweighted mean over the unknown embeddings and the prior embeddings.
pub fn spoof_prototype(unknown_embeddings: &[Vec<f64>], bank: &PriorBank) -> Result<Vec<f64>> {
    if unknown_embeddings.is_empty() {
        return Err(Error::Empty("unknown embeddings"));
    }
    let all: Vec<&[f64]> = unknown_embeddings
        .iter()
        .chain(&bank.embeddings)
        .map(Vec::as_slice)
        .collect();
    vector::prototype(&all)
}

/// The overall spoof embedding used for scoring.
pub fn overall_spoof_embedding(
    set: &PromptSet,
    bank: &PriorBank,
    enc: &dyn FrozenTextEncoder,
) -> Result<Vec<f64>> {
    spoof_prototype(&set.encode_unknown(enc)?, bank)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptMeta {
    role: String,
    class_name: String,
}

fn role_name(i: usize) -> String {
    if i == 0 {
        "real".to_owned()
    } else {
        format!("unknown_{}", i - 1)
    }
}

/// Writes the prompt checkpoint: one row per prompt holding its flattened
/// `L × d_tok` context, with `L` stored after the header.
pub fn write_prompts(set: &PromptSet, path: &Path) -> Result<()> {
    let count = set.num_unknown() + 1;
    let bytes = store::encode_container(
        set.context_len * set.d_tok,
        count,
        Some(set.context_len as u32),
        set.flatten().into_iter().map(|x| x as f32),
    );
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let metas: Vec<PromptMeta> = (0..count)
        .map(|i| PromptMeta {
            role: role_name(i),
            class_name: CLASS_NAME.to_owned(),
        })
        .collect();
    store::write_jsonl(&store::meta_path(path), &metas)
}

/// Reads a prompt checkpoint; class tokens are re-derived with `tokenizer`.
pub fn read_prompts(path: &Path, tokenizer: &Tokenizer) -> Result<PromptSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, extra, values) = store::decode_container(&bytes, true)?;
    let context_len = extra.expect("requested extra field") as usize;
    let metas: Vec<PromptMeta> = store::read_jsonl(&store::meta_path(path))?;
    if metas.len() as u64 != header.count {
        return Err(Error::Metadata(format!(
            "header declares {} prompts, sidecar has {}",
            header.count,
            metas.len()
        )));
    }
    if header.count < 2 {
        return Err(Error::Metadata("checkpoint needs a real and ≥1 unknown prompt".into()));
    }
    for (i, m) in metas.iter().enumerate() {
        if m.role != role_name(i) {
            return Err(Error::Metadata(format!(
                "row {i} has role {:?}, expected {:?}",
                m.role,
                role_name(i)
            )));
        }
        if m.class_name != metas[0].class_name {
            return Err(Error::Metadata("class names differ across prompts".into()));
        }
    }
    let dim = header.dim as usize;
    if context_len == 0 || !dim.is_multiple_of(context_len) || dim / context_len != tokenizer.d_tok {
        return Err(Error::Metadata(format!(
            "row width {dim} does not split into L={context_len} tokens of dim {}",
            tokenizer.d_tok
        )));
    }
    let mut prompts = values
        .chunks_exact(dim)
        .map(|c| Prompt::new(c.iter().map(|&x| f64::from(x)).collect()));
    let real = prompts.next().expect("count ≥ 2");
    let unknown = prompts.collect();
    let class_tokens = tokenizer.tokenize(&metas[0].class_name)?;
    PromptSet::from_parts(context_len, real, unknown, class_tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ToyTextEncoder;

    fn setup() -> (Tokenizer, ToyTextEncoder) {
        (Tokenizer::new(1, 32), ToyTextEncoder::with_default_dims(2))
    }

    #[test]
    fn init_shapes_and_determinism() {
        let (tok, _) = setup();
        let set = init_prompt_set(4, 12, 9, &tok).unwrap();
        assert_eq!(set.num_unknown(), 12);
        assert_eq!(set.real().context().len(), 4 * 32);
        assert!(set.unknown().iter().all(|p| p.context().len() == 4 * 32));
        assert_eq!(set.num_parameters(), 13 * 4 * 32);
        assert_eq!(set.class_tokens().len(), 2);
        let again = init_prompt_set(4, 12, 9, &tok).unwrap();
        let bytes = |s: &PromptSet| -> Vec<u8> {
            s.flatten().iter().flat_map(|x| x.to_le_bytes()).collect()
        };
        assert_eq!(bytes(&set), bytes(&again));
        assert_ne!(set.flatten(), init_prompt_set(4, 12, 10, &tok).unwrap().flatten());
    }

    #[test]
    fn init_rejects_bad_sizes() {
        let (tok, _) = setup();
        assert!(init_prompt_set(0, 12, 0, &tok).is_err());
        assert!(init_prompt_set(4, 0, 0, &tok).is_err());
    }

    #[test]
    fn init_std_matches() {
        let tok = Tokenizer::new(1, 64);
        // 101 prompts × 16 × 64 ≈ 1.03e5 entries.
        let set = init_prompt_set(16, 100, 3, &tok).unwrap();
        let flat = set.flatten();
        let n = flat.len() as f64;
        assert!(n >= 1e5);
        let mean = flat.iter().sum::<f64>() / n;
        let var = flat.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 0.02).abs() < 0.002, "std = {}", var.sqrt());
    }

    #[test]
    fn singleton_prototype_modes_agree() {
        let (tok, enc) = setup();
        let set = init_prompt_set(3, 1, 4, &tok).unwrap();
        let a = unknown_prototype(&set, &enc, PrototypeMode::PromptSpace).unwrap();
        let b = unknown_prototype(&set, &enc, PrototypeMode::EmbeddingSpace).unwrap();
        let direct = enc.encode(&set.token_seq(set.unknown()[0].context()).unwrap()).unwrap();
        assert_eq!(a, direct);
        assert_eq!(b, direct);
    }

    #[test]
    fn opposite_contexts_give_class_only_encoding() {
        let (tok, enc) = setup();
        let base = init_prompt_set(2, 1, 5, &tok).unwrap();
        let ctx = base.unknown()[0].context().to_vec();
        let neg: Vec<f64> = ctx.iter().map(|x| -x).collect();
        let set = PromptSet::from_parts(
            2,
            base.real().clone(),
            vec![Prompt::new(ctx), Prompt::new(neg)],
            base.class_tokens().clone(),
        )
        .unwrap();
        let proto = unknown_prototype(&set, &enc, PrototypeMode::PromptSpace).unwrap();
        let zeros = vec![0.0; 2 * 32];
        let expected = enc.encode(&set.token_seq(&zeros).unwrap()).unwrap();
        for (a, b) in proto.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_space_mean_of_orthogonal_units() {
        let m = vector::prototype(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert!((vector::norm(&m) - 2f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn prior_bank_defaults() {
        let (tok, enc) = setup();
        let bank = PriorBank::default_bank(&tok, &enc).unwrap();
        assert_eq!(bank.len(), 21);
        let a = prior_prototype(&bank).unwrap();
        let b = prior_prototype(&PriorBank::default_bank(&tok, &enc).unwrap()).unwrap();
        assert_eq!(a, b);
        for e in bank.embeddings() {
            assert!((vector::norm(e) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_prototype_edge_cases() {
        let single = PriorBank::from_embeddings(vec!["x".into()], vec![vec![0.6, 0.8]]).unwrap();
        assert_eq!(prior_prototype(&single).unwrap(), vec![0.6, 0.8]);
        let opposite = PriorBank::from_embeddings(
            vec!["x".into(), "y".into()],
            vec![vec![0.6, 0.8], vec![-0.6, -0.8]],
        )
        .unwrap();
        assert_eq!(prior_prototype(&opposite).unwrap(), vec![0.0, 0.0]);
        assert!(PriorBank::from_embeddings(vec![], vec![]).is_err());
    }

    #[test]
    fn spoof_prototype_weights() {
        let bank = PriorBank::from_embeddings(vec!["p".into()], vec![vec![0.0, 1.0]]).unwrap();
        assert_eq!(
            spoof_prototype(&[vec![1.0, 0.0]], &bank).unwrap(),
            vec![0.5, 0.5]
        );
        let v = vec![0.3, -0.4];
        let same = PriorBank::from_embeddings(vec!["p".into(); 3], vec![v.clone(); 3]).unwrap();
        assert_eq!(spoof_prototype(&[v.clone(), v.clone()], &same).unwrap(), v);

        // 12 unknown + 21 prior: a unit bump in one member moves the mean by 1/33.
        let bank21 = PriorBank::from_embeddings(vec!["p".into(); 21], vec![vec![0.0]; 21]).unwrap();
        let mut unknown = vec![vec![0.0]; 12];
        unknown[5][0] = 1.0;
        let proto = spoof_prototype(&unknown, &bank21).unwrap();
        assert!((proto[0] - 1.0 / 33.0).abs() < 1e-15);
    }

    #[test]
    fn overall_spoof_is_sensitive_to_each_unknown() {
        let (tok, enc) = setup();
        let set = init_prompt_set(2, 4, 6, &tok).unwrap();
        let bank = PriorBank::default_bank(&tok, &enc).unwrap();
        let base = overall_spoof_embedding(&set, &bank, &enc).unwrap();
        for i in 0..4 {
            let mut flat = set.flatten();
            let offset = (i + 1) * 2 * 32;
            flat[offset] += 1e-3;
            let mut moved = set.clone();
            moved.assign_flat(&flat).unwrap();
            let changed = overall_spoof_embedding(&moved, &bank, &enc).unwrap();
            assert!(vector::l2_distance(&base, &changed).unwrap() > 0.0);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (tok, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts.fase");
        let set = init_prompt_set(4, 3, 1, &tok).unwrap();
        write_prompts(&set, &path).unwrap();
        let back = read_prompts(&path, &tok).unwrap();
        assert_eq!(back.context_len(), 4);
        assert_eq!(back.num_unknown(), 3);
        assert_eq!(back.class_tokens(), set.class_tokens());
        for (a, b) in back.flatten().iter().zip(set.flatten()) {
            assert_eq!(*a, b as f32 as f64);
        }
        let sidecar = fs::read_to_string(store::meta_path(&path)).unwrap();
        let roles: Vec<String> = sidecar
            .lines()
            .map(|l| serde_json::from_str::<PromptMeta>(l).unwrap().role)
            .collect();
        assert_eq!(roles, ["real", "unknown_0", "unknown_1", "unknown_2"]);
        // The prompt container is not a plain embedding file.
        assert!(store::read_embeddings(&path).is_err());
    }
}
