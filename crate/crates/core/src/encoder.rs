//! Frozen text encoders and the hash tokenizer that feeds them.
//!
//! [`ToyTextEncoder`] is a small deterministic network
//! (weighted pooling → affine → tanh → affine → L2 normalize) with a
//! hand-written vector-Jacobian product, so prompt vectors can be optimized
//! through it while its own weights stay fixed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::vector;

/// An ordered sequence of token vectors sharing one dimension, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    d_tok: usize,
    data: Vec<f64>,
}

impl TokenSeq {
    pub fn new(d_tok: usize, data: Vec<f64>) -> Result<Self> {
        if d_tok == 0 {
            return Err(Error::ZeroDim);
        }
        if data.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if !data.len().is_multiple_of(d_tok) {
            return Err(Error::DimensionMismatch {
                expected: d_tok,
                found: data.len() % d_tok,
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("token sequence"));
        }
        Ok(TokenSeq { d_tok, data })
    }

    pub fn from_tokens<V: AsRef<[f64]>>(tokens: &[V]) -> Result<Self> {
        let d_tok = tokens.first().ok_or(Error::Empty("token sequence"))?.as_ref().len();
        let mut data = Vec::with_capacity(d_tok * tokens.len());
        for t in tokens {
            Error::check_dim(d_tok, t.as_ref().len())?;
            data.extend_from_slice(t.as_ref());
        }
        TokenSeq::new(d_tok, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.d_tok
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn token_dim(&self) -> usize {
        self.d_tok
    }

    pub fn token(&self, j: usize) -> &[f64] {
        &self.data[j * self.d_tok..(j + 1) * self.d_tok]
    }

    pub fn tokens(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d_tok)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Concatenates `self` followed by `tail`.
    pub fn concat(&self, tail: &TokenSeq) -> Result<TokenSeq> {
        Error::check_dim(self.d_tok, tail.d_tok)?;
        let mut data = self.data.clone();
        data.extend_from_slice(&tail.data);
        Ok(TokenSeq {
            d_tok: self.d_tok,
            data,
        })
    }
}

/// A text encoder whose weights never change. Prompt learning only needs the
/// forward map and its pullback.
pub trait FrozenTextEncoder: Send + Sync {
    fn token_dim(&self) -> usize;

    fn embed_dim(&self) -> usize;

    fn encode(&self, tokens: &TokenSeq) -> Result<Vec<f64>>;

    /// Gradient of `cotangent · encode(tokens)` with respect to every token.
    fn vjp(&self, tokens: &TokenSeq, cotangent: &[f64]) -> Result<Vec<Vec<f64>>>;
}

/// Maps words to fixed pseudo-random token vectors.
///
/// Text is lowercased, ASCII punctuation is removed, and each whitespace
/// separated word becomes one `N(0, 1/d_tok)` vector drawn from a PRNG seeded
/// by a 64-bit FNV-1a hash of `(vocab_seed, word)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    pub vocab_seed: u64,
    pub d_tok: usize,
}

impl Tokenizer {
    pub fn new(vocab_seed: u64, d_tok: usize) -> Self {
        Tokenizer { vocab_seed, d_tok }
    }

    pub fn words(text: &str) -> Vec<String> {
        let cleaned: String = text
            .to_lowercase()
            .chars()
            .filter(|c| !c.is_ascii_punctuation())
            .collect();
        cleaned.split_whitespace().map(str::to_owned).collect()
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        if self.d_tok == 0 {
            return Err(Error::ZeroDim);
        }
        let words = Self::words(text);
        if words.is_empty() {
            return Err(Error::Empty("text after normalization"));
        }
        let scale = 1.0 / (self.d_tok as f64).sqrt();
        let mut data = Vec::with_capacity(words.len() * self.d_tok);
        for word in &words {
            let mut rng = ChaCha8Rng::seed_from_u64(word_hash(self.vocab_seed, word));
            for _ in 0..self.d_tok {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(z * scale);
            }
        }
        TokenSeq::new(self.d_tok, data)
    }
}

fn word_hash(seed: u64, word: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes().iter().chain(word.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Default toy dimensions.
pub const DEFAULT_D_TOK: usize = 32;
pub const DEFAULT_D_HID: usize = 64;
pub const DEFAULT_D_EMB: usize = 64;

/// Two-layer frozen network used as the text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTextEncoder {
    d_tok: usize,
    d_hid: usize,
    d_emb: usize,
    /// `d_hid × d_tok`, row-major.
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// `d_emb × d_hid`, row-major.
    w2: Vec<f64>,
    b2: Vec<f64>,
    seed: u64,
    normalize_output: bool,
}

struct Forward {
    /// Positional pooling weights divided by their sum.
    pool: Vec<f64>,
    hidden: Vec<f64>,
    raw: Vec<f64>,
    raw_norm: f64,
    output: Vec<f64>,
}

impl ToyTextEncoder {
    pub fn new(d_tok: usize, d_hid: usize, d_emb: usize, seed: u64) -> Result<Self> {
        if d_tok == 0 || d_hid == 0 || d_emb == 0 {
            return Err(Error::ZeroDim);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |n: usize, fan_in: usize| -> Vec<f64> {
            let std = 1.0 / (fan_in as f64).sqrt();
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect()
        };
        let w1 = gaussian(d_hid * d_tok, d_tok);
        let b1 = gaussian(d_hid, d_tok);
        let w2 = gaussian(d_emb * d_hid, d_hid);
        let b2 = gaussian(d_emb, d_hid);
        Ok(ToyTextEncoder {
            d_tok,
            d_hid,
            d_emb,
            w1,
            b1,
            w2,
            b2,
            seed,
            normalize_output: true,
        })
    }

    pub fn with_default_dims(seed: u64) -> Self {
        Self::new(DEFAULT_D_TOK, DEFAULT_D_HID, DEFAULT_D_EMB, seed)
            .expect("default dims are nonzero")
    }

    /// Turns the final L2 normalization on or off.
    pub fn with_normalized_output(mut self, normalize: bool) -> Self {
        self.normalize_output = normalize;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hidden_dim(&self) -> usize {
        self.d_hid
    }

    pub fn normalizes_output(&self) -> bool {
        self.normalize_output
    }

    /// Pooling weights `w_j / Σw` with `w_j = 1 + j/n`.
    fn pool_weights(n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|j| 1.0 + j as f64 / n as f64).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }

    fn forward(&self, tokens: &TokenSeq) -> Result<Forward> {
        Error::check_dim(self.d_tok, tokens.token_dim())?;
        let pool = Self::pool_weights(tokens.len());
        let mut pooled = vec![0.0; self.d_tok];
        for (w, t) in pool.iter().zip(tokens.tokens()) {
            for (p, x) in pooled.iter_mut().zip(t) {
                *p += w * x;
            }
        }
        let hidden: Vec<f64> = self
            .w1
            .chunks_exact(self.d_tok)
            .zip(&self.b1)
            .map(|(row, b)| (vector::dot_unchecked(row, &pooled) + b).tanh())
            .collect();
        let raw: Vec<f64> = self
            .w2
            .chunks_exact(self.d_hid)
            .zip(&self.b2)
            .map(|(row, b)| vector::dot_unchecked(row, &hidden) + b)
            .collect();
        let raw_norm = vector::norm(&raw);
        let output = if self.normalize_output {
            if raw_norm == 0.0 {
                return Err(Error::ZeroNorm);
            }
            raw.iter().map(|x| x / raw_norm).collect()
        } else {
            raw.clone()
        };
        Ok(Forward {
            pool,
            hidden,
            raw,
            raw_norm,
            output,
        })
    }
}

impl FrozenTextEncoder for ToyTextEncoder {
    fn token_dim(&self) -> usize {
        self.d_tok
    }

    fn embed_dim(&self) -> usize {
        self.d_emb
    }

    fn encode(&self, tokens: &TokenSeq) -> Result<Vec<f64>> {
        Ok(self.forward(tokens)?.output)
    }

    fn vjp(&self, tokens: &TokenSeq, cotangent: &[f64]) -> Result<Vec<Vec<f64>>> {
        Error::check_dim(self.d_emb, cotangent.len())?;
        let fwd = self.forward(tokens)?;

        // Through e = z / ‖z‖: (I − e eᵀ) c / ‖z‖.
        let grad_raw: Vec<f64> = if self.normalize_output {
            let proj = vector::dot_unchecked(&fwd.output, cotangent);
            cotangent
                .iter()
                .zip(&fwd.output)
                .map(|(c, e)| (c - proj * e) / fwd.raw_norm)
                .collect()
        } else {
            debug_assert_eq!(fwd.raw.len(), cotangent.len());
            cotangent.to_vec()
        };

        // Through z = W2 h + b2 and h = tanh(a).
        let mut grad_pre = vec![0.0; self.d_hid];
        for (row, g) in self.w2.chunks_exact(self.d_hid).zip(&grad_raw) {
            for (acc, w) in grad_pre.iter_mut().zip(row) {
                *acc += w * g;
            }
        }
        for (g, h) in grad_pre.iter_mut().zip(&fwd.hidden) {
            *g *= 1.0 - h * h;
        }

        // Through a = W1 p + b1.
        let mut grad_pooled = vec![0.0; self.d_tok];
        for (row, g) in self.w1.chunks_exact(self.d_tok).zip(&grad_pre) {
            for (acc, w) in grad_pooled.iter_mut().zip(row) {
                *acc += w * g;
            }
        }

        Ok(fwd
            .pool
            .iter()
            .map(|w| grad_pooled.iter().map(|g| w * g).collect())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_seq(n: usize, d_tok: usize, seed: u64) -> TokenSeq {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d_tok)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * 0.5
            })
            .collect();
        TokenSeq::new(d_tok, data).unwrap()
    }

    #[test]
    fn tokenize_is_per_word_deterministic() {
        let tok = Tokenizer::new(7, 16);
        let seq = tok.tokenize("face face").unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.token(0), seq.token(1));
        assert_eq!(tok.tokenize("human face").unwrap().len(), 2);
        assert_eq!(
            tok.tokenize("Human, FACE!").unwrap(),
            tok.tokenize("human face").unwrap()
        );
    }

    #[test]
    fn tokenize_reproduces_bytes() {
        let tok = Tokenizer::new(11, DEFAULT_D_TOK);
        let bytes = |s: &TokenSeq| -> Vec<u8> {
            s.as_slice().iter().flat_map(|x| x.to_le_bytes()).collect()
        };
        let a = tok.tokenize("a human face with paper surface texture").unwrap();
        let b = tok.tokenize("a human face with paper surface texture").unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        let other = Tokenizer::new(12, DEFAULT_D_TOK).tokenize("paper").unwrap();
        assert_ne!(other.token(0), a.token(5));
    }

    #[test]
    fn tokenize_rejects_empty() {
        let tok = Tokenizer::new(0, 8);
        assert!(tok.tokenize("").is_err());
        assert!(tok.tokenize(" ,.;! ").is_err());
    }

    #[test]
    fn token_scale_is_one_over_sqrt_dim() {
        let tok = Tokenizer::new(3, 64);
        let text: Vec<String> = (0..400).map(|i| format!("w{i}")).collect();
        let seq = tok.tokenize(&text.join(" ")).unwrap();
        let n = seq.as_slice().len() as f64;
        let var = seq.as_slice().iter().map(|x| x * x).sum::<f64>() / n;
        assert!((var * 64.0 - 1.0).abs() < 0.05, "var*d = {}", var * 64.0);
    }

    #[test]
    fn encode_contract() {
        let enc = ToyTextEncoder::with_default_dims(5);
        let seq = random_seq(6, DEFAULT_D_TOK, 1);
        let e = enc.encode(&seq).unwrap();
        assert_eq!(e.len(), DEFAULT_D_EMB);
        assert!((vector::norm(&e) - 1.0).abs() < 1e-12);
        assert_eq!(e, enc.encode(&seq).unwrap());
        let wrong = random_seq(3, 8, 1);
        assert!(enc.encode(&wrong).is_err());
    }

    #[test]
    fn token_order_matters() {
        let enc = ToyTextEncoder::with_default_dims(5);
        let seq = random_seq(3, DEFAULT_D_TOK, 2);
        let swapped =
            TokenSeq::from_tokens(&[seq.token(1), seq.token(0), seq.token(2)]).unwrap();
        let a = enc.encode(&seq).unwrap();
        let b = enc.encode(&swapped).unwrap();
        let diff = vector::l2_distance(&a, &b).unwrap();
        assert!(diff > 1e-6, "diff = {diff}");
    }

    #[test]
    fn vjp_zero_cotangent() {
        let enc = ToyTextEncoder::with_default_dims(9);
        let seq = random_seq(4, DEFAULT_D_TOK, 3);
        let grads = enc.vjp(&seq, &vec![0.0; DEFAULT_D_EMB]).unwrap();
        assert_eq!(grads.len(), 4);
        assert!(grads.iter().flatten().all(|g| *g == 0.0));
        assert!(enc.vjp(&seq, &[1.0]).is_err());
    }

    #[test]
    fn vjp_scales_with_pool_weight() {
        let enc = ToyTextEncoder::with_default_dims(9);
        let seq = random_seq(5, DEFAULT_D_TOK, 4);
        let cot: Vec<f64> = (0..DEFAULT_D_EMB).map(|i| (i as f64).sin()).collect();
        let grads = enc.vjp(&seq, &cot).unwrap();
        // w_j = 1 + j/5, so token 4 vs token 0 has ratio 1.8.
        for (g4, g0) in grads[4].iter().zip(&grads[0]) {
            if g0.abs() > 1e-12 {
                assert!((g4 / g0 - 1.8).abs() < 1e-12);
            }
        }
    }

    fn fd_check(enc: &ToyTextEncoder, seq: &TokenSeq, cot: &[f64]) -> f64 {
        let h = 1e-5;
        let grads = enc.vjp(seq, cot).unwrap();
        let f = |s: &TokenSeq| vector::dot_unchecked(cot, &enc.encode(s).unwrap());
        let mut worst: f64 = 0.0;
        for idx in 0..seq.as_slice().len() {
            let mut plus = seq.as_slice().to_vec();
            let mut minus = plus.clone();
            plus[idx] += h;
            minus[idx] -= h;
            let num = (f(&TokenSeq::new(seq.token_dim(), plus).unwrap())
                - f(&TokenSeq::new(seq.token_dim(), minus).unwrap()))
                / (2.0 * h);
            let ana = grads[idx / seq.token_dim()][idx % seq.token_dim()];
            let denom = ana.abs().max(num.abs()).max(1e-6);
            worst = worst.max((ana - num).abs() / denom);
        }
        worst
    }

    #[test]
    fn vjp_matches_finite_differences() {
        for seed in 0..4 {
            let enc = ToyTextEncoder::with_default_dims(100 + seed);
            let seq = random_seq(3 + seed as usize, DEFAULT_D_TOK, seed);
            let cot: Vec<f64> = random_seq(1, DEFAULT_D_EMB, 50 + seed).as_slice().to_vec();
            let err = fd_check(&enc, &seq, &cot);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn vjp_unnormalized_matches_finite_differences() {
        let enc = ToyTextEncoder::with_default_dims(3).with_normalized_output(false);
        let seq = random_seq(4, DEFAULT_D_TOK, 8);
        let cot: Vec<f64> = random_seq(1, DEFAULT_D_EMB, 9).as_slice().to_vec();
        assert!(fd_check(&enc, &seq, &cot) < 1e-4);
    }
}
