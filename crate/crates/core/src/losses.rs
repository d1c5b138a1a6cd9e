//! The four prompt-learning terms, their weighted sum, and the analytic
//! gradient of that sum with respect to every context vector.
//!
//! Per-sample terms (`dc`, `con`) are averaged over the batch; `div` and `gui`
//! do not depend on samples and are added once per batch.

use serde::{Deserialize, Serialize};

use crate::encoder::{FrozenTextEncoder, TokenSeq};
use crate::error::{Error, Result};
use crate::prompts::{self, PriorBank, PromptSet, PrototypeMode};
use crate::vector::{self, add_cosine_grad_wrt, add_distance_grad_wrt};

/// Norm below which the prior prototype is treated as degenerate.
pub const DEGENERATE_PRIOR_NORM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// `[λ_dc, λ_con, λ_div, λ_gui]`.
    pub lambda: [f64; 4],
    /// Contrastive margin.
    pub eta: f64,
    /// Softmax temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: [0.5, 1.0, 1.0, 1.0],
            eta: 2.0,
            tau: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "loss weights must be finite and nonnegative, got {:?}",
                self.lambda
            )));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::InvalidParameter(format!("margin must be ≥ 0, got {}", self.eta)));
        }
        vector::check_tau(self.tau)
    }

    pub fn combine(&self, dc: f64, con: f64, div: f64, gui: f64) -> f64 {
        self.lambda[0] * dc + self.lambda[1] * con + self.lambda[2] * div + self.lambda[3] * gui
    }
}

/// Gradient norms of each unweighted term with respect to all context vectors.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TermGradNorms {
    pub dc: f64,
    pub con: f64,
    pub div: f64,
    pub gui: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dc: f64,
    pub con: f64,
    pub div: f64,
    pub gui: f64,
    pub total: f64,
    /// Only filled by [`loss_all_grad`].
    pub grad_norms: Option<TermGradNorms>,
}

/// Hinge on the distance gap between the real prompt and the unknown prototype.
pub fn loss_con(f_v: &[f64], e_r: &[f64], e_u: &[f64], eta: f64) -> Result<f64> {
    Error::check_dim(f_v.len(), e_r.len())?;
    Error::check_dim(f_v.len(), e_u.len())?;
    let gap = vector::l2_distance(f_v, e_r)? - vector::l2_distance(f_v, e_u)? + eta;
    Ok(gap.max(0.0))
}

/// Sum of cosine similarities over ordered pairs `i ≠ j`.
pub fn loss_div<V: AsRef<[f64]>>(embs: &[V]) -> Result<f64> {
    if embs.is_empty() {
        return Err(Error::Empty("unknown embeddings"));
    }
    let mut acc = 0.0;
    for (i, a) in embs.iter().enumerate() {
        for (j, b) in embs.iter().enumerate() {
            if i != j {
                acc += vector::cosine_similarity(a.as_ref(), b.as_ref())?;
            }
        }
    }
    Ok(acc)
}

/// Distance between the prior prototype and the unknown prototype.
pub fn loss_gui(p_prior: &[f64], p_unknown: &[f64]) -> Result<f64> {
    vector::l2_distance(p_prior, p_unknown)
}

/// `true` when the prior prototype is too close to zero to guide anything.
pub fn prior_is_degenerate(p_prior: &[f64]) -> bool {
    vector::norm(p_prior) < DEGENERATE_PRIOR_NORM
}

/// Two-way cross-entropy towards the real class, in log-domain.
pub fn loss_dc(f_v: &[f64], e_r: &[f64], e_s: &[f64], tau: f64) -> Result<f64> {
    vector::check_tau(tau)?;
    let s_r = vector::cosine_similarity(f_v, e_r)?;
    let s_s = vector::cosine_similarity(f_v, e_s)?;
    Ok(vector::softplus((s_s - s_r) / tau))
}

/// Everything the objective needs besides the prompts and the batch.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    pub encoder: &'a dyn FrozenTextEncoder,
    pub bank: &'a PriorBank,
    pub weights: LossWeights,
    pub mode: PrototypeMode,
}

struct Embedded {
    real_seq: TokenSeq,
    unknown_seqs: Vec<TokenSeq>,
    mean_seq: Option<TokenSeq>,
    e_r: Vec<f64>,
    e_unknown: Vec<Vec<f64>>,
    e_u: Vec<f64>,
    p_prior: Vec<f64>,
    e_s: Vec<f64>,
}

/// Cotangents of one loss term with respect to the intermediate embeddings.
struct TermCotangent {
    real: Vec<f64>,
    unknown: Vec<Vec<f64>>,
    proto: Vec<f64>,
    spoof: Vec<f64>,
}

impl TermCotangent {
    fn zeros(dim: usize, n: usize) -> Self {
        TermCotangent {
            real: vec![0.0; dim],
            unknown: vec![vec![0.0; dim]; n],
            proto: vec![0.0; dim],
            spoof: vec![0.0; dim],
        }
    }
}

fn is_zero(v: &[f64]) -> bool {
    v.iter().all(|x| *x == 0.0)
}

impl<'a> Objective<'a> {
    fn embed(&self, set: &PromptSet) -> Result<Embedded> {
        Error::check_dim(self.encoder.embed_dim(), self.bank.dim())?;
        let real_seq = set.token_seq(set.real().context())?;
        let unknown_seqs = set
            .unknown()
            .iter()
            .map(|p| set.token_seq(p.context()))
            .collect::<Result<Vec<_>>>()?;
        let e_r = self.encoder.encode(&real_seq)?;
        let e_unknown = unknown_seqs
            .iter()
            .map(|s| self.encoder.encode(s))
            .collect::<Result<Vec<_>>>()?;
        let (mean_seq, e_u) = match self.mode {
            PrototypeMode::PromptSpace => {
                let seq = set.token_seq(&set.mean_unknown_context())?;
                let e = self.encoder.encode(&seq)?;
                (Some(seq), e)
            }
            PrototypeMode::EmbeddingSpace => (None, vector::prototype(&e_unknown)?),
        };
        let p_prior = prompts::prior_prototype(self.bank)?;
        let e_s = prompts::spoof_prototype(&e_unknown, self.bank)?;
        Ok(Embedded {
            real_seq,
            unknown_seqs,
            mean_seq,
            e_r,
            e_unknown,
            e_u,
            p_prior,
            e_s,
        })
    }

    fn check_batch(&self, batch: &[Vec<f64>]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        for f in batch {
            Error::check_dim(self.encoder.embed_dim(), f.len())?;
        }
        self.weights.validate()
    }

    /// Loss values without gradients.
    pub fn value(&self, batch: &[Vec<f64>], set: &PromptSet) -> Result<LossBreakdown> {
        self.check_batch(batch)?;
        let emb = self.embed(set)?;
        let w = self.weights;
        let n = batch.len() as f64;
        let mut dc = 0.0;
        let mut con = 0.0;
        for f in batch {
            dc += loss_dc(f, &emb.e_r, &emb.e_s, w.tau)?;
            con += loss_con(f, &emb.e_r, &emb.e_u, w.eta)?;
        }
        dc /= n;
        con /= n;
        let div = loss_div(&emb.e_unknown)?;
        let gui = loss_gui(&emb.p_prior, &emb.e_u)?;
        Ok(LossBreakdown {
            dc,
            con,
            div,
            gui,
            total: w.combine(dc, con, div, gui),
            grad_norms: None,
        })
    }

    /// Loss values and the gradient of the weighted total with respect to
    /// every context vector, flattened in [`PromptSet::flatten`] order.
    pub fn value_and_grad(
        &self,
        batch: &[Vec<f64>],
        set: &PromptSet,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        self.check_batch(batch)?;
        let emb = self.embed(set)?;
        let w = self.weights;
        let dim = emb.e_r.len();
        let nu = emb.e_unknown.len();
        let n = batch.len() as f64;

        let mut cot_dc = TermCotangent::zeros(dim, nu);
        let mut cot_con = TermCotangent::zeros(dim, nu);
        let mut cot_div = TermCotangent::zeros(dim, nu);
        let mut cot_gui = TermCotangent::zeros(dim, nu);

        let mut dc = 0.0;
        let mut con = 0.0;
        for f in batch {
            let s_r = vector::cosine_similarity(f, &emb.e_r)?;
            let s_s = vector::cosine_similarity(f, &emb.e_s)?;
            let x = (s_r - s_s) / w.tau;
            dc += vector::softplus(-x);
            // d softplus(-x)/dx = -σ(-x)
            let g = vector::sigmoid(-x) / w.tau / n;
            add_cosine_grad_wrt(f, &emb.e_r, -g, &mut cot_dc.real);
            add_cosine_grad_wrt(f, &emb.e_s, g, &mut cot_dc.spoof);

            let gap = vector::l2_distance(f, &emb.e_r)? - vector::l2_distance(f, &emb.e_u)? + w.eta;
            if gap > 0.0 {
                con += gap;
                add_distance_grad_wrt(&emb.e_r, f, 1.0 / n, &mut cot_con.real);
                add_distance_grad_wrt(&emb.e_u, f, -1.0 / n, &mut cot_con.proto);
            }
        }
        dc /= n;
        con /= n;

        let div = loss_div(&emb.e_unknown)?;
        for (i, cot) in cot_div.unknown.iter_mut().enumerate() {
            for (j, other) in emb.e_unknown.iter().enumerate() {
                if i != j {
                    // Each unordered pair appears twice in the ordered sum.
                    add_cosine_grad_wrt(other, &emb.e_unknown[i], 2.0, cot);
                }
            }
        }

        let gui = loss_gui(&emb.p_prior, &emb.e_u)?;
        add_distance_grad_wrt(&emb.e_u, &emb.p_prior, 1.0, &mut cot_gui.proto);

        let g_dc = self.pull_back(set, &emb, cot_dc)?;
        let g_con = self.pull_back(set, &emb, cot_con)?;
        let g_div = self.pull_back(set, &emb, cot_div)?;
        let g_gui = self.pull_back(set, &emb, cot_gui)?;

        let grad: Vec<f64> = (0..g_dc.len())
            .map(|k| w.combine(g_dc[k], g_con[k], g_div[k], g_gui[k]))
            .collect();
        let breakdown = LossBreakdown {
            dc,
            con,
            div,
            gui,
            total: w.combine(dc, con, div, gui),
            grad_norms: Some(TermGradNorms {
                dc: vector::norm(&g_dc),
                con: vector::norm(&g_con),
                div: vector::norm(&g_div),
                gui: vector::norm(&g_gui),
            }),
        };
        Ok((breakdown, grad))
    }

    /// Pushes one term's embedding cotangents back to the context vectors.
    fn pull_back(&self, set: &PromptSet, emb: &Embedded, mut cot: TermCotangent) -> Result<Vec<f64>> {
        let nu = emb.e_unknown.len();
        let ctx_len = set.context_len() * set.token_dim();
        let mut grad = vec![0.0; set.num_parameters()];

        if !is_zero(&cot.spoof) {
            let members = (nu + self.bank.len()) as f64;
            for c in &mut cot.unknown {
                for (a, s) in c.iter_mut().zip(&cot.spoof) {
                    *a += s / members;
                }
            }
        }

        let mut mean_ctx_grad = None;
        if !is_zero(&cot.proto) {
            match (&emb.mean_seq, self.mode) {
                (Some(seq), PrototypeMode::PromptSpace) => {
                    let g = self.context_grad(seq, &cot.proto, ctx_len)?;
                    mean_ctx_grad = Some(g.into_iter().map(|x| x / nu as f64).collect::<Vec<_>>());
                }
                _ => {
                    for c in &mut cot.unknown {
                        for (a, p) in c.iter_mut().zip(&cot.proto) {
                            *a += p / nu as f64;
                        }
                    }
                }
            }
        }

        if !is_zero(&cot.real) {
            let g = self.context_grad(&emb.real_seq, &cot.real, ctx_len)?;
            grad[..ctx_len].copy_from_slice(&g);
        }
        for (i, (seq, c)) in emb.unknown_seqs.iter().zip(&cot.unknown).enumerate() {
            let slot = &mut grad[(i + 1) * ctx_len..(i + 2) * ctx_len];
            if !is_zero(c) {
                slot.copy_from_slice(&self.context_grad(seq, c, ctx_len)?);
            }
            if let Some(m) = &mean_ctx_grad {
                for (a, b) in slot.iter_mut().zip(m) {
                    *a += b;
                }
            }
        }
        Ok(grad)
    }

    /// VJP restricted to the leading context tokens (class tokens are frozen).
    fn context_grad(&self, seq: &TokenSeq, cot: &[f64], ctx_len: usize) -> Result<Vec<f64>> {
        let per_token = self.encoder.vjp(seq, cot)?;
        Ok(per_token.into_iter().flatten().take(ctx_len).collect())
    }
}

/// Weighted total and its components for a batch of image embeddings.
pub fn loss_all(
    batch: &[Vec<f64>],
    set: &PromptSet,
    bank: &PriorBank,
    weights: LossWeights,
    encoder: &dyn FrozenTextEncoder,
    mode: PrototypeMode,
) -> Result<LossBreakdown> {
    Objective {
        encoder,
        bank,
        weights,
        mode,
    }
    .value(batch, set)
}

/// [`loss_all`] plus the flattened gradient over all context vectors.
pub fn loss_all_grad(
    batch: &[Vec<f64>],
    set: &PromptSet,
    bank: &PriorBank,
    weights: LossWeights,
    encoder: &dyn FrozenTextEncoder,
    mode: PrototypeMode,
) -> Result<(LossBreakdown, Vec<f64>)> {
    Objective {
        encoder,
        bank,
        weights,
        mode,
    }
    .value_and_grad(batch, set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{ToyTextEncoder, Tokenizer};
    use crate::prompts::init_prompt_set;

    /// Unit vectors `f`, `a`, `b` in 3-D with ‖f−a‖ = da and ‖f−b‖ = db.
    fn at_distance(d: f64, plane_axis: usize) -> Vec<f64> {
        // For unit vectors, ‖f − x‖² = 2 − 2cos θ.
        let cos = 1.0 - d * d / 2.0;
        let sin = (1.0 - cos * cos).max(0.0).sqrt();
        let mut v = vec![cos, 0.0, 0.0];
        v[plane_axis] = sin;
        v
    }

    #[test]
    fn con_hinge_cases() {
        let f = vec![1.0, 0.0, 0.0];
        let r = at_distance(1.0, 1);
        let u = at_distance(1.0, 2);
        assert!((loss_con(&f, &r, &u, 2.0).unwrap() - 2.0).abs() < 1e-9);

        let r = at_distance(0.5, 1);
        let u = vec![-1.0, 0.0, 0.0];
        // d_real = 0.5, d_spoof = 2.0 → 0.5 − 2 + 1 = −0.5.
        assert_eq!(loss_con(&f, &r, &u, 1.0).unwrap(), 0.0);

        // Non-unit points work the same: d_real = 0.5, d_spoof = 3.0.
        let f2 = vec![0.0, 0.0];
        assert_eq!(loss_con(&f2, &[0.5, 0.0], &[0.0, 3.0], 2.0).unwrap(), 0.0);
        // Exact boundary: d_real − d_spoof = −η.
        assert_eq!(loss_con(&f2, &[1.0, 0.0], &[0.0, 3.0], 2.0).unwrap(), 0.0);
        assert!(loss_con(&f2, &[1.0], &[0.0, 3.0], 2.0).is_err());
    }

    #[test]
    fn div_cases() {
        let v = vec![0.6, 0.8];
        assert!((loss_div(&[v.clone(), v.clone()]).unwrap() - 2.0).abs() < 1e-12);
        let eye = [vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        assert_eq!(loss_div(&eye).unwrap(), 0.0);
        assert_eq!(loss_div(std::slice::from_ref(&v)).unwrap(), 0.0);
        assert!(loss_div(&[v, vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn gui_cases() {
        assert_eq!(loss_gui(&[0.2, 0.1], &[0.2, 0.1]).unwrap(), 0.0);
        assert_eq!(loss_gui(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        let t = [1.5, -2.0];
        let shifted = loss_gui(&[t[0], t[1]], &[3.0 + t[0], 4.0 + t[1]]).unwrap();
        assert!((shifted - 5.0).abs() < 1e-12);
        assert!(prior_is_degenerate(&[1e-8, 0.0]));
        assert!(!prior_is_degenerate(&[1e-3, 0.0]));
    }

    #[test]
    fn dc_cases() {
        let f = vec![1.0, 0.0];
        let a = vec![0.6, 0.8];
        let b = vec![0.6, -0.8];
        assert!((loss_dc(&f, &a, &b, 0.01).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(loss_dc(&f, &a, &b, 0.0).is_err());
    }

    #[test]
    fn weighted_sum() {
        let w = LossWeights::default();
        assert!((w.combine(0.6, 2.0, 1.0, 0.5) - 3.8).abs() < 1e-12);
        assert_eq!(w.combine(0.0, 0.0, 0.0, 0.0), 0.0);
        let only_dc = LossWeights {
            lambda: [0.5, 0.0, 0.0, 0.0],
            ..w
        };
        assert_eq!(only_dc.combine(0.7, 9.0, 9.0, 9.0), 0.35);
    }

    #[test]
    fn real_prompt_gets_no_div_or_gui_gradient() {
        let tok = Tokenizer::new(2, 16);
        let enc = ToyTextEncoder::new(16, 24, 20, 3).unwrap();
        let bank = PriorBank::default_bank(&tok, &enc).unwrap();
        let set = init_prompt_set(2, 3, 4, &tok).unwrap();
        let batch = vec![vector::normalize(&[0.3; 20]).unwrap()];
        let weights = LossWeights {
            lambda: [0.0, 0.0, 1.0, 1.0],
            ..LossWeights::default()
        };
        for mode in [PrototypeMode::PromptSpace, PrototypeMode::EmbeddingSpace] {
            let (_, grad) = loss_all_grad(&batch, &set, &bank, weights, &enc, mode).unwrap();
            let real_len = 2 * 16;
            assert!(grad[..real_len].iter().all(|g| *g == 0.0));
            assert!(grad[real_len..].iter().any(|g| *g != 0.0));
        }
    }
}
