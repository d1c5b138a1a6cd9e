//! Dense vector primitives: similarity, distance, normalization, prototypes
//! and temperature softmax.
//!
//! Everything here works on `&[f64]` and accumulates left to right in double
//! precision, so results are bit-reproducible for a given input order.

use crate::error::{Error, Result};

/// A probability in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Prob(f64);

impl Prob {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Prob(value))
        } else {
            Err(Error::InvalidParameter(format!(
                "probability {value} outside [0, 1]"
            )))
        }
    }

    /// Clamps into `[0, 1]`; only for values that are probabilities up to rounding.
    pub(crate) fn saturating(value: f64) -> Self {
        Prob(value.clamp(0.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    Error::check_dim(a.len(), b.len())?;
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm(v: &[f64]) -> f64 {
    dot_unchecked(v, v).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    Error::check_dim(a.len(), b.len())?;
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot_unchecked(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Euclidean distance between `a` and `b`.
pub fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Error::check_dim(a.len(), b.len())?;
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc.sqrt())
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::ZeroNorm);
    }
    if !n.is_finite() {
        return Err(Error::NonFinite("normalize"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Componentwise mean of a nonempty set of equal-length vectors. The result
/// is not re-normalized.
///
/// Uses a running mean, so the mean of identical vectors is exact.
pub fn prototype<V: AsRef<[f64]>>(vs: &[V]) -> Result<Vec<f64>> {
    let first = vs.first().ok_or(Error::Empty("prototype input"))?.as_ref();
    let dim = first.len();
    let mut acc = first.to_vec();
    for (i, v) in vs.iter().enumerate().skip(1) {
        let v = v.as_ref();
        Error::check_dim(dim, v.len())?;
        let k = (i + 1) as f64;
        for (a, x) in acc.iter_mut().zip(v) {
            *a += (x - *a) / k;
        }
    }
    Ok(acc)
}

/// Temperature softmax over similarities, computed with a max shift.
pub fn softmax_probs(sims: &[f64], tau: f64) -> Result<Vec<Prob>> {
    check_tau(tau)?;
    if sims.is_empty() {
        return Err(Error::Empty("similarities"));
    }
    let max = sims
        .iter()
        .map(|s| s / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| (s / tau - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| Prob::saturating(e / total)).collect())
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// `ln(1 + e^x)` without overflow or catastrophic underflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, evaluated on the branch that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient of `cos(a, b)` with respect to `b`, accumulated into `out` scaled by `scale`.
pub(crate) fn add_cosine_grad_wrt(a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return;
    }
    let cos = dot_unchecked(a, b) / (na * nb);
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o += scale * (x / na - cos * y / nb) / nb;
    }
}

/// Gradient of `‖a − b‖` with respect to `a`, accumulated into `out` scaled by
/// `scale`. Zero at `a == b`.
pub(crate) fn add_distance_grad_wrt(a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
    let d = l2_distance(a, b).unwrap_or(0.0);
    if d == 0.0 {
        return;
    }
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o += scale * (x - y) / d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let u = normalize(&[0.3, -0.2, 0.9]).unwrap();
        assert!(close(cosine_similarity(&u, &u).unwrap(), 1.0, 1e-15));
        assert!(close(cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.8, 1e-15));
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn cosine_is_clamped() {
        let a = [1e-3, 1e-3, 1e-3];
        let c = cosine_similarity(&a, &a).unwrap();
        assert!(c <= 1.0);
    }

    #[test]
    fn distance_examples() {
        let v = [0.4, -1.0, 2.5];
        assert_eq!(l2_distance(&v, &v).unwrap(), 0.0);
        assert_eq!(l2_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(close(
            l2_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            std::f64::consts::SQRT_2,
            1e-7
        ));
        assert!(l2_distance(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let n = normalize(&[3.0, 4.0]).unwrap();
        assert!(close(n[0], 0.6, 1e-15) && close(n[1], 0.8, 1e-15));
        let again = normalize(&n).unwrap();
        assert!(close(norm(&again), 1.0, 1e-12));
        assert!(matches!(normalize(&[0.0, 0.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn prototype_examples() {
        let v = vec![0.25, -1.5];
        assert_eq!(prototype(std::slice::from_ref(&v)).unwrap(), v);
        assert_eq!(
            prototype(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0.5, 0.5]
        );
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_eq!(prototype(&[v.clone(), neg]).unwrap(), vec![0.0, 0.0]);
        assert!(prototype::<Vec<f64>>(&[]).is_err());
        assert!(prototype(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn prototype_of_copies_is_exact() {
        let v = vec![0.1, 0.7, -0.3333];
        let copies = vec![v.clone(); 7];
        assert_eq!(prototype(&copies).unwrap(), v);
    }

    #[test]
    fn softmax_examples() {
        for p in softmax_probs(&[2.0, 2.0, 2.0], 0.37).unwrap() {
            assert!(close(p.value(), 1.0 / 3.0, 1e-15));
        }
        let p = softmax_probs(&[1.0, -1.0], 1.0).unwrap();
        assert!(close(p[0].value(), 0.880_797_1, 1e-7));
        assert!(close(p[1].value(), 0.119_202_9, 1e-7));

        let p = softmax_probs(&[0.9, 0.1], 0.01).unwrap();
        assert!(close(p[0].value(), 1.0, 1e-15));
        assert!(close(p[1].value() / (-80.0f64).exp(), 1.0, 1e-9));

        let p = softmax_probs(&[1e2, -1e2], 0.01).unwrap();
        assert!(p.iter().all(|x| x.value().is_finite()));
        assert!(softmax_probs(&[1.0], 0.0).is_err());
        assert!(softmax_probs(&[1.0], -1.0).is_err());
        assert!(softmax_probs(&[], 1.0).is_err());
    }

    #[test]
    fn softplus_matches_reference() {
        assert!(close(softplus(0.0), std::f64::consts::LN_2, 1e-15));
        assert!(close(softplus(-1.0), 0.313_261_687_518_222_9, 1e-15));
        assert!(close(softplus(800.0), 800.0, 1e-12));
        let tiny = softplus(-80.0);
        assert!(tiny > 0.0 && close(tiny / (-80.0f64).exp(), 1.0, 1e-12));
    }
}
