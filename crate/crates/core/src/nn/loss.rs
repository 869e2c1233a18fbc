use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Lower bound applied to probabilities inside `ln`.
pub const PROB_FLOOR: f64 = 1e-12;

/// A categorical distribution: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("probability vector is empty".into()));
        }
        if values.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Argument("probabilities must be finite and nonnegative".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::Argument(format!("probabilities sum to {sum}")));
        }
        Ok(Self(values))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument("probability vector is empty".into()));
        }
        Ok(Self(vec![1.0 / n as f64; n]))
    }

    pub fn one_hot(n: usize, class: usize) -> Result<Self> {
        if class >= n {
            return Err(Error::Argument(format!("class {class} out of range 0..{n}")));
        }
        let mut v = vec![0.0; n];
        v[class] = 1.0;
        Ok(Self(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest entry; the smallest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// First index of the maximum value.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax of non-finite logits".into()));
    }
    let mut v = logits.to_vec();
    super::ops::softmax_in_place(&mut v);
    Ok(ProbVector(v))
}

/// `-Σ t_j ln max(h_j, floor)` for a one-hot target `t`.
pub fn cross_entropy(pred: &ProbVector, one_hot: &[f64]) -> Result<f64> {
    let class = one_hot_class(one_hot)?;
    if one_hot.len() != pred.len() {
        return Err(Error::Argument(format!(
            "label has {} classes, prediction has {}",
            one_hot.len(),
            pred.len()
        )));
    }
    Ok(class_cross_entropy(pred.as_slice(), class))
}

pub(crate) fn one_hot_class(one_hot: &[f64]) -> Result<usize> {
    let ones: Vec<usize> = one_hot
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1.0)
        .map(|(i, _)| i)
        .collect();
    let zeros = one_hot.iter().filter(|&&v| v == 0.0).count();
    if ones.len() != 1 || zeros + 1 != one_hot.len() {
        return Err(Error::Argument("label is not one-hot".into()));
    }
    Ok(ones[0])
}

pub(crate) fn class_cross_entropy(probs: &[f64], class: usize) -> f64 {
    -probs[class].max(PROB_FLOOR).ln()
}

/// Gradient of the cross-entropy with respect to the probability vector.
pub(crate) fn cross_entropy_grad<T: Real>(probs: &[T], class: usize) -> Vec<T> {
    let mut g = vec![T::zero(); probs.len()];
    let h = probs[class];
    if h.as_f64() >= PROB_FLOOR {
        g[class] = -T::one() / h;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0; 4]).unwrap();
        assert_eq!(p.as_slice(), &[0.25; 4]);

        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p.as_slice()[0] - 1.0).abs() < 1e-12 && p.as_slice()[1] < 1e-300);

        let direct: Vec<f64> = {
            let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in p.as_slice().iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-9);
        }
        assert!(matches!(softmax(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let onehot = [1.0, 0.0, 0.0];
        let perfect = ProbVector::one_hot(3, 0).unwrap();
        assert_eq!(cross_entropy(&perfect, &onehot).unwrap(), 0.0);

        for c in [2usize, 5, 200] {
            let mut t = vec![0.0; c];
            t[c - 1] = 1.0;
            let l = cross_entropy(&ProbVector::uniform(c).unwrap(), &t).unwrap();
            assert!((l - (c as f64).ln()).abs() < 1e-9);
        }

        let p = ProbVector::new(vec![0.5, 0.25, 0.25]).unwrap();
        let l = cross_entropy(&p, &onehot).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);

        // wrong class with zero probability hits the floor rather than infinity
        let l = cross_entropy(&perfect, &[0.0, 1.0, 0.0]).unwrap();
        assert!((l - (-(PROB_FLOOR).ln())).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let p = ProbVector::uniform(3).unwrap();
        for bad in [vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.5, 0.5, 0.0]] {
            assert!(matches!(cross_entropy(&p, &bad), Err(Error::Argument(_))));
        }
        assert!(cross_entropy(&p, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.4]).is_err());
        assert!(ProbVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
        assert_eq!(ProbVector::new(vec![0.3, 0.3, 0.4]).unwrap().argmax(), 2);
        assert_eq!(ProbVector::uniform(4).unwrap().argmax(), 0);
    }
}
