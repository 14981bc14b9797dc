use crate::Scalar;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("probabilities contain a non-finite value")]
    NonFinite,
    #[error("probabilities contain a negative value")]
    Negative,
    #[error("probabilities sum to {0}, expected 1 within 1e-6")]
    BadSum(f64),
    #[error("all probabilities are zero")]
    AllZero,
}

/// Draws an index from a categorical distribution and returns it with the
/// log-probability of the drawn entry.
pub fn sample_categorical<T: Scalar, R: Rng>(
    probs: &[T],
    rng: &mut R,
) -> Result<(usize, T), SampleError> {
    let mut sum = 0.0f64;
    for &p in probs {
        let p = p.as_f64();
        if !p.is_finite() {
            return Err(SampleError::NonFinite);
        }
        if p < 0.0 {
            return Err(SampleError::Negative);
        }
        sum += p;
    }
    if sum == 0.0 {
        return Err(SampleError::AllZero);
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(SampleError::BadSum(sum));
    }

    let u: f64 = rng.random::<f64>() * sum;
    let mut cum = 0.0;
    let mut chosen = None;
    for (i, &p) in probs.iter().enumerate() {
        cum += p.as_f64();
        if u < cum {
            chosen = Some(i);
            break;
        }
    }
    // Float accumulation can leave u >= cum at the end; fall back to the last
    // entry with positive mass.
    let idx = chosen.unwrap_or_else(|| {
        probs
            .iter()
            .rposition(|&p| p.as_f64() > 0.0)
            .expect("positive mass checked above")
    });
    Ok((idx, probs[idx].ln()))
}
