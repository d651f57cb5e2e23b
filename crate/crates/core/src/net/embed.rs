//! Sinusoidal embedding of the virtual flow time `t in [0, 1]`.

use crate::error::{Error, Result};

/// Interleaved `[sin(f_0 t), cos(f_0 t), sin(f_1 t), cos(f_1 t), ...]` over a
/// geometric frequency ladder running from 1 up to `max_freq`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding {
    dim: usize,
    frequencies: Vec<f64>,
}

impl TimeEmbedding {
    pub fn new(dim: usize, max_freq: f64) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "time embedding dim must be positive and even, got {dim}"
            )));
        }
        if !(max_freq >= 1.0 && max_freq.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "time embedding max frequency must be >= 1, got {max_freq}"
            )));
        }
        let half = dim / 2;
        let frequencies = (0..half)
            .map(|i| {
                if half == 1 {
                    1.0
                } else {
                    max_freq.powf(i as f64 / (half - 1) as f64)
                }
            })
            .collect();
        Ok(Self { dim, frequencies })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn embed(&self, t: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        for &f in &self.frequencies {
            let (s, c) = (f * t).sin_cos();
            out.push(s);
            out.push(c);
        }
        out
    }
}

/// One-shot embedding with the default ladder (1 to 1e4).
pub fn embed_time(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t must lie in [0, 1], got {t}")));
    }
    Ok(TimeEmbedding::new(dim, 1e4)?.embed(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_time_gives_unit_cosines() {
        assert_eq!(embed_time(0.0, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        let e = embed_time(0.0, 16).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
    }

    #[test]
    fn two_frequency_ladder_matches_direct_trig() {
        let e = embed_time(0.5, 4).unwrap();
        let expected = [0.5f64.sin(), 0.5f64.cos(), 5000f64.sin(), 5000f64.cos()];
        for (a, b) in e.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(embed_time(0.3, 5).is_err());
        assert!(TimeEmbedding::new(0, 1e4).is_err());
    }

    #[test]
    fn out_of_range_time_rejected() {
        assert!(embed_time(1.5, 4).is_err());
        assert!(embed_time(-0.1, 4).is_err());
    }

    #[test]
    fn entries_bounded() {
        let emb = TimeEmbedding::new(32, 1e4).unwrap();
        for i in 0..=100 {
            let e = emb.embed(i as f64 / 100.0);
            assert_eq!(e.len(), 32);
            assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
