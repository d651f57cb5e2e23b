/// Gradient arrays aligned one-to-one with a model's named parameter arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGrads {
    pub arrays: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(shapes: &[usize]) -> Self {
        Self {
            arrays: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.arrays {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, s: f64) {
        debug_assert_eq!(self.arrays.len(), other.arrays.len());
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().flatten().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.arrays.iter().flatten().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn global_norm(&self) -> f64 {
        self.arrays.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Append another gradient set (used to concatenate sub-networks).
    pub fn extend(&mut self, other: ParamGrads) {
        self.arrays.extend(other.arrays);
    }
}
