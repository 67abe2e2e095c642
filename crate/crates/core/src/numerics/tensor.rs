use rand::Rng;

use super::NumericsError;

/// Dense row-major array of `f64` with an optional gradient slot.
///
/// Rank-1 tensors are treated as a single row and rank-0 as `1×1` wherever a
/// matrix view is needed.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(NumericsError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {expected} values, got {}", values.len()),
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
            grad: None,
            requires_grad: false,
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::Shape {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Xavier/Glorot uniform initialisation for a `fan_in × fan_out` matrix.
    pub fn xavier_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            shape: vec![fan_in, fan_out],
            values,
            grad: None,
            requires_grad: true,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(rows, cols)` matrix view of the tensor.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            more => (more[..more.len() - 1].iter().product(), more[more.len() - 1]),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Resets the gradient slot to zeros (allocating it if absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
            None => self.grad = Some(vec![0.0; self.values.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient slot.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<(), NumericsError> {
        if delta.len() != self.values.len() {
            return Err(NumericsError::Shape {
                op: "accumulate_grad",
                detail: format!("gradient length {} for {} values", delta.len(), self.values.len()),
            });
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
            && self.grad.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[target]`, computed through log-sum-exp.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<f64, NumericsError> {
    if target >= logits.len() {
        return Err(NumericsError::Index {
            index: target,
            len: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[target])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.dims(), (2, 3));
        assert_eq!(Tensor::vector(vec![1.0, 2.0]).dims(), (1, 2));
        assert_eq!(Tensor::scalar(1.0).dims(), (1, 1));
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let loss = softmax_cross_entropy(&[0.3; 5], 2).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert!((loss - 1.6094).abs() < 1e-4);
    }

    #[test]
    fn saturated_target_has_near_zero_loss() {
        let loss = softmax_cross_entropy(&[0.0, 1e3, 0.0], 1).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_by_hand() {
        // ln(e^1 + e^2 + e^3) - 1
        let by_hand = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 1.0;
        let loss = softmax_cross_entropy(&[1.0, 2.0, 3.0], 0).unwrap();
        assert!((loss - by_hand).abs() < 1e-10);
        assert!((by_hand - 2.407_605_964_444_38).abs() < 1e-10);
    }

    #[test]
    fn out_of_range_target_is_index_error() {
        assert!(matches!(
            softmax_cross_entropy(&[0.0, 0.0], 2),
            Err(NumericsError::Index { index: 2, len: 2 })
        ));
    }

    #[test]
    fn xavier_respects_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::xavier_uniform(30, 20, &mut rng);
        let bound = (6.0f64 / 50.0).sqrt();
        assert!(t.values().iter().all(|v| v.abs() <= bound));
        assert_eq!(t.shape(), &[30, 20]);
    }
}
