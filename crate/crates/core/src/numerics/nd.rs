//! Dense row-major f64 arrays. Plain values with no tape attached; the
//! carrier type for parameters, datasets and anything computed outside a
//! gradient context.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct NdArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NdArray {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        NdArray { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        NdArray { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} does not match data length {}", shape, data.len());
        NdArray { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: f64) -> Self {
        NdArray { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// View as a matrix: leading extent times everything else.
    pub fn as_2d(&self) -> (usize, usize) {
        assert!(!self.shape.is_empty(), "as_2d on rank-0 array");
        let r = self.shape[0];
        let c = if r == 0 { 0 } else { self.data.len() / r };
        (r, c)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "reshape {:?} -> {:?} changes element count", self.shape, shape);
        self.shape = shape.to_vec();
        self
    }

    /// Stacks equal-shaped arrays along a new leading axis.
    pub fn stack(parts: &[&NdArray]) -> Self {
        assert!(!parts.is_empty(), "stack of zero arrays");
        let shape = &parts[0].shape;
        let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
        for p in parts {
            assert_eq!(&p.shape, shape, "stack mixes shapes {:?} and {:?}", shape, p.shape);
            data.extend_from_slice(&p.data);
        }
        let mut full = vec![parts.len()];
        full.extend_from_slice(shape);
        NdArray { shape: full, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        NdArray { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn max_abs_diff(&self, other: &NdArray) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes {:?} vs {:?}", self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

impl fmt::Debug for NdArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<f64> = self.data.iter().take(6).copied().collect();
        write!(f, "NdArray{:?} {:?}{}", self.shape, head, if self.data.len() > 6 { ".." } else { "" })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_reshape() {
        let a = NdArray::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.as_2d(), (2, 3));
        let b = a.clone().reshape(&[3, 2]);
        assert_eq!(b.shape, vec![3, 2]);
        assert_eq!(b.data, a.data);
    }

    #[test]
    #[should_panic(expected = "changes element count")]
    fn bad_reshape_panics() {
        NdArray::zeros(&[2, 2]).reshape(&[3]);
    }
}
