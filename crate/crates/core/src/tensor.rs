use std::sync::Arc;

use crate::error::{Error, Result};

/// Reference to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape_id: u64,
    pub index: usize,
}

/// Dense row-major tensor of f64 values.
///
/// The data buffer is shared (`Arc`), so clones are cheap and the tape can
/// retain forward values without copying. A tensor is "tracked" when it
/// carries a node reference onto a tape; untracked tensors behave as plain
/// constants and flow through the same operations without being recorded.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    pub(crate) node: Option<NodeRef>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} elements but {} values were given",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<NodeRef>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            node,
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![], vec![value]).unwrap()
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), vec![value; n]).unwrap()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn buffer(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    /// Value of a scalar (rank-0 or single-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar);
        }
        Ok(self.data[0])
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn set_tracking(&mut self, node: NodeRef, requires_grad: bool) {
        self.node = Some(node);
        self.requires_grad = requires_grad;
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Copy of this tensor with no tape affiliation. Shares the data buffer.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
        }
    }

    /// Replace the contents in place. Used by the optimizer between steps,
    /// when no tape holds a reference to the buffer anymore.
    pub fn set_data(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "set_data with {} values on a tensor of {} elements",
                values.len(),
                self.data.len()
            )));
        }
        self.data = Arc::new(values);
        self.node = None;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::from_vec(vec![2, 3], vec![0.0; 5]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn scalar_item() {
        let t = Tensor::scalar(4.25);
        assert_eq!(t.item().unwrap(), 4.25);
        let v = Tensor::zeros(&[3]);
        assert!(matches!(v.item(), Err(Error::NotScalar)));
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[5]), vec![1]);
        assert!(strides_of(&[]).is_empty());
    }
}
