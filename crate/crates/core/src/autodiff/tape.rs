use crate::error::{NkfError, Result};

/// Dense row-major array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NkfError::DimensionMismatch { expected: n, actual: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.cols().max(1)
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reverse rule of a recorded operation.
///
/// `grads[k]` is a zeroed buffer shaped like input `k` when `needs[k]` is
/// set and empty otherwise; implementations accumulate into it.
pub trait Backward {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs: &[bool],
        grads: &mut [Vec<f64>],
    );
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Append-only record of a computation. Nodes are created in topological
/// order, so the reverse pass is a single backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), op: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, inputs: &[Var], op: Box<dyn Backward>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            op: if requires_grad { Some(op) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a single-element output. Adjoint buffers are
    /// fresh for every call.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(NkfError::DimensionMismatch { expected: 1, actual: out.value.len() });
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adjoints[output.0] = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            let Some(grad) = adjoints[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
                let mut grads: Vec<Vec<f64>> = inputs
                    .iter()
                    .zip(&needs)
                    .map(|(t, &n)| if n { vec![0.0; t.len()] } else { Vec::new() })
                    .collect();
                op.backward(&inputs, &node.value, &grad, &needs, &mut grads);
                for ((&i, g), &n) in node.inputs.iter().zip(grads).zip(&needs) {
                    if !n {
                        continue;
                    }
                    match &mut adjoints[i] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            adjoints[id] = Some(grad);
        }
        Ok(Gradients { adjoints })
    }
}

/// Adjoints from one reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, or `None` when `v` does
    /// not influence it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.adjoints.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but zero-filled for unreached nodes.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }
}
