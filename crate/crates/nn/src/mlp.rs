use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::tape::{Tape, Var};
use crate::{NnError, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Layer widths and per-layer activations of a fully connected network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    /// `[input, hidden.., output]`.
    pub sizes: Vec<usize>,
    /// One entry per layer (`sizes.len() - 1`).
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    /// Tanh on every hidden layer, `output` activation on the last.
    pub fn new(input: usize, hidden: &[usize], output: usize, out_act: Activation) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut activations = vec![Activation::Tanh; hidden.len()];
        activations.push(out_act);
        Self { sizes, activations }
    }

    pub fn layers(&self) -> usize {
        self.activations.len()
    }

    pub fn input(&self) -> usize {
        self.sizes[0]
    }

    pub fn output(&self) -> usize {
        *self.sizes.last().expect("non-empty spec")
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.sizes.len() < 2 || self.sizes.len() != self.activations.len() + 1 {
            return Err(NnError::Config(format!(
                "{} sizes for {} activations",
                self.sizes.len(),
                self.activations.len()
            )));
        }
        if self.sizes.contains(&0) {
            return Err(NnError::Config("zero-width layer".into()));
        }
        Ok(())
    }
}

/// Weights and biases of a multilayer perceptron.
///
/// Tensors are stored flat as `[w0, b0, w1, b1, ..]` with `w: [out × in]` and
/// `b: [1 × out]` so optimizers and checkpoints can treat every network alike.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    spec: MlpSpec,
    tensors: Vec<Array2<T>>,
}

/// An [`Mlp`] whose parameters have been placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub vars: Vec<Var>,
    activations: Vec<Activation>,
}

impl<T: Scalar> Mlp<T> {
    pub fn zeros(spec: MlpSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let tensors = (0..spec.layers())
            .flat_map(|l| {
                let (i, o) = (spec.sizes[l], spec.sizes[l + 1]);
                [Array2::zeros((o, i)), Array2::zeros((1, o))]
            })
            .collect();
        Ok(Self { spec, tensors })
    }

    /// Orthogonal initialisation: `hidden_gain` on hidden layers and
    /// `output_gain` on the last layer; biases start at zero.
    pub fn orthogonal<R: Rng + ?Sized>(
        spec: MlpSpec,
        hidden_gain: f64,
        output_gain: f64,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let mut mlp = Self::zeros(spec)?;
        let layers = mlp.spec.layers();
        for l in 0..layers {
            let gain = if l + 1 == layers { output_gain } else { hidden_gain };
            let (o, i) = mlp.tensors[2 * l].dim();
            mlp.tensors[2 * l] = orthogonal_matrix(o, i, gain, rng);
        }
        Ok(mlp)
    }

    pub fn from_tensors(spec: MlpSpec, tensors: Vec<Array2<T>>) -> Result<Self, NnError> {
        let template = Self::zeros(spec)?;
        if template.tensors.len() != tensors.len()
            || template.tensors.iter().zip(&tensors).any(|(a, b)| a.dim() != b.dim())
        {
            return Err(NnError::Config("tensor shapes do not match layer spec".into()));
        }
        Ok(Self {
            spec: template.spec,
            tensors,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[Array2<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<T>] {
        &mut self.tensors
    }

    pub fn weight(&self, layer: usize) -> &Array2<T> {
        &self.tensors[2 * layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Array2<T> {
        &mut self.tensors[2 * layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Array2<T> {
        &mut self.tensors[2 * layer + 1]
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Batched forward pass, `[B × in] → [B × out]`.
    pub fn forward(&self, input: &Array2<T>) -> Result<Array2<T>, NnError> {
        if input.ncols() != self.spec.input() {
            return Err(NnError::Dimension {
                expected: self.spec.input(),
                got: input.ncols(),
            });
        }
        let mut h = input.to_owned();
        for (l, act) in self.spec.activations.iter().enumerate() {
            let mut next = h.dot(&self.tensors[2 * l].t());
            next += &self.tensors[2 * l + 1];
            if *act != Activation::Identity {
                next.mapv_inplace(|v| act.apply(v));
            }
            h = next;
        }
        Ok(h)
    }

    /// Single-sample forward pass.
    pub fn forward_one(&self, input: &[T]) -> Result<Vec<T>, NnError> {
        if input.len() != self.spec.input() {
            return Err(NnError::Dimension {
                expected: self.spec.input(),
                got: input.len(),
            });
        }
        let mut h = Array1::from_vec(input.to_vec());
        for (l, act) in self.spec.activations.iter().enumerate() {
            let w = &self.tensors[2 * l];
            let b = self.tensors[2 * l + 1].index_axis(Axis(0), 0);
            let mut next = w.dot(&h);
            next += &b;
            if *act != Activation::Identity {
                next.mapv_inplace(|v| act.apply(v));
            }
            h = next;
        }
        Ok(h.to_vec())
    }

    /// Records the parameters on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundMlp {
        BoundMlp {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
            activations: self.spec.activations.clone(),
        }
    }

    /// Binds `tensors` (shaped like this network's) as trainable leaves, e.g.
    /// perturbed copies during gradient checks.
    pub fn bind_with(&self, tape: &mut Tape<T>, tensors: &[Array2<T>]) -> BoundMlp {
        assert_eq!(tensors.len(), self.tensors.len(), "tensor count mismatch");
        BoundMlp {
            vars: tensors.iter().map(|t| tape.param(t.clone())).collect(),
            activations: self.spec.activations.clone(),
        }
    }

    /// Records the parameters as constants (no gradient flows into them).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundMlp {
        BoundMlp {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
            activations: self.spec.activations.clone(),
        }
    }
}

impl BoundMlp {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, input: Var) -> Var {
        let mut h = input;
        for (l, act) in self.activations.iter().enumerate() {
            let lin = tape.matmul_t(h, self.vars[2 * l]);
            let pre = tape.add_row(lin, self.vars[2 * l + 1]);
            h = match act {
                Activation::Tanh => tape.tanh(pre),
                Activation::Identity => pre,
            };
        }
        h
    }
}

/// `rows × cols` matrix with orthonormal rows (or columns, whichever is
/// fewer) scaled by `gain`, built by Gram-Schmidt on a Gaussian draw.
pub fn orthogonal_matrix<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<T> {
    let transpose = rows < cols;
    let (n, k) = if transpose { (cols, rows) } else { (rows, cols) };
    // k orthonormal vectors of length n.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let v = if transpose { basis[r][c] } else { basis[c][r] };
        T::c(gain * v)
    })
}
