//! Dense layers and multilayer perceptrons with explicit forward traces and
//! reverse-mode gradients.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::PolicyError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Layer widths, hidden activations and named output slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// `[input, hidden..., output]`
    pub widths: Vec<usize>,
    /// One per hidden layer.
    pub activations: Vec<Activation>,
    pub heads: Vec<(String, usize)>,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], activation: Activation, heads: &[(&str, usize)]) -> Self {
        let output: usize = heads.iter().map(|(_, w)| w).sum();
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self {
            widths,
            activations: vec![activation; hidden.len()],
            heads: heads.iter().map(|(n, w)| (n.to_string(), *w)).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.widths.len() < 3 {
            return Err(PolicyError::Spec("an MLP needs at least one hidden layer".into()));
        }
        if self.activations.len() != self.widths.len() - 2 {
            return Err(PolicyError::Spec(format!(
                "{} activations for {} hidden layers",
                self.activations.len(),
                self.widths.len() - 2
            )));
        }
        if self.widths.iter().any(|w| *w == 0) {
            return Err(PolicyError::Spec("layer widths must be positive".into()));
        }
        let head_sum: usize = self.heads.iter().map(|(_, w)| w).sum();
        if head_sum != *self.widths.last().unwrap() {
            return Err(PolicyError::Spec(format!(
                "head widths sum to {head_sum}, output width is {}",
                self.widths.last().unwrap()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Offset and width of a named head.
    pub fn head(&self, name: &str) -> Option<(usize, usize)> {
        let mut off = 0;
        for (n, w) in &self.heads {
            if n == name {
                return Some((off, *w));
            }
            off += w;
        }
        None
    }
}

/// `y = W x + b` with `W` stored row-major as `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Rows (or columns, whichever are fewer) orthonormal, scaled by `gain`.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (count, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let mut w = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            w[r * cols + c] = gain * if rows <= cols { basis[r][c] } else { basis[c][r] };
        }
    }
    w
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    pub fn orthogonal<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, gain: f64, rng: &mut R) -> Self {
        Self { in_dim, out_dim, weight: orthogonal(out_dim, in_dim, gain, rng), bias: vec![0.0; out_dim] }
    }

    pub fn forward_into(&self, x: &[f64], y: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim);
        y.clear();
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            y.push(acc);
        }
    }

    /// Accumulates parameter gradients into `grad` and, when requested,
    /// returns `Wᵀ g`.
    pub fn backward(&self, x: &[f64], g: &[f64], grad: Option<&mut Dense>, want_input: bool) -> Option<Vec<f64>> {
        if let Some(grad) = grad {
            for o in 0..self.out_dim {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                grad.bias[o] += go;
                let row = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
                for (w, xi) in row.iter_mut().zip(x) {
                    *w += go * xi;
                }
            }
        }
        if !want_input {
            return None;
        }
        let mut gx = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let go = g[o];
            if go == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for (gi, w) in gx.iter_mut().zip(row) {
                *gi += go * w;
            }
        }
        Some(gx)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim, self.out_dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Dense>,
}

/// Layer inputs recorded during a forward pass (`acts[0]` is the network input).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MlpTrace {
    pub acts: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    /// Orthogonal weights with `gain`, the final layer scaled by `output_gain`, zero biases.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, gain: f64, output_gain: f64, rng: &mut R) -> Result<Self, PolicyError> {
        spec.validate()?;
        let n = spec.widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let g = if i + 1 == n { output_gain } else { gain };
                Dense::orthogonal(spec.widths[i], spec.widths[i + 1], g, rng)
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self, PolicyError> {
        spec.validate()?;
        let layers = spec.widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self { spec, layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self { spec: self.spec.clone(), layers: self.layers.iter().map(Dense::zeros_like).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<MlpTrace, PolicyError> {
        if x.len() != self.input_dim() {
            return Err(PolicyError::Dim { what: "mlp input", expected: self.input_dim(), got: x.len() });
        }
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = Vec::with_capacity(layer.out_dim);
            layer.forward_into(&cur, &mut y);
            if i < last {
                let act = self.spec.activations[i];
                y.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            acts.push(std::mem::replace(&mut cur, y));
        }
        Ok(MlpTrace { acts, output: cur })
    }

    /// Back-propagates `g_out`; parameter gradients go to `grad` when given.
    pub fn backward(&self, trace: &MlpTrace, g_out: &[f64], mut grad: Option<&mut Mlp>, want_input: bool) -> Option<Vec<f64>> {
        let mut g = g_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer_grad = grad.as_deref_mut().map(|m| &mut m.layers[i]);
            let need = want_input || i > 0;
            let gx = self.layers[i].backward(&trace.acts[i], &g, layer_grad, need);
            if i == 0 {
                return gx;
            }
            let act = self.spec.activations[i - 1];
            let mut gx = gx.expect("hidden input gradient");
            for (gi, y) in gx.iter_mut().zip(&trace.acts[i]) {
                *gi *= act.derivative_from_output(*y);
            }
            g = gx;
        }
        None
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn tensor_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len()).flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (r, c) in [(4, 9), (9, 4), (5, 5)] {
            let w = orthogonal(r, c, 1.0, &mut rng);
            let (n, len, get): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if r <= c {
                (r, c, Box::new(|i, k| w[i * c + k]))
            } else {
                (c, r, Box::new(|i, k| w[k * c + i]))
            };
            for i in 0..n {
                for j in 0..n {
                    let d: f64 = (0..len).map(|k| get(i, k) * get(j, k)).sum();
                    assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_shape_validation() {
        assert!(MlpSpec { widths: vec![3, 2], activations: vec![], heads: vec![("o".into(), 2)] }.validate().is_err());
        let mut s = MlpSpec::new(3, &[4], Activation::Tanh, &[("a", 2), ("b", 1)]);
        assert!(s.validate().is_ok());
        assert_eq!(s.head("b"), Some((2, 1)));
        s.heads.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for act in [Activation::Tanh, Activation::Relu] {
            let mut net = Mlp::new(MlpSpec::new(3, &[4, 4], act, &[("o", 2)]), 1.0, 1.0, &mut rng).unwrap();
            for l in &mut net.layers {
                l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            }
            let x = [0.3, -0.7, 0.2];
            let coef = [0.8, -1.3];
            let loss = |n: &Mlp| n.forward(&x).unwrap().output.iter().zip(coef).map(|(o, c)| o * c).sum::<f64>();
            let trace = net.forward(&x).unwrap();
            let mut grad = net.zeros_like();
            let gx = net.backward(&trace, &coef, Some(&mut grad), true).unwrap();
            let h = 1e-5;
            let analytic: Vec<f64> = grad.tensors().into_iter().flatten().copied().collect();
            let mut k = 0;
            for t in 0..net.tensors().len() {
                for i in 0..net.tensors()[t].len() {
                    let mut p = net.clone();
                    p.tensors_mut()[t][i] += h;
                    let mut m = net.clone();
                    m.tensors_mut()[t][i] -= h;
                    let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                    let a = analytic[k];
                    assert!((fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()).max(1e-6) + 1e-9, "{fd} vs {a}");
                    k += 1;
                }
            }
            for i in 0..3 {
                let mut xp = x;
                xp[i] += h;
                let mut xm = x;
                xm[i] -= h;
                let f = |v: &[f64; 3]| net.forward(v).unwrap().output.iter().zip(coef).map(|(o, c)| o * c).sum::<f64>();
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                assert!((fd - gx[i]).abs() < 1e-8);
            }
        }
    }
}
