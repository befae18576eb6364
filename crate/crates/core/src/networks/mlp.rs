use crate::autodiff::{kernels, AutodiffError, Tape, Tensor, Var};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
}

impl Linear {
    /// Weights and biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = (0..fan_in * fan_out)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        let bias = (0..fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        Self {
            weight: Tensor::from_parts(vec![fan_in, fan_out], weight),
            bias: Tensor::from_parts(vec![fan_out], bias),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Fully connected stack: ReLU after every hidden layer, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn init(input: usize, hidden: &[usize], output: usize, rng: &mut SplitMix64) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let layers = dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("mlp has layers").fan_out()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// `(name suffix, tensor)` pairs such as `0.weight`, `0.bias`, `1.weight`.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(format!("{i}.weight"), &l.weight), (format!("{i}.bias"), &l.bias)])
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }

    /// Tape-free forward pass over `rows` row-major inputs.
    pub fn forward_values(&self, input: &[f64], rows: usize) -> Vec<f64> {
        let mut x = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let (k, n) = (l.fan_in(), l.fan_out());
            debug_assert_eq!(x.len(), rows * k);
            let mut out = vec![0.0; rows * n];
            kernels::gemm_nn(&x, l.weight.data(), &mut out, rows, k, n);
            for row in out.chunks_mut(n) {
                for (o, b) in row.iter_mut().zip(l.bias.data()) {
                    *o += b;
                }
            }
            if i != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            x = out;
        }
        x
    }
}

/// An [`Mlp`] whose parameters are registered as leaves on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var, AutodiffError> {
        let mut x = input;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let h = tape.matmul(x, w)?;
            x = tape.add(h, b)?;
            if i != last {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = SplitMix64::new(3);
        let m = Mlp::init(16, &[8], 4, &mut rng);
        assert_eq!(m.layers.len(), 2);
        for (l, bound) in m.layers.iter().zip([0.25, 1.0 / 8f64.sqrt()]) {
            assert!(l.weight.max_abs() <= bound);
            assert!(l.bias.max_abs() <= bound);
        }
    }

    #[test]
    fn tape_and_value_forward_agree() {
        let mut rng = SplitMix64::new(4);
        let m = Mlp::init(5, &[7, 6], 3, &mut rng);
        let x: Vec<f64> = (0..10).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let xv = tape.constant(Tensor::matrix(2, 5, x.clone()).unwrap());
        let y = bound.forward(&mut tape, xv).unwrap();
        let direct = m.forward_values(&x, 2);
        assert_eq!(tape.value(y).data(), &direct[..]);
    }
}
