//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records a fixed set of operations in creation order. Calling
//! [`Tape::backward`] on a scalar node yields a [`GradientMap`] holding the
//! gradient of that scalar with respect to every node that can receive one.
//! Gradients never cross a [`Tape::stop_gradient`] node and never reach
//! [`Tape::constant`] inputs.

mod adam;
mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use gradcheck::finite_diff_check;
pub use tape::{GradientMap, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: dimensions must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("row index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable is not recorded on this tape")]
    ForeignVar,
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("objective evaluated to a non-finite value")]
    NonFiniteObjective,
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("parameter count mismatch: {params} params, {grads} grads, {state} optimizer slots")]
    ParamCount {
        params: usize,
        grads: usize,
        state: usize,
    },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = t.l2_normalize(x).unwrap();
        let d = t.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-9 && (d[1] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn self_cosine_is_one() {
        let mut rng = SplitMix64::new(1);
        let mut t = Tape::new();
        let u = t.constant(random(&mut rng, &[4, 7]));
        let c = t.cosine_similarity(u, u).unwrap();
        for v in t.value(c).data() {
            // The norm epsilon shifts the result by about 1e-8 / |u|^2.
            assert!((v - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn stop_gradient_is_identity_forward_and_blocks_backward() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.5, -1.5, 2.0]));
        let s = t.stop_gradient(x).unwrap();
        assert_eq!(t.value(s), t.value(x));
        let sq = t.mul(s, s).unwrap();
        let r = t.reduce_mean(sq).unwrap();
        let g = t.backward(r).unwrap();
        assert!(g.get(x).is_none());
        assert!(!g.is_nonzero(x));
    }

    #[test]
    fn reduce_mean_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let r = t.reduce_mean(x).unwrap();
        let g = t.backward(r).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
        assert_eq!(g.get(r).unwrap().data(), &[1.0]);
    }

    #[test]
    fn cosine_against_detached_branch() {
        let mut rng = SplitMix64::new(2);
        let mut t = Tape::new();
        let u = t.leaf(random(&mut rng, &[1, 5]));
        let v = t.leaf(random(&mut rng, &[1, 5]));
        let sv = t.stop_gradient(v).unwrap();
        let c = t.cosine_similarity(u, sv).unwrap();
        let g = t.backward(c).unwrap();
        assert!(g.is_nonzero(u));
        assert!(!g.is_nonzero(v));
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(AutodiffError::NotScalar { .. })));
        let mut other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(t.backward(y), Err(AutodiffError::ForeignVar)));
        assert!(matches!(t.add(x, y), Err(AutodiffError::ForeignVar)));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
        let c = t.constant(Tensor::zeros(&[3, 2]));
        assert!(t.sub(a, c).is_err());
        assert!(t.mul(a, c).is_err());
        assert!(t.cosine_similarity(a, c).is_err());
    }

    #[test]
    fn near_zero_normalize_has_finite_gradient() {
        let mut t = Tape::new();
        t.set_finite_checks(true);
        let x = t.leaf(Tensor::vector(vec![0.0, 1e-300, 0.0]));
        let y = t.l2_normalize(x).unwrap();
        let s = t.sum_last(y).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().all_finite());
    }

    #[test]
    fn finite_checks_flag_non_finite_results() {
        let mut t = Tape::new();
        t.set_finite_checks(true);
        let x = t.constant(Tensor::vector(vec![-1.0]));
        assert_eq!(t.log(x).unwrap_err(), AutodiffError::NonFinite { op: "log" });
    }

    #[test]
    fn gather_rows_and_concat() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let g = t.gather_rows(a, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(g).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let c = t.concat(a, a).unwrap();
        assert_eq!(t.value(c).shape(), &[3, 4]);
        let r = t.reduce_mean(g).unwrap();
        let grads = t.backward(r).unwrap();
        let d = grads.get(a).unwrap().data().to_vec();
        let sixth = 1.0 / 6.0;
        assert_eq!(d, vec![sixth, sixth, 0.0, 0.0, 2.0 * sixth, 2.0 * sixth]);
        assert!(t.gather_rows(a, &[3]).is_err());
    }

    #[test]
    fn bias_broadcast_add() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let r = t.reduce_mean(s).unwrap();
        let g = t.backward(r).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0 / 6.0; 3]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut rng = SplitMix64::new(9);
            let mut t = Tape::new();
            let x = t.leaf(random(&mut rng, &[4, 3]));
            let w = t.leaf(random(&mut rng, &[3, 2]));
            let h = t.matmul(x, w).unwrap();
            let h = t.relu(h).unwrap();
            let n = t.l2_normalize(h).unwrap();
            let r = t.reduce_mean(n).unwrap();
            let g = t.backward(r).unwrap();
            (g.get(x).cloned(), g.get(w).cloned())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.unwrap().data(), b.0.unwrap().data());
        assert_eq!(a.1.unwrap().data(), b.1.unwrap().data());
    }
}
