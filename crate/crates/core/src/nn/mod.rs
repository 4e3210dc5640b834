//! Minimal differentiable-tensor engine: just the op set the encoder-decoder
//! needs, each with a hand-written adjoint checked against central
//! differences in [`gradcheck`].

pub mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use graph::{causal_mask, softmax_in_place, Grads, Graph, Var};
pub use optim::{AdamW, OptimizerState};
pub use tensor::Tensor;

use rand::Rng;

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("target {target} out of range for {classes} classes (row {row})")]
    TargetOutOfRange {
        row: usize,
        target: usize,
        classes: usize,
    },
}

/// Named trainable tensor.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    /// Additive offset vectors are exempt from weight decay.
    pub is_bias: bool,
}

impl Parameter {
    /// Xavier/Glorot-uniform `[fan_in, fan_out]` weight.
    pub fn xavier<R: Rng + ?Sized>(
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let tensor = Tensor::from_fn(vec![fan_in, fan_out], |_| rng.random_range(-bound..bound));
        Self {
            name: name.into(),
            tensor,
            is_bias: false,
        }
    }

    pub fn zeros(name: impl Into<String>, len: usize) -> Self {
        Self {
            name: name.into(),
            tensor: Tensor::zeros(vec![len]),
            is_bias: true,
        }
    }

    pub fn ones(name: impl Into<String>, len: usize) -> Self {
        Self {
            name: name.into(),
            tensor: Tensor::full(vec![len], 1.0),
            is_bias: false,
        }
    }
}

/// Sinusoidal position table: `PE(p, 2i) = sin(p / 10000^(2i/d))`,
/// `PE(p, 2i+1) = cos(p / 10000^(2i/d))`.
pub fn positional_encoding(len: usize, d: usize) -> Result<Tensor, NnError> {
    if d % 2 != 0 {
        return Err(NnError::Config(format!(
            "positional encoding width must be even, got {d}"
        )));
    }
    let mut data = vec![0.0f32; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin() as f32;
            data[pos * d + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Tensor::new(vec![len, d], data)
}

/// Projection weights of one multi-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Project, attend per head, concatenate and project back.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    query_in: Var,
    kv_in: Var,
    w: &AttentionWeights,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var, NnError> {
    let q = g.affine(query_in, w.wq, w.bq)?;
    let k = g.affine(kv_in, w.wk, w.bk)?;
    let v = g.affine(kv_in, w.wv, w.bv)?;
    let ctx = g.attention(q, k, v, heads, mask)?;
    g.affine(ctx, w.wo, w.bo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(g: &mut Graph<'_>, shape: Vec<usize>, data: Vec<f32>) -> Var {
        g.constant(Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn affine_hand_examples() {
        let mut g = Graph::new(&[]);
        let x = input(&mut g, vec![1, 2], vec![1.0, 0.0]);
        let w = input(&mut g, vec![2, 2], vec![2.0, 0.0, 0.0, 3.0]);
        let b = input(&mut g, vec![2], vec![0.0, 0.0]);
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 0.0]);

        let x = input(&mut g, vec![1, 2], vec![1.0, 1.0]);
        let w = input(&mut g, vec![2, 2], vec![1.0; 4]);
        let b = input(&mut g, vec![2], vec![1.0, 1.0]);
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 3.0]);
    }

    #[test]
    fn affine_rejects_bad_shapes_with_report() {
        let mut g = Graph::new(&[]);
        let x = input(&mut g, vec![1, 3], vec![0.0; 3]);
        let w = input(&mut g, vec![2, 2], vec![0.0; 4]);
        let b = input(&mut g, vec![2], vec![0.0; 2]);
        let err = g.affine(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn affine_keeps_leading_dims() {
        let mut g = Graph::new(&[]);
        let x = input(&mut g, vec![2, 3, 4], vec![1.0; 24]);
        let w = input(&mut g, vec![4, 5], vec![1.0; 20]);
        let b = input(&mut g, vec![5], vec![0.0; 5]);
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3, 5]);
        assert!(g.value(y).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new(&[]);
        let gain = input(&mut g, vec![3], vec![1.0; 3]);
        let off = input(&mut g, vec![3], vec![0.0; 3]);
        let x = input(&mut g, vec![1, 3], vec![1.0, 2.0, 3.0]);
        let y = g.layer_norm(x, gain, off, LAYER_NORM_EPS).unwrap();
        let expect = [-1.2247, 0.0, 1.2247];
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-3);
        }
        let x = input(&mut g, vec![1, 3], vec![5.0; 3]);
        let y = g.layer_norm(x, gain, off, LAYER_NORM_EPS).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_needs_two_features() {
        let mut g = Graph::new(&[]);
        let gain = input(&mut g, vec![1], vec![1.0]);
        let off = input(&mut g, vec![1], vec![0.0]);
        let x = input(&mut g, vec![1, 1], vec![1.0]);
        assert!(g.layer_norm(x, gain, off, LAYER_NORM_EPS).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new(&[]);
        let x = input(&mut g, vec![2, 2], vec![0.0, 0.0, 1000.0, 0.0]);
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn softmax_stays_finite_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new(&[]);
        for _ in 0..200 {
            let data: Vec<f32> = (0..16).map(|_| rng.random_range(-1e4f32..1e4)).collect();
            let x = input(&mut g, vec![2, 8], data);
            let y = g.softmax(x);
            let v = g.value(y);
            assert!(v.is_finite());
            for r in 0..2 {
                let s: f32 = v.row(r).iter().sum();
                assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
            }
        }
    }

    #[test]
    fn attention_with_identical_keys_averages_values() {
        let mut g = Graph::new(&[]);
        let q = input(
            &mut g,
            vec![2, 4],
            vec![0.3, -1.0, 2.0, 0.5, 1.0, 1.0, -2.0, 0.0],
        );
        let k = input(&mut g, vec![3, 4], [0.2, 0.1, -0.4, 0.9].repeat(3));
        let v = input(&mut g, vec![3, 4], (0..12).map(|i| i as f32).collect());
        let out = g.attention(q, k, v, 2, None).unwrap();
        let expect = [4.0, 5.0, 6.0, 7.0];
        for r in 0..2 {
            for (a, b) in g.value(out).row(r).iter().zip(expect) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut g = Graph::new(&[]);
        let q = input(&mut g, vec![1, 6], vec![0.0; 6]);
        assert!(matches!(
            g.attention(q, q, q, 4, None),
            Err(NnError::Config(_))
        ));
    }

    #[test]
    fn causal_first_position_sees_only_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base: Vec<f32> = (0..5 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = causal_mask(5);
        let run = |data: &[f32]| {
            let mut g = Graph::new(&[]);
            let x = g.constant(Tensor::new(vec![5, 8], data.to_vec()).unwrap());
            let o = g.attention(x, x, x, 2, Some(&mask)).unwrap();
            g.value(o).row(0).to_vec()
        };
        let reference = run(&base);
        let mut perturbed = base.clone();
        for v in perturbed[8..].iter_mut() {
            *v += 3.0;
        }
        let after = run(&perturbed);
        assert_eq!(
            reference.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            after.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(&reference, &base[..8]);
    }

    #[test]
    fn positional_encoding_examples() {
        let pe = positional_encoding(10, 8).unwrap();
        for i in 0..4 {
            assert_eq!(pe.row(0)[2 * i], 0.0);
            assert_eq!(pe.row(0)[2 * i + 1], 1.0);
        }
        for pos in 1..=3 {
            assert!((pe.row(pos)[0] - (pos as f32).sin()).abs() < 1e-6);
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding(4, 7).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new(&[]);
        let x = input(&mut g, vec![1, 10], vec![0.0; 10]);
        let l = g.cross_entropy(x, &[Some(3)]).unwrap();
        assert!((g.scalar(l) - 10f64.ln()).abs() < 1e-6);

        let mut logits = vec![0.0; 10];
        logits[4] = 100.0;
        let x = input(&mut g, vec![1, 10], logits);
        let l = g.cross_entropy(x, &[Some(4)]).unwrap();
        assert!(g.scalar(l) < 1e-6);

        assert!(matches!(
            g.cross_entropy(x, &[Some(10)]),
            Err(NnError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_ignored_rows_leave_the_mean() {
        let mut g = Graph::new(&[]);
        let x = input(&mut g, vec![2, 2], vec![0.0, 0.0, 5.0, -5.0]);
        let l = g.cross_entropy(x, &[Some(0), None]).unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-6);
        let l = g.cross_entropy(x, &[None, None]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(&[]);
        let x = input(&mut g, vec![3], vec![1.0, 2.0, 3.0]);
        assert_eq!(g.dropout(x, 0.0, &mut rng), x);
        let y = g.dropout(x, 0.5, &mut rng);
        for (&a, &b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!(a == 0.0 || a == 2.0 * b);
        }
    }
}
