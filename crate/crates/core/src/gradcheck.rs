//! Central finite-difference checks of tape gradients.
//!
//! The error reported for a tensor is `max_i |analytic_i − numeric_i|`
//! divided by `max_i |numeric_i|` (floored at 1e-8), so a single comparison
//! covers the whole tensor rather than individual near-zero entries.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Per-input relative error.
    pub errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Builds the scalar loss with `f` on fresh tapes and compares the analytic
/// gradient of every input against central differences with step `h`.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..input.numel() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((numeric - analytic.data()[i]).abs());
            scale = scale.max(numeric.abs());
        }
        errors.push(worst / scale.max(1e-8));
    }
    Ok(GradCheck { errors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::Activation;
    use crate::rng::SeededRng;
    use crate::tape::AttentionGeometry;

    const TOL: f64 = 1e-4;
    const H: f64 = 1e-5;

    fn rand(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
        rng.normal_tensor(shape, 1.0)
    }

    /// Weighted sum with a fixed random projection so every output entry matters.
    fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let w = SeededRng::new(seed).normal_tensor(&shape, 1.0);
        let w = tape.constant(w);
        let m = tape.mul(x, w)?;
        Ok(tape.sum(m))
    }

    fn assert_ok(name: &str, gc: GradCheck) {
        assert!(gc.max_error() < TOL, "{name}: {:?}", gc.errors);
    }

    #[test]
    fn elementwise_and_linear_ops() {
        for seed in 0..5 {
            let mut rng = SeededRng::new(seed);
            let a = rand(&mut rng, &[3, 4]);
            let b = rand(&mut rng, &[4, 2]);
            let bias = rand(&mut rng, &[2]);
            assert_ok(
                "matmul+add_row",
                check(&[a.clone(), b, bias], H, |t, v| {
                    let m = t.matmul(v[0], v[1])?;
                    let y = t.add_row(m, v[2])?;
                    project(t, y, 99)
                })
                .unwrap(),
            );
            let c = rand(&mut rng, &[3, 4]);
            let tile = rand(&mut rng, &[1, 4]);
            assert_ok(
                "mul/add/tiled/scale",
                check(&[a.clone(), c, tile], H, |t, v| {
                    let m = t.mul(v[0], v[1])?;
                    let s = t.add(m, v[0])?;
                    let s = t.add_tiled(s, v[2])?;
                    let s = t.scale(s, 0.7);
                    let s = t.col_affine(s, vec![1.0, -2.0, 0.5, 3.0], vec![0.1; 4])?;
                    project(t, s, 5)
                })
                .unwrap(),
            );
            for kind in [Activation::Silu, Activation::Gelu] {
                assert_ok(
                    "activation",
                    check(&[a.clone()], H, |t, v| {
                        let y = t.activation(v[0], kind);
                        project(t, y, 3)
                    })
                    .unwrap(),
                );
            }
        }
    }

    #[test]
    fn softmax_norm_and_rows() {
        for seed in 0..5 {
            let mut rng = SeededRng::new(100 + seed);
            let x = rand(&mut rng, &[4, 5]);
            let g = rand(&mut rng, &[5]);
            let b = rand(&mut rng, &[5]);
            assert_ok(
                "softmax",
                check(&[x.clone()], H, |t, v| {
                    let y = t.softmax(v[0]);
                    project(t, y, 11)
                })
                .unwrap(),
            );
            assert_ok(
                "layer_norm",
                check(&[x.clone(), g, b], H, |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], 1e-12)?;
                    project(t, y, 12)
                })
                .unwrap(),
            );
            let s = rand(&mut rng, &[4]);
            assert_ok(
                "mul_rows/group_mean/gather/scatter",
                check(&[x.clone(), s], H, |t, v| {
                    let y = t.mul_rows(v[0], v[1])?;
                    let y = t.gather_rows(y, vec![3, 0, 0, 2])?;
                    let y = t.scatter_rows(y, vec![1, 1, 5, 0], 6)?;
                    let y = t.group_mean(y, 2)?;
                    project(t, y, 13)
                })
                .unwrap(),
            );
            let pos = x.map(|v| v.abs() + 0.5);
            assert_ok(
                "gather_per_row/normalize",
                check(&[pos], H, |t, v| {
                    let y = t.gather_per_row(v[0], vec![4, 1, 0, 2, 3, 3, 1, 0])?;
                    let y = t.normalize_rows(y);
                    project(t, y, 14)
                })
                .unwrap(),
            );
        }
    }

    #[test]
    fn cosine_blend_attention_loss() {
        for seed in 0..5 {
            let mut rng = SeededRng::new(200 + seed);
            let a = rand(&mut rng, &[5, 3]);
            let c = rand(&mut rng, &[2, 3]);
            assert_ok(
                "cosine",
                check(&[a.clone(), c], H, |t, v| {
                    let y = t.cosine(v[0], v[1])?;
                    project(t, y, 21)
                })
                .unwrap(),
            );
            let gamma = Tensor::scalar(0.3 + 0.1 * seed as f64);
            let corr = rand(&mut rng, &[3]);
            assert_ok(
                "blend",
                check(&[a.clone(), gamma, corr], H, |t, v| {
                    let y = t.blend(v[0], v[1], v[2])?;
                    project(t, y, 22)
                })
                .unwrap(),
            );
            let geo = AttentionGeometry {
                batch: 2,
                patches: 3,
                pixels: 2,
                heads: 2,
            };
            let qkv = rand(&mut rng, &[12, 12]);
            assert_ok(
                "attention",
                check(&[qkv], H, |t, v| {
                    let y = t.attention(v[0], geo)?;
                    project(t, y, 23)
                })
                .unwrap(),
            );
            let logits = rand(&mut rng, &[3, 4]);
            let target = Tensor::from_f64(&[3, 4], &[0.2, 0.8, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.25, 0.25, 0.25, 0.25]).unwrap();
            assert_ok(
                "soft_cross_entropy",
                check(&[logits], H, move |t, v| t.soft_cross_entropy(v[0], target.clone())).unwrap(),
            );
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap());
        let y = tape.matmul(a, b).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
    }
}
