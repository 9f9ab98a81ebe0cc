//! Finite-difference gradient checks through the public API: every
//! differentiable primitive, then the composed classifier losses (plain
//! cross-entropy and the distillation objective).
//!
//! Protocol: central differences at ε = 1e-4, relative error
//! |a − n| / max(1, |a|, |n|) < 1e-4 at every probed coordinate.

use ftlab_core::model::{build_model, ModelConfig};
use ftlab_core::rng::Rng;
use ftlab_core::tensor::Tensor;
use ftlab_core::training::{distill_loss, DistillConfig};

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Checks d(loss)/d(x[i]) for every i against central differences, where
/// `loss` rebuilds the computation from plain data each call.
fn check_tensor_fn(x0: &[f64], loss: impl Fn(&[f64]) -> f64, analytic: &[f64], what: &str) {
    assert_eq!(x0.len(), analytic.len());
    for i in 0..x0.len() {
        let mut plus = x0.to_vec();
        let mut minus = x0.to_vec();
        plus[i] += EPS;
        minus[i] -= EPS;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * EPS);
        let e = rel_err(analytic[i], numeric);
        assert!(
            e < TOL,
            "{}: coordinate {} analytic {} vs numeric {} (rel err {:.3e})",
            what,
            i,
            analytic[i],
            numeric,
            e
        );
    }
}

/// Random test vector in [-1, 1], avoiding the degenerate all-zeros point.
fn probe(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::from_seed(seed);
    (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect()
}

/// Weighted sum with fixed coefficients turns a non-scalar output into a
/// scalar objective with a nontrivial upstream gradient.
fn weighted_sum(t: &Tensor, coeffs: &[f64]) -> Tensor {
    let c = Tensor::from_vec(t.shape().to_vec(), coeffs.to_vec()).unwrap();
    t.mul(&c).unwrap().sum().unwrap()
}

fn grad_of(build: impl Fn(&Tensor) -> Tensor, x0: &[f64], shape: Vec<usize>) -> Vec<f64> {
    let x = Tensor::param(shape, x0.to_vec()).unwrap();
    let l = build(&x);
    l.backward().unwrap();
    x.grad().expect("gradient reaches the input")
}

fn value_of(build: impl Fn(&Tensor) -> Tensor, x0: &[f64], shape: Vec<usize>) -> f64 {
    let x = Tensor::from_vec(shape, x0.to_vec()).unwrap();
    build(&x).item().unwrap()
}

fn check_unary(shape: Vec<usize>, seed: u64, what: &str, build: impl Fn(&Tensor) -> Tensor) {
    let n: usize = shape.iter().product();
    let x0 = probe(n, seed);
    let analytic = grad_of(&build, &x0, shape.clone());
    check_tensor_fn(&x0, |x| value_of(&build, x, shape.clone()), &analytic, what);
}

#[test]
fn elementwise_and_reduction_primitives() {
    let w = probe(6, 100);
    check_unary(vec![2, 3], 1, "add", {
        let w = w.clone();
        move |x| {
            let y = Tensor::from_vec(vec![2, 3], vec![0.3, -0.7, 1.1, 0.0, 0.5, -0.2]).unwrap();
            weighted_sum(&x.add(&y).unwrap(), &w)
        }
    });
    check_unary(vec![2, 3], 2, "mul", {
        let w = w.clone();
        move |x| {
            let y = Tensor::from_vec(vec![2, 3], vec![0.3, -0.7, 1.1, 0.4, 0.5, -0.2]).unwrap();
            weighted_sum(&x.mul(&y).unwrap(), &w)
        }
    });
    check_unary(vec![2, 3], 3, "scale", {
        let w = w.clone();
        move |x| weighted_sum(&x.scale(-1.7).unwrap(), &w)
    });
    check_unary(vec![6], 4, "sum", |x| x.sum().unwrap());
    check_unary(vec![6], 5, "mean", |x| x.mean().unwrap());
    check_unary(vec![2, 3], 6, "gelu", {
        let w = w.clone();
        move |x| weighted_sum(&x.gelu().unwrap(), &w)
    });
    check_unary(vec![2, 3], 7, "add_bias", {
        let w = w.clone();
        move |x| {
            let b = Tensor::from_vec(vec![3], vec![0.2, -0.4, 0.9]).unwrap();
            weighted_sum(&x.add_bias(&b).unwrap(), &w)
        }
    });
    check_unary(vec![2, 3], 8, "masked_fill", {
        let w = w.clone();
        move |x| {
            let mask = [true, false, true, true, true, false];
            weighted_sum(&x.masked_fill(&mask, -30.0).unwrap(), &w)
        }
    });
    check_unary(vec![2, 3], 9, "softmax", {
        let w = w.clone();
        move |x| weighted_sum(&x.softmax(1.3).unwrap(), &w)
    });
}

#[test]
fn structural_primitives() {
    let w6 = probe(6, 200);
    check_unary(vec![2, 3], 10, "reshape", {
        let w = w6.clone();
        move |x| weighted_sum(&x.reshape(vec![3, 2]).unwrap(), &w)
    });
    check_unary(vec![2, 3, 1], 11, "permute", {
        let w = w6.clone();
        move |x| weighted_sum(&x.permute(&[2, 0, 1]).unwrap(), &w)
    });
    let w4 = probe(4, 201);
    check_unary(vec![2, 3, 2], 12, "select_rows", {
        let w = w4.clone();
        move |x| weighted_sum(&x.select_rows(&[2, 0]).unwrap(), &w)
    });
}

#[test]
fn matmul_like_primitives_both_sides() {
    let w = probe(6, 300);
    // Left operand of matmul.
    check_unary(vec![2, 4], 13, "matmul lhs", {
        let w = w.clone();
        move |x| {
            let rhs = Tensor::from_vec(vec![4, 3], probe(12, 301)).unwrap();
            weighted_sum(&x.matmul(&rhs).unwrap(), &w)
        }
    });
    // Right operand of matmul.
    check_unary(vec![4, 3], 14, "matmul rhs", {
        let w = w.clone();
        move |x| {
            let lhs = Tensor::from_vec(vec![2, 4], probe(8, 302)).unwrap();
            weighted_sum(&lhs.matmul(x).unwrap(), &w)
        }
    });
    // Batched matmul, plain and transposed.
    let wb = probe(8, 303);
    check_unary(vec![2, 2, 3], 15, "bmm lhs", {
        let w = wb.clone();
        move |x| {
            let rhs = Tensor::from_vec(vec![2, 3, 2], probe(12, 304)).unwrap();
            weighted_sum(&x.bmm(&rhs, false).unwrap(), &w)
        }
    });
    check_unary(vec![2, 2, 3], 16, "bmm rhs transposed", {
        let w = wb.clone();
        move |x| {
            let lhs = Tensor::from_vec(vec![2, 2, 3], probe(12, 305)).unwrap();
            weighted_sum(&lhs.bmm(x, true).unwrap(), &w)
        }
    });
}

#[test]
fn normalization_and_loss_primitives() {
    let w = probe(6, 400);
    check_unary(vec![2, 3], 17, "layer_norm input", {
        let w = w.clone();
        move |x| {
            let g = Tensor::from_vec(vec![3], vec![1.1, 0.9, 1.3]).unwrap();
            let b = Tensor::from_vec(vec![3], vec![0.1, -0.2, 0.0]).unwrap();
            weighted_sum(&x.layer_norm(&g, &b, 1e-5).unwrap(), &w)
        }
    });
    check_unary(vec![3], 18, "layer_norm gamma", {
        move |g| {
            let x = Tensor::from_vec(vec![2, 3], probe(6, 401)).unwrap();
            let b = Tensor::from_vec(vec![3], vec![0.1, -0.2, 0.0]).unwrap();
            x.layer_norm(g, &b, 1e-5).unwrap().sum().unwrap()
        }
    });
    check_unary(vec![2, 3], 19, "cross_entropy", |x| x.cross_entropy(&[2, 0]).unwrap());
    check_unary(vec![2, 3], 20, "kl student side", |x| {
        let teacher = Tensor::from_vec(vec![2, 3], vec![0.9, -0.3, 0.2, -1.0, 0.4, 0.6]).unwrap();
        Tensor::kl_divergence(&teacher, x, 2.0).unwrap()
    });
    check_unary(vec![4, 3], 21, "embedding weight", {
        let w = probe(9, 402);
        move |table| {
            let out = Tensor::embedding(&[3, 1, 3], table).unwrap();
            weighted_sum(&out, &w)
        }
    });
}

/// Composed-model check shared by the vft and cd variants: perturb a
/// sampled subset of every parameter tensor's coordinates and compare the
/// analytic gradient with central differences of the whole loss.
fn check_model_loss(
    mut loss_of: impl FnMut(&ftlab_core::model::TransformerClassifier) -> f64,
    seed: u64,
) {
    let config = ModelConfig {
        vocab_size: 24,
        max_seq_len: 8,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ffn: 16,
        hidden_dropout: 0.0,
        attention_dropout: 0.0,
        n_classes: 2,
    };
    let mut rng = Rng::from_seed(seed);
    let model = build_model(&config, &mut rng).unwrap();

    // Analytic pass.
    let x = loss_of(&model);
    assert!(x.is_finite());

    let mut checked = 0usize;
    let mut pick = Rng::from_seed(seed ^ 0x5EED);
    for (name, param) in model.named_parameters() {
        let grad = param.grad().unwrap_or_else(|| vec![0.0; param.numel()]);
        // Attention key bias cancels inside the softmax (shift invariance),
        // so its true gradient is identically zero; it still participates
        // in the check like any other tensor.
        let n = param.numel();
        let coords: Vec<usize> = if n <= 4 {
            (0..n).collect()
        } else {
            pick.sample_indices(n, 4)
        };
        for i in coords {
            let old = param.data()[i];
            param.data_mut()[i] = old + EPS;
            let up = loss_of(&model);
            param.data_mut()[i] = old - EPS;
            let down = loss_of(&model);
            param.data_mut()[i] = old;
            let numeric = (up - down) / (2.0 * EPS);
            let e = rel_err(grad[i], numeric);
            assert!(
                e < TOL,
                "{}[{}]: analytic {} vs numeric {} (rel err {:.3e})",
                name,
                i,
                grad[i],
                numeric,
                e
            );
            checked += 1;
        }
    }
    assert!(checked >= 40, "only {} coordinates probed", checked);
}

fn toy_batch() -> (Vec<Vec<usize>>, Vec<Vec<bool>>, Vec<usize>) {
    let ids = vec![vec![5, 9, 2, 17], vec![11, 3, 1, 1]];
    let masks = vec![vec![true; 4], vec![true, true, false, false]];
    let labels = vec![1, 0];
    (ids, masks, labels)
}

#[test]
fn composed_classifier_cross_entropy_matches_finite_differences() {
    let (ids, masks, labels) = toy_batch();
    let mut first = true;
    check_model_loss(
        move |model| {
            let mut rng = Rng::from_seed(0);
            let logits = model.forward(&ids, &masks, true, &mut rng).unwrap();
            let loss = logits.cross_entropy(&labels).unwrap();
            let v = loss.item().unwrap();
            if first {
                model.zero_grad();
                loss.backward().unwrap();
                first = false;
            }
            v
        },
        7,
    );
}

#[test]
fn composed_classifier_distillation_loss_matches_finite_differences() {
    let (ids, masks, labels) = toy_batch();
    let dc = DistillConfig { temperature: 2.0, distill_weight: 0.5 };
    // A fixed teacher distribution; only the student is differentiated.
    let teacher_logits = Tensor::from_vec(vec![2, 2], vec![1.2, -0.4, -0.9, 0.8]).unwrap();
    let mut first = true;
    check_model_loss(
        move |model| {
            let mut rng = Rng::from_seed(0);
            let logits = model.forward(&ids, &masks, true, &mut rng).unwrap();
            let loss = distill_loss(&logits, &teacher_logits, &labels, &dc).unwrap();
            let v = loss.item().unwrap();
            if first {
                model.zero_grad();
                loss.backward().unwrap();
                first = false;
            }
            v
        },
        11,
    );
}
