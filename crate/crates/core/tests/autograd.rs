//! Reverse-mode gradients against central finite differences, op by op and
//! through a small encoder.

mod common;

use common::{random_tensor, rel_err};
use moose::attention::{build_arrow_mask, build_causal_mask, EncoderBlock};
use moose::params::{Ctx, ParamBuilder, ParamStore, Stage};
use moose::tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Records `f` on the inputs, contracts the output with a fixed random
/// tensor so every output entry matters, and returns the scalar.
fn eval(inputs: &[Tensor], weights: &Tensor, f: &Build, grads: bool) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let out = tape.reshape(out, &[weights.numel()]).unwrap();
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let value = tape.value(loss).data()[0];
    if !grads {
        return (value, Vec::new());
    }
    tape.backward(loss).unwrap();
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    (value, g)
}

fn check(name: &str, inputs: Vec<Tensor>, f: &Build) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let n = tape.value(out).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let weights = random_tensor(&mut rng, &[n], 1.0);

    let (_, analytic) = eval(&inputs, &weights, f, true);
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= STEP;
            let fd = (eval(&plus, &weights, f, false).0 - eval(&minus, &weights, f, false).0)
                / (2.0 * STEP);
            let err = rel_err(analytic[i][k], fd, 1e-6);
            assert!(
                err < TOL,
                "{name}: input {i} entry {k}: autograd {} vs fd {fd} (rel {err:.2e})",
                analytic[i][k]
            );
        }
    }
}

fn rt(seed: u64, shape: &[usize]) -> Tensor {
    random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), shape, 1.0)
}

#[test]
fn matmul_and_transpose() {
    check("matmul", vec![rt(1, &[3, 4]), rt(2, &[4, 2])], &|t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    check("transpose", vec![rt(3, &[3, 5])], &|t, v| {
        t.transpose(v[0]).unwrap()
    });
}

#[test]
fn elementwise_ops() {
    let ab = || vec![rt(4, &[2, 3]), rt(5, &[2, 3])];
    check("add", ab(), &|t, v| t.add(v[0], v[1]).unwrap());
    check("sub", ab(), &|t, v| t.sub(v[0], v[1]).unwrap());
    check("mul", ab(), &|t, v| t.mul(v[0], v[1]).unwrap());
    check("scale", vec![rt(6, &[2, 3])], &|t, v| t.scale(v[0], -1.7));
    check("gelu", vec![rt(7, &[3, 3])], &|t, v| t.gelu(v[0]));
}

#[test]
fn tiled_add_covers_bias_and_position_tables() {
    check("bias", vec![rt(8, &[4, 3]), rt(9, &[3])], &|t, v| {
        t.add_tiled(v[0], v[1]).unwrap()
    });
    check("table", vec![rt(10, &[6, 2]), rt(11, &[3, 2])], &|t, v| {
        t.add_tiled(v[0], v[1]).unwrap()
    });
}

#[test]
fn reductions() {
    check("sum", vec![rt(12, &[3, 2])], &|t, v| t.sum(v[0]));
    check("mean_rows", vec![rt(13, &[4, 3])], &|t, v| {
        t.mean_rows(v[0]).unwrap()
    });
}

#[test]
fn softmax_plain_and_masked() {
    check("softmax", vec![rt(14, &[3, 4])], &|t, v| {
        t.softmax(v[0], None).unwrap()
    });
    let arrow = build_arrow_mask(3).unwrap();
    check("softmax arrow", vec![rt(15, &[4, 4])], &move |t, v| {
        t.softmax(v[0], Some(&arrow)).unwrap()
    });
    let causal = build_causal_mask(4).unwrap();
    check("softmax causal", vec![rt(16, &[4, 4])], &move |t, v| {
        t.softmax(v[0], Some(&causal)).unwrap()
    });
}

#[test]
fn layer_norm_all_inputs() {
    check(
        "layer_norm",
        vec![rt(17, &[3, 5]), rt(18, &[5]), rt(19, &[5])],
        &|t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(),
    );
}

#[test]
fn structural_ops() {
    check("slice", vec![rt(20, &[4, 5])], &|t, v| {
        t.slice(v[0], 1, 2, 1, 3).unwrap()
    });
    check(
        "concat_cols",
        vec![rt(21, &[3, 2]), rt(22, &[3, 4])],
        &|t, v| t.concat_cols(&[v[0], v[1], v[0]]).unwrap(),
    );
    check(
        "concat_rows",
        vec![rt(23, &[2, 3]), rt(24, &[1, 3])],
        &|t, v| t.concat_rows(&[v[1], v[0], v[1]]).unwrap(),
    );
    check("gather_rows", vec![rt(25, &[4, 2])], &|t, v| {
        t.gather_rows(v[0], &[3, 0, 3]).unwrap()
    });
    check("reshape", vec![rt(26, &[2, 6])], &|t, v| {
        t.reshape(v[0], &[3, 4]).unwrap()
    });
}

#[test]
fn cross_entropy_gradient() {
    check("cross_entropy", vec![rt(27, &[5])], &|t, v| {
        t.cross_entropy(v[0], 2).unwrap()
    });
}

#[test]
fn softmax_large_logit_is_stable() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap());
    let y = tape.softmax(x, None).unwrap();
    let v = tape.value(y).data().to_vec();
    assert!(v.iter().all(|p| p.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|g| g.is_finite()));
}

/// Two stacked pre-norm blocks (width 4, 2 heads) under a causal mask,
/// followed by a cross-entropy on the mean token: every parameter.
#[test]
fn two_block_encoder_matches_finite_differences() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    b.scope("toy", Stage::Aggregation);
    let blocks = [
        EncoderBlock::new(&mut b, "b0", 4, 2).unwrap(),
        EncoderBlock::new(&mut b, "b1", 4, 2).unwrap(),
    ];
    assert!(store.num_scalars() <= 500, "{} params", store.num_scalars());
    // Move away from the symmetric init (zero biases, unit gains).
    let mut noise = ChaCha8Rng::seed_from_u64(4);
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.tensor_mut(id);
        let shape = t.shape().to_vec();
        let n = random_tensor(&mut noise, &shape, 0.5);
        t.data_mut()
            .iter_mut()
            .zip(n.data())
            .for_each(|(x, d)| *x += d);
    }
    let input = rt(5, &[3, 4]);
    let mask = build_causal_mask(3).unwrap();
    let loss_of = |store: &ParamStore, grads: bool| -> (f64, Vec<Option<Vec<f64>>>) {
        let mut ctx = Ctx::new(store);
        let mut x = ctx.tape.constant(input.clone());
        for blk in &blocks {
            x = blk.forward(&mut ctx, x, 3, Some(&mask), None).unwrap();
        }
        let m = ctx.tape.mean_rows(x).unwrap();
        let loss = ctx.tape.cross_entropy(m, 1).unwrap();
        let value = ctx.tape.value(loss).data()[0];
        if !grads {
            return (value, Vec::new());
        }
        ctx.tape.backward(loss).unwrap();
        let mut g = vec![None; store.len()];
        for (id, v) in ctx.bound() {
            g[id.0] = ctx.tape.grad(v).map(<[f64]>::to_vec);
        }
        (value, g)
    };
    let (_, analytic) = loss_of(&store, true);
    let mut checked = 0;
    for id in store.ids().collect::<Vec<_>>() {
        let grad = analytic[id.0].clone().expect("every parameter is used");
        for k in 0..store.tensor(id).numel() {
            let mut s = store.clone();
            s.tensor_mut(id).data_mut()[k] += STEP;
            let up = loss_of(&s, false).0;
            s.tensor_mut(id).data_mut()[k] -= 2.0 * STEP;
            let down = loss_of(&s, false).0;
            let fd = (up - down) / (2.0 * STEP);
            let err = rel_err(grad[k], fd, 1e-6);
            assert!(
                err < TOL,
                "{}[{k}]: {} vs {fd}",
                store.entry(id).name,
                grad[k]
            );
            checked += 1;
        }
    }
    assert_eq!(checked, store.num_scalars());
}
