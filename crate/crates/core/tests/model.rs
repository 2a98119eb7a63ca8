mod common;

use common::{random_tensor, tiny_config, tiny_dataset};
use moose::attention::EncoderBlock;
use moose::fusion::FusionMode;
use moose::model::{
    count_flops, count_flops_breakdown, count_params, Aggregation, Aggregator, Moose, MooseConfig,
};
use moose::params::{Ctx, ParamBuilder, ParamStore};
use moose::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn causal_outputs(block: &Aggregator, store: &ParamStore, units: &Tensor, t: usize) -> Tensor {
    let mut ctx = Ctx::new(store);
    let u = ctx.tape.constant(units.clone());
    let out = block.positions(&mut ctx, u, t).unwrap();
    ctx.tape.value(out).clone()
}

#[test]
fn causal_aggregation_never_looks_ahead() {
    let d = 8;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    let agg = Aggregator::Causal(EncoderBlock::new(&mut b, "agg", d, 2).unwrap());
    for id in store.ids().collect::<Vec<_>>() {
        store
            .tensor_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x += rng.random_range(-0.3..0.3));
    }
    for t_len in [2, 4, 8] {
        let units = random_tensor(&mut rng, &[t_len, d], 1.0);
        let base = causal_outputs(&agg, &store, &units, t_len);
        for t in 0..t_len {
            let mut bumped = units.clone();
            for j in 0..d {
                bumped.data_mut()[t * d + j] += rng.random_range(-2.0..2.0);
            }
            let out = causal_outputs(&agg, &store, &bumped, t_len);
            for pos in 0..t_len {
                let same = (0..d).all(|j| out.at2(pos, j).to_bits() == base.at2(pos, j).to_bits());
                if pos < t {
                    assert!(same, "T={t_len}: bumping unit {t} changed position {pos}");
                } else {
                    assert!(
                        !same,
                        "T={t_len}: bumping unit {t} left position {pos} unchanged"
                    );
                }
            }
        }
    }
}

#[test]
fn mean_aggregation_ignores_order() {
    let agg = Aggregator::Mean;
    let store = ParamStore::new();
    let units = random_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[4, 3], 1.0);
    let mut rev = Vec::new();
    for t in (0..4).rev() {
        rev.extend_from_slice(units.row(t));
    }
    let rev = Tensor::new(&[4, 3], rev).unwrap();
    let run = |u: &Tensor| {
        let mut ctx = Ctx::new(&store);
        let v = ctx.tape.constant(u.clone());
        let out = agg.forward(&mut ctx, v, 4).unwrap();
        ctx.tape.value(out).clone()
    };
    assert!(run(&units).max_abs_diff(&run(&rev)) < 1e-15);
}

fn one_layer(fusion: FusionMode, aggregation: Aggregation) -> MooseConfig {
    MooseConfig {
        fusion,
        aggregation,
        ..tiny_config(2)
    }
}

#[test]
fn flop_count_equals_instrumented_forward() {
    let ds = tiny_dataset(2, 1, 3);
    for fusion in FusionMode::ALL {
        for aggregation in [Aggregation::Mean, Aggregation::Causal] {
            let cfg = one_layer(fusion, aggregation);
            let model = Moose::new(cfg.clone()).unwrap();
            let clip = model.prepare(&ds.train[0]).unwrap();
            let mut ctx = Ctx::new(&model.store);
            model.forward(&mut ctx, &[&clip]).unwrap();
            let flops = count_flops_breakdown(&cfg);
            assert_eq!(ctx.tape.macs(), flops.network(), "{fusion} {aggregation}");
            assert_eq!(
                count_flops(&cfg),
                ctx.tape.macs() + cfg.frames as u64 * cfg.flow.macs(16, 16)
            );
        }
    }
}

#[test]
fn param_count_equals_registry() {
    for fusion in FusionMode::ALL {
        for aggregation in [Aggregation::Mean, Aggregation::Causal] {
            let cfg = MooseConfig {
                fusion,
                aggregation,
                ..MooseConfig::default()
            };
            let model = Moose::new(cfg.clone()).unwrap();
            assert_eq!(count_params(&cfg), model.store.num_scalars());
            let enumerated: usize = model.store.entries().iter().map(|e| e.tensor.numel()).sum();
            assert_eq!(enumerated, model.store.num_scalars());
        }
    }
}

#[test]
fn zero_head_gives_uniform_softmax() {
    let ds = tiny_dataset(2, 1, 4);
    let mut model = Moose::new(tiny_config(2)).unwrap();
    let head = model.head.clone();
    model.store.tensor_mut(head.weight).data_mut().fill(0.0);
    let clip = model.prepare(&ds.train[0]).unwrap();
    let logits = model.predict(&clip).unwrap();
    assert_eq!(logits.shape(), &[1, 4]);
    assert!(logits.data().iter().all(|&z| z == 0.0));
    let mut ctx = Ctx::new(&model.store);
    let (loss, _) = model.loss(&mut ctx, &[&clip]).unwrap();
    assert!((ctx.tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn forward_is_deterministic_and_batch_independent() {
    let ds = tiny_dataset(2, 2, 5);
    let model = Moose::new(tiny_config(2)).unwrap();
    let again = Moose::new(tiny_config(2)).unwrap();
    let clips: Vec<_> = ds
        .train
        .iter()
        .take(3)
        .map(|c| model.prepare(c).unwrap())
        .collect();
    let refs: Vec<_> = clips.iter().collect();
    let mut ctx = Ctx::new(&model.store);
    let batched = model.forward(&mut ctx, &refs).unwrap();
    let batched = ctx.tape.value(batched).clone();
    for (i, c) in clips.iter().enumerate() {
        let single = again.predict(c).unwrap();
        for k in 0..4 {
            assert!((single.at2(0, k) - batched.at2(i, k)).abs() < 1e-13);
        }
    }
}

#[test]
fn zero_flow_ablation_feeds_zeros() {
    let ds = tiny_dataset(2, 1, 6);
    let model = Moose::new(MooseConfig {
        zero_flow: true,
        ..tiny_config(2)
    })
    .unwrap();
    let clip = model.prepare(&ds.train[0]).unwrap();
    assert!(clip.temporal.data().iter().all(|&v| v == 0.0));
    assert!(clip.spatial.data().iter().any(|&v| v != 0.0));
}
