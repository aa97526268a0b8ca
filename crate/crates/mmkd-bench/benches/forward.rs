//! Forward and backward pass timings for the segmentation model at desk
//! scale (64x64 inputs, 4 modalities).

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{ArrayD, IxDyn};

use mmkd::autodiff::Tape;
use mmkd::model::{ModelConfig, SegModel};
use mmkd::rng;
use rand::Rng;

fn random_input(rng: &mut impl Rng, b: usize, h: usize, w: usize) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[b, 3, h, w]), |_| rng.gen::<f64>())
}

fn bench_forward(c: &mut Criterion) {
    let config = ModelConfig::default();
    let model = SegModel::new(config.clone(), 7).unwrap();
    let mut r = rng::stream(7, &[1]);
    let inputs: Vec<ArrayD<f64>> = (0..config.num_modalities)
        .map(|_| random_input(&mut r, 2, 64, 64))
        .collect();

    c.bench_function("forward_full_modalities_b2_64x64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let params = model.params_on_tape(&mut tape);
            let vars: Vec<(usize, _)> = inputs
                .iter()
                .enumerate()
                .map(|(m, x)| (m, tape.leaf(x.clone())))
                .collect();
            let (logits, _) = model.forward(&mut tape, &params, &vars).unwrap();
            std::hint::black_box(tape.value(logits).sum())
        })
    });

    c.bench_function("forward_backward_ce_b2_64x64", |bench| {
        let labels = ArrayD::from_shape_fn(IxDyn(&[2, 64, 64]), |_| {
            r.gen_range(0..config.num_classes) as u8
        });
        bench.iter(|| {
            let mut tape = Tape::new();
            let params = model.params_on_tape(&mut tape);
            let vars: Vec<(usize, _)> = inputs
                .iter()
                .enumerate()
                .map(|(m, x)| (m, tape.leaf(x.clone())))
                .collect();
            let (logits, _) = model.forward(&mut tape, &params, &vars).unwrap();
            let (loss, _) = tape.ce_loss(logits, &labels, 255).unwrap();
            let grads = tape.backward(loss);
            std::hint::black_box(grads.get(loss).map(|g| g.sum()))
        })
    });
}

criterion_group!(benches, bench_forward);
criterion_main!(benches);
