use av_grade::nn::gradcheck::{check_layer, check_loss};
use av_grade::nn::{
    AvgPool2d, Concat, Conv2d, Dense, GlobalAvgPool, Identity, Layer, LossSpec, MaxPool2d, Relu, Residual,
    Sequential, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SHAPES: u64 = 20;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn run(name: &str, mut make: impl FnMut(&mut ChaCha8Rng) -> (Box<dyn Layer>, Vec<usize>)) {
    for seed in 0..SHAPES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut layer, shape) = make(&mut rng);
        let x = random(&shape, &mut rng);
        let report = check_layer(layer.as_mut(), &x, H).unwrap();
        assert!(report.worst() < TOL, "{name} seed {seed} shape {shape:?}: {report:?}");
    }
}

fn img_shape(rng: &mut ChaCha8Rng, c: usize, min: usize) -> Vec<usize> {
    vec![rng.gen_range(1..3), c, rng.gen_range(min..min + 5), rng.gen_range(min..min + 5)]
}

#[test]
fn conv2d() {
    run("conv2d", |rng| {
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..3);
        let pad = rng.gen_range(0..=k / 2);
        let layer = Conv2d::new(cin, cout, k, stride, pad, rng);
        (Box::new(layer), img_shape(rng, cin, k))
    });
}

#[test]
fn dense() {
    run("dense", |rng| {
        let (i, o) = (rng.gen_range(1..12), rng.gen_range(1..8));
        (Box::new(Dense::new(i, o, rng)), vec![rng.gen_range(1..5), i])
    });
}

#[test]
fn relu() {
    run("relu", |rng| {
        let c = rng.gen_range(1..4);
        (Box::new(Relu::new()), img_shape(rng, c, 2))
    });
}

#[test]
fn max_pool() {
    run("maxpool2d", |rng| {
        let k = rng.gen_range(2..4);
        let s = rng.gen_range(1..=k);
        (Box::new(MaxPool2d::new(k, s)), img_shape(rng, 2, k))
    });
}

#[test]
fn avg_pool() {
    run("avgpool2d", |rng| {
        let k = rng.gen_range(1..4);
        (Box::new(AvgPool2d::new(k)), img_shape(rng, 2, k))
    });
}

#[test]
fn global_avg_pool() {
    run("global_avg_pool", |rng| (Box::new(GlobalAvgPool::new()), img_shape(rng, 3, 1)));
}

#[test]
fn residual() {
    run("residual", |rng| {
        let c = rng.gen_range(1..4);
        let inner = Sequential::new(vec![
            Box::new(Conv2d::same(c, c, 3, rng)),
            Box::new(Relu::new()),
            Box::new(Conv2d::same(c, c, 3, rng)),
        ]);
        (Box::new(Residual::new(inner)), img_shape(rng, c, 3))
    });
}

#[test]
fn concat() {
    run("concat", |rng| {
        let c = rng.gen_range(1..4);
        let layer = Concat::new(vec![
            Box::new(Identity),
            Box::new(Conv2d::same(c, rng.gen_range(1..4), 1, rng)),
            Box::new(Conv2d::same(c, rng.gen_range(1..4), 3, rng)),
        ]);
        (Box::new(layer), img_shape(rng, c, 3))
    });
}

#[test]
fn sequential_stack() {
    run("sequential", |rng| {
        let c = rng.gen_range(1..3);
        let layer = Sequential::new(vec![
            Box::new(Conv2d::new(c, 4, 3, 2, 1, rng)),
            Box::new(Relu::new()),
            Box::new(GlobalAvgPool::new()),
            Box::new(Dense::new(4, 3, rng)),
        ]);
        (Box::new(layer), img_shape(rng, c, 4))
    });
}

#[test]
fn losses() {
    for seed in 0..SHAPES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (n, k) = (rng.gen_range(1..6), rng.gen_range(2..6));
        let logits = random(&[n, k], &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
        let mut specs = vec![LossSpec::cross_entropy()];
        for g in [0.5, 1.0, 2.0, 3.0] {
            specs.push(LossSpec::focal(g));
        }
        for mut spec in specs {
            for w in [None, Some(weights.clone())] {
                spec.class_weights = w;
                let err = check_loss(&spec, &logits, &labels, H).unwrap();
                assert!(err < TOL, "{spec:?} seed {seed}: {err}");
            }
        }
    }
}
