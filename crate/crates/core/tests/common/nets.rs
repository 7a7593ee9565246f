use neighborwise::gradcheck::{grad_check, GradCheckReport};
use neighborwise::layers::{forward_layer, LayerSpec, Sequential};
use neighborwise::{Mode, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const ALL_KINDS: [&str; 14] = [
    "dense", "conv2d", "conv_transpose2d", "batch_norm", "leaky_relu", "relu", "tanh", "sigmoid", "dropout", "softmax", "max_pool", "avg_pool",
    "flatten", "residual_block",
];

pub enum Loss {
    Focal(Vec<usize>),
    Squared(Tensor<f64>),
}

pub struct Net {
    pub store: ParamStore<f64>,
    pub seq: Sequential,
    pub input: Tensor<f64>,
    pub loss: Loss,
    pub kinds: Vec<&'static str>,
}

fn kind(spec: &LayerSpec) -> &'static str {
    match spec {
        LayerSpec::Dense { .. } => "dense",
        LayerSpec::Conv2d { .. } => "conv2d",
        LayerSpec::ConvTranspose2d { .. } => "conv_transpose2d",
        LayerSpec::BatchNorm { .. } => "batch_norm",
        LayerSpec::LeakyRelu { .. } => "leaky_relu",
        LayerSpec::Relu => "relu",
        LayerSpec::Tanh => "tanh",
        LayerSpec::Sigmoid => "sigmoid",
        LayerSpec::Dropout { .. } => "dropout",
        LayerSpec::Softmax => "softmax",
        LayerSpec::MaxPool { .. } => "max_pool",
        LayerSpec::AvgPool { .. } => "avg_pool",
        LayerSpec::Flatten => "flatten",
        LayerSpec::ResidualBlock { .. } => "residual_block",
    }
}

pub fn normal(shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z }).collect::<Vec<f64>>();
    Tensor::new(shape, data).unwrap()
}

/// Smallest distance of any top-level (leaky) ReLU input from the kink.
fn kink_margin(seq: &Sequential, store: &ParamStore<f64>, input: &Tensor<f64>) -> f64 {
    let mut g = neighborwise::Graph::train(0);
    let mut x = g.input(input.clone());
    let mut margin = f64::INFINITY;
    for layer in &seq.layers {
        if matches!(layer.spec, LayerSpec::Relu | LayerSpec::LeakyRelu { .. }) {
            margin = g.value(x).data().iter().fold(margin, |m, v| m.min(v.abs()));
        }
        x = forward_layer(&mut g, x, layer, store, Mode::Train).unwrap();
    }
    margin
}

/// A random network from one of four families. Every parameter, biases
/// included, gets a random value so no ReLU sits exactly at its kink.
pub fn random_net(id: u64) -> Net {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + id);
    let mut store = ParamStore::new();
    let mut seq = Sequential::new();
    let batch = rng.random_range(2..=4);
    let mut specs = Vec::new();
    let side = 2 * rng.random_range(2..=3);
    let c = rng.random_range(1..=3);
    let w = rng.random_range(2..=4);
    let input_shape = match id % 4 {
        0 => {
            let d = rng.random_range(3..=6);
            specs.extend([
                LayerSpec::Dense { inputs: d, outputs: w + 2 },
                LayerSpec::Tanh,
                LayerSpec::Dropout { p: 0.3 },
                LayerSpec::Dense { inputs: w + 2, outputs: 3 },
            ]);
            vec![batch, d]
        }
        1 => {
            let stride = rng.random_range(1..=2);
            specs.extend([
                LayerSpec::Conv2d { in_ch: c, out_ch: w, kernel: 3, stride, pad: 1 },
                LayerSpec::BatchNorm { channels: w },
                LayerSpec::LeakyRelu { slope: 0.1 },
            ]);
            if stride == 1 {
                specs.push(LayerSpec::MaxPool { size: 2 });
            }
            specs.push(LayerSpec::Flatten);
            vec![batch, c, side, side]
        }
        2 => {
            specs.extend([
                LayerSpec::ConvTranspose2d { in_ch: c, out_ch: w, kernel: 3, stride: 2, pad: 1, out_pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_ch: w, out_ch: 1, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Sigmoid,
            ]);
            vec![batch, c, side / 2, side / 2]
        }
        _ => {
            specs.extend([
                LayerSpec::Conv2d { in_ch: c, out_ch: w, kernel: 1, stride: 1, pad: 0 },
                LayerSpec::ResidualBlock { channels: w },
                LayerSpec::AvgPool { size: 2 },
                LayerSpec::Flatten,
            ]);
            vec![batch, c, side, side]
        }
    };
    for (i, s) in specs.iter().enumerate() {
        seq.push(format!("l{i}"), s.clone(), &mut store, &mut rng);
    }
    let mut kinds: Vec<&'static str> = specs.iter().map(kind).collect();
    let out = seq.output_shape(&input_shape).unwrap();
    if out.len() == 2 && !id.is_multiple_of(4) {
        // Flattened features feed a classifier head.
        seq.push("head", LayerSpec::Dense { inputs: out[1], outputs: 3 }, &mut store, &mut rng);
        kinds.push("dense");
    }
    let out = seq.output_shape(&input_shape).unwrap();
    let loss = if out.len() == 2 && rng.random_bool(0.5) {
        Loss::Focal((0..batch).map(|_| rng.random_range(0..3)).collect())
    } else {
        if out.len() == 2 && rng.random_bool(0.5) {
            seq.push("softmax", LayerSpec::Softmax, &mut store, &mut rng);
            kinds.push("softmax");
        }
        let out = seq.output_shape(&input_shape).unwrap();
        Loss::Squared(normal(out, 0.5, &mut rng))
    };
    let input = normal(input_shape, 1.0, &mut rng);
    loop {
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            store.param_mut(id).value = normal(shape, 0.5, &mut rng);
        }
        if kink_margin(&seq, &store, &input) > 1e-3 {
            break;
        }
    }
    Net { store, seq, input, loss, kinds }
}

/// Central-difference check of network `id` with step 1e-5 on 12
/// coordinates per parameter.
pub fn check_net(id: u64) -> (GradCheckReport, Vec<&'static str>) {
    let Net { mut store, seq, input, loss, kinds } = random_net(id);
    let report = grad_check(
        &mut store,
        |g, p| {
            let x = g.input(input.clone());
            let y = seq.forward(g, x, p, Mode::Train)?;
            match &loss {
                Loss::Focal(labels) => {
                    let per = g.focal_loss(y, labels, 2.0)?;
                    Ok(g.sum(per))
                }
                Loss::Squared(t) => {
                    let t = g.input(t.clone());
                    g.sq_dist(y, t)
                }
            }
        },
        1e-5,
        12,
        id,
    )
    .unwrap();
    (report, kinds)
}
