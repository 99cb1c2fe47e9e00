use num_complex::Complex64;
use proptest::prelude::*;
use ptyff::ffop::{
    ff_apply, load_weights, make_training_pairs, save_weights, train_operator, FastForwardOperator, OperatorWeights,
    Tensor3, TrainConfig, TrainingPair, UNet, UNetConfig, UNetOperator,
};
use ptyff::fields::ComplexGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(depth: usize, c_base: usize) -> UNetConfig {
    UNetConfig {
        depth,
        c_base,
        ..UNetConfig::desk()
    }
}

fn random_input<T: ptyff::ffop::Real>(h: usize, w: usize, seed: u64) -> Tensor3<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor3::from_vec(2, h, w, (0..2 * h * w).map(|_| T::from_f64(rng.random_range(-1.0..1.0)).unwrap()).collect())
}

/// Plain nested-loop layers over `Vec<Vec<Vec<f64>>>` (channel, row, col).
mod naive {
    pub type Img = Vec<Vec<Vec<f64>>>;

    pub fn conv(x: &Img, w: &[f32], b: &[f32], cout: usize, k: usize) -> Img {
        let (cin, h, wd) = (x.len(), x[0].len(), x[0][0].len());
        let half = (k / 2) as isize;
        let mut y = vec![vec![vec![0.0; wd]; h]; cout];
        for o in 0..cout {
            for r in 0..h {
                for c in 0..wd {
                    let mut acc = b[o] as f64;
                    for i in 0..cin {
                        for dy in 0..k {
                            for dx in 0..k {
                                let rr = r as isize + dy as isize - half;
                                let cc = c as isize + dx as isize - half;
                                if rr < 0 || cc < 0 || rr >= h as isize || cc >= wd as isize {
                                    continue;
                                }
                                acc += w[((o * cin + i) * k + dy) * k + dx] as f64 * x[i][rr as usize][cc as usize];
                            }
                        }
                    }
                    y[o][r][c] = acc;
                }
            }
        }
        y
    }

    pub fn relu(mut x: Img) -> Img {
        x.iter_mut().flatten().flatten().for_each(|v| *v = v.max(0.0));
        x
    }

    pub fn pool(x: &Img) -> Img {
        x.iter()
            .map(|p| {
                (0..p.len() / 2)
                    .map(|r| {
                        (0..p[0].len() / 2)
                            .map(|c| {
                                p[2 * r][2 * c]
                                    .max(p[2 * r][2 * c + 1])
                                    .max(p[2 * r + 1][2 * c])
                                    .max(p[2 * r + 1][2 * c + 1])
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Weight layout (cin, cout, 2, 2).
    pub fn up(x: &Img, w: &[f32], b: &[f32], cout: usize) -> Img {
        let (cin, h, wd) = (x.len(), x[0].len(), x[0][0].len());
        let mut y = vec![vec![vec![0.0; 2 * wd]; 2 * h]; cout];
        for o in 0..cout {
            for r in 0..2 * h {
                for c in 0..2 * wd {
                    let mut acc = b[o] as f64;
                    for i in 0..cin {
                        acc += w[((i * cout + o) * 2 + r % 2) * 2 + c % 2] as f64 * x[i][r / 2][c / 2];
                    }
                    y[o][r][c] = acc;
                }
            }
        }
        y
    }
}

fn tensor_to_img(t: &Tensor3<f32>) -> naive::Img {
    (0..t.c)
        .map(|ch| (0..t.h).map(|r| (0..t.w).map(|c| t.at(ch, r, c) as f64).collect()).collect())
        .collect()
}

fn depth1_oracle(x: &naive::Img, w: &OperatorWeights) -> naive::Img {
    let g = |n: &str| &w.get(n).unwrap().values[..];
    let cfg = &w.config;
    let (c0, c1) = (cfg.channels(0), cfg.channels(1));
    let conv = |x: &naive::Img, name: &str, cout: usize, k: usize| {
        naive::conv(x, g(&format!("{name}.weight")), g(&format!("{name}.bias")), cout, k)
    };
    let e = naive::relu(conv(&naive::relu(conv(x, "enc0.conv1", c0, 3)), "enc0.conv2", c0, 3));
    let p = naive::pool(&e);
    let bn = naive::relu(conv(&naive::relu(conv(&p, "bottleneck.conv1", c1, 3)), "bottleneck.conv2", c1, 3));
    let u = naive::up(&bn, g("dec0.up.weight"), g("dec0.up.bias"), c0);
    let cat: naive::Img = e.into_iter().chain(u).collect();
    let d = naive::relu(conv(&naive::relu(conv(&cat, "dec0.conv1", c0, 3)), "dec0.conv2", c0, 3));
    conv(&d, "head", 2, 1)
}

#[test]
fn forward_matches_naive_convolution() {
    let w = OperatorWeights::init(&small_config(1, 4), 3).unwrap();
    let x = random_input::<f32>(6, 10, 1);
    let fast = UNet::<f32>::from_weights(&w).unwrap().forward(&x).unwrap();
    let slow = depth1_oracle(&tensor_to_img(&x), &w);
    let flat: Vec<f64> = slow.iter().flatten().flatten().copied().collect();
    let scale = flat.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = fast.data.iter().zip(&flat).fold(0.0f64, |m, (a, b)| m.max((*a as f64 - b).abs()));
    assert!(scale > 0.0);
    assert!(err <= 1e-5 * scale, "relative error {}", err / scale);
}

/// `sum(upstream * net(x))` through a float-64 copy of the weights.
fn probe_loss(net: &UNet<f64>, x: &Tensor3<f64>, upstream: &Tensor3<f64>) -> f64 {
    let y = net.forward(x).unwrap();
    y.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum()
}

fn finite_difference_grads(weights: &OperatorWeights, x: &Tensor3<f64>, upstream: &Tensor3<f64>) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut net = UNet::<f64>::from_weights(weights).unwrap();
    let h = 1e-6;
    let mut wgrads = Vec::new();
    for t in 0..net.params().len() {
        let mut g = Vec::with_capacity(net.params()[t].len());
        for i in 0..net.params()[t].len() {
            let v = net.params()[t][i];
            net.params_mut()[t][i] = v + h;
            let lp = probe_loss(&net, x, upstream);
            net.params_mut()[t][i] = v - h;
            let lm = probe_loss(&net, x, upstream);
            net.params_mut()[t][i] = v;
            g.push((lp - lm) / (2.0 * h));
        }
        wgrads.push(g);
    }
    let mut xg = Vec::with_capacity(x.data.len());
    let mut xp = x.clone();
    for i in 0..x.data.len() {
        let v = x.data[i];
        xp.data[i] = v + h;
        let lp = probe_loss(&net, &xp, upstream);
        xp.data[i] = v - h;
        let lm = probe_loss(&net, &xp, upstream);
        xp.data[i] = v;
        xg.push((lp - lm) / (2.0 * h));
    }
    (wgrads, xg)
}

fn rel_err(analytic: impl Iterator<Item = f64>, numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = analytic.zip(numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    err / scale
}

#[test]
fn backward_matches_finite_differences() {
    let w = OperatorWeights::init(&small_config(2, 2), 11).unwrap();
    let x = random_input::<f64>(8, 4, 5);
    let upstream = random_input::<f64>(8, 4, 6);
    let (num_w, num_x) = finite_difference_grads(&w, &x, &upstream);
    let flat_num_w: Vec<f64> = num_w.iter().flatten().copied().collect();

    let net64 = UNet::<f64>::from_weights(&w).unwrap();
    let (_, cache) = net64.forward_cached(&x).unwrap();
    let mut g64 = net64.zero_grads();
    let gx64 = net64.backward(&cache, &upstream, &mut g64).unwrap();
    assert!(rel_err(g64.iter().flatten().copied(), &flat_num_w) <= 1e-6);
    assert!(rel_err(gx64.data.iter().copied(), &num_x) <= 1e-6);

    let net32 = UNet::<f32>::from_weights(&w).unwrap();
    let x32 = x.cast::<f32>();
    let up32 = upstream.cast::<f32>();
    let (_, cache) = net32.forward_cached(&x32).unwrap();
    let mut g32 = net32.zero_grads();
    let gx32 = net32.backward(&cache, &up32, &mut g32).unwrap();
    assert!(rel_err(g32.iter().flatten().map(|&v| v as f64), &flat_num_w) <= 1e-3);
    assert!(rel_err(gx32.data.iter().map(|&v| v as f64), &num_x) <= 1e-3);
}

#[test]
fn output_tracks_input_size() {
    let w = OperatorWeights::init(&UNetConfig::desk(), 0).unwrap();
    let net = UNet::<f32>::from_weights(&w).unwrap();
    for (h, wd) in [(4, 4), (8, 12), (16, 4), (20, 28), (32, 32), (12, 64)] {
        let y = net.forward(&random_input(h, wd, 0)).unwrap();
        assert_eq!(y.shape(), (2, h, wd));
    }
    assert!(net.forward(&random_input(6, 8, 0)).is_err());
    let op = UNetOperator::new(&w).unwrap();
    for (h, wd) in [(13, 7), (1, 1), (5, 9)] {
        let g = ComplexGrid::from_fn(h, wd, |r, c| Complex64::new(r as f64, c as f64 + 1.0));
        assert_eq!(op.apply(&g).unwrap().shape(), (h, wd));
    }
}

#[test]
fn weights_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let w = OperatorWeights::init(&UNetConfig::desk(), 42).unwrap();
    save_weights(dir.path(), &w).unwrap();
    let back = load_weights(dir.path()).unwrap();
    assert_eq!(back.config, w.config);
    for (a, b) in w.tensors.iter().zip(&back.tensors) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.shape, b.shape);
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let bin = std::fs::read(dir.path().join("weights.bin")).unwrap();
    assert_eq!(bin.len(), 4 * w.param_count());
    let dir2 = tempfile::tempdir().unwrap();
    save_weights(dir2.path(), &back).unwrap();
    assert_eq!(bin, std::fs::read(dir2.path().join("weights.bin")).unwrap());
}

#[test]
fn corrupt_weights_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_weights(dir.path(), &OperatorWeights::init(&small_config(1, 2), 0).unwrap()).unwrap();
    let bin = dir.path().join("weights.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
    assert!(load_weights(dir.path()).is_err());
}

#[test]
fn identity_task_validation_improves() {
    let unet = small_config(1, 4);
    let cfg = TrainConfig {
        patch_size: 16,
        patches_per_dataset: 4,
        epochs: 15,
        lr: 3e-3,
        ..Default::default()
    };
    let mut pairs: Vec<TrainingPair> = Vec::new();
    for d in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(d);
        let field = ComplexGrid::from_fn(32, 32, |_, _| Complex64::from_polar(rng.random_range(0.5..1.0), rng.random_range(-1.0..1.0)));
        let mut p = make_training_pairs(&field, &field, &cfg, d).unwrap();
        p.iter_mut().for_each(|q| q.dataset = d as usize);
        pairs.extend(p);
    }
    let out = train_operator(&pairs, &cfg, &unet).unwrap();
    let first = out.log.first().unwrap().val_loss.unwrap();
    let last = out.log.last().unwrap().val_loss.unwrap();
    assert!(last <= first, "validation {first} -> {last}");
    assert_eq!(out.val_datasets.len(), 1);
    assert_eq!(out.log.len(), 16);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn operator_is_scale_equivariant(alpha in 0.01f64..100.0, seed in any::<u64>()) {
        let w = OperatorWeights::init(&small_config(1, 2), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = ComplexGrid::from_fn(6, 10, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let net = UNet::<f32>::from_weights(&w).unwrap();
        let a = ff_apply(&g, &net).unwrap();
        let b = ff_apply(&g.map(|z| z * alpha), &net).unwrap();
        let scale = a.data().iter().fold(0.0f64, |m, z| m.max(z.norm())).max(1e-12);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x * alpha - y).norm() <= 1e-5 * alpha * scale);
        }
    }
}
