use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check_at;
use crate::params::{bind_const, bind_leaf, normal_init};

fn cfg4() -> FusionConfig {
    FusionConfig {
        channels: 4,
        heads: 2,
        feature_hw: (8, 8),
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    normal_init(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Every tensor drawn at random so that no branch is switched off.
fn random_params(cfg: &FusionConfig, seed: u64) -> FusionParams<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cfg.shapes()
        .try_map(|name, s| {
            let t: Tensor<f64> = normal_init(s, 0.3, &mut rng);
            Ok::<_, Error>(if name.starts_with("ln_") && name.ends_with("_g") {
                t.map(|v| 1.0 + v)
            } else {
                t
            })
        })
        .unwrap()
}

/// Direct sliding-window correlation with zero padding.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize, groups: usize) -> Tensor<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, cpg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let opg = cout / groups;
    assert_eq!(cpg * groups, cin);
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for co in 0..cout {
        let g = co / opg;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = b[co];
                for ci in 0..cpg {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (oy * stride + dy) as isize - pad as isize;
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xi = ((g * cpg + ci) * h + iy as usize) * wd + ix as usize;
                            let wi = ((co * cpg + ci) * kh + dy) * kw + dx;
                            s += x.data()[xi] * w.data()[wi];
                        }
                    }
                }
                out.data_mut()[(co * oh + oy) * ow + ox] = s;
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn dw_proj_zero_kernel_is_identity() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(randn(&[4, 8, 8], 1)).unwrap();
    let w = tape.constant(Tensor::zeros(&[4, 1, 3, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[4])).unwrap();
    let y = dw_proj(&tape, x, w, b).unwrap();
    assert_eq!(tape.shape(y), vec![4, 8, 8]);
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn dw_proj_matches_sliding_window() {
    let tape = Tape::<f64>::new();
    let (xt, wt, bt) = (randn(&[3, 6, 5], 2), randn(&[3, 1, 3, 3], 3), randn(&[3], 4));
    let (x, w, b) = (
        tape.constant(xt.clone()).unwrap(),
        tape.constant(wt.clone()).unwrap(),
        tape.constant(bt.clone()).unwrap(),
    );
    let y = tape.value(dw_proj(&tape, x, w, b).unwrap());
    let mut expect = conv_oracle(&xt, &wt, bt.data(), 1, 1, 3);
    expect.add_assign(&xt).unwrap();
    assert!(y.max_abs_diff(&expect) < 1e-5);
    // wrong kernel shape
    let bad = tape.constant(Tensor::zeros(&[2, 1, 3, 3])).unwrap();
    assert!(dw_proj(&tape, x, bad, b).is_err());
}

#[test]
fn osr_shapes_and_delta_kernel() {
    let tape = Tape::<f64>::new();
    let xt = randn(&[2, 8, 8], 5);
    let x = tape.constant(xt.clone()).unwrap();
    let mut delta = Tensor::zeros(&[2, 2, 3, 3]);
    for c in 0..2 {
        delta.data_mut()[(c * 2 + c) * 9 + 4] = 1.0;
    }
    let w = tape.constant(delta).unwrap();
    let b = tape.constant(Tensor::zeros(&[2])).unwrap();
    let y = tape.value(osr(&tape, x, w, b).unwrap());
    assert_eq!(y.shape(), &[2, 4, 4]);
    let sub = tape.value(subsample2(&tape, x).unwrap());
    for c in 0..2 {
        for i in 0..4 {
            for j in 0..4 {
                let v = xt.data()[(c * 8 + 2 * i) * 8 + 2 * j];
                assert_eq!(y.data()[(c * 4 + i) * 4 + j], v);
                assert_eq!(sub.data()[(c * 4 + i) * 4 + j], v);
            }
        }
    }
    // odd sizes round up
    let x7 = tape.constant(randn(&[2, 7, 5], 6)).unwrap();
    assert_eq!(tape.shape(osr(&tape, x7, w, b).unwrap()), vec![2, 4, 3]);
    let tiny = tape.constant(randn(&[2, 1, 5], 6)).unwrap();
    assert!(osr(&tape, tiny, w, b).is_err());
}

#[test]
fn osr_outputs_overlap() {
    let tape = Tape::<f64>::new();
    let xt = randn(&[1, 8, 8], 7);
    let w = tape.constant(randn(&[1, 1, 3, 3], 8).map(|v| v.abs() + 0.1)).unwrap();
    let b = tape.constant(Tensor::zeros(&[1])).unwrap();
    let base = tape.value(osr(&tape, tape.constant(xt.clone()).unwrap(), w, b).unwrap());
    let mut bumped = xt.clone();
    bumped.data_mut()[3 * 8 + 3] += 1.0;
    let moved = tape.value(osr(&tape, tape.constant(bumped).unwrap(), w, b).unwrap());
    let changed = base.data().iter().zip(moved.data()).filter(|(a, b)| a != b).count();
    assert!(changed >= 2, "only {changed} tokens responded");
}

#[test]
fn zero_queries_average_values() {
    let tape = Tape::<f64>::new();
    let q = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
    let k = tape.constant(randn(&[5, 4], 9)).unwrap();
    let vt = randn(&[5, 4], 10);
    let v = tape.constant(vt.clone()).unwrap();
    let b = tape.constant(Tensor::zeros(&[3, 5])).unwrap();
    let z = tape.value(attend(&tape, q, k, v, b).unwrap());
    for c in 0..4 {
        let mean = (0..5).map(|r| vt.data()[r * 4 + c]).sum::<f64>() / 5.0;
        for r in 0..3 {
            assert!((z.data()[r * 4 + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn single_key_returns_its_value() {
    let tape = Tape::<f64>::new();
    let q = tape.constant(randn(&[6, 2], 11)).unwrap();
    let k = tape.constant(randn(&[1, 2], 12)).unwrap();
    let vt = randn(&[1, 2], 13);
    let v = tape.constant(vt.clone()).unwrap();
    let b = tape.constant(randn(&[6, 1], 14)).unwrap();
    let z = tape.value(attend(&tape, q, k, v, b).unwrap());
    for r in 0..6 {
        assert!((z.data()[2 * r] - vt.data()[0]).abs() < 1e-12);
        assert!((z.data()[2 * r + 1] - vt.data()[1]).abs() < 1e-12);
    }
}

#[test]
fn two_by_two_attention_by_hand() {
    let tape = Tape::<f64>::new();
    let t = |d: &[f64]| tape.constant(Tensor::new(&[2, 2], d.to_vec()).unwrap()).unwrap();
    let z = attend(&tape, t(&[1., 0., 0., 1.]), t(&[1., 0., 0., 2.]), t(&[1., 2., 3., 4.]), t(&[0., 0.5, -0.5, 0.]))
        .unwrap();
    // softmax([1/√2, 0.5]) and softmax([-0.5, 2/√2]) applied to V, evaluated in closed form
    let expect = [1.8968151734510592, 2.896815173451059, 2.7429835601416097, 3.7429835601416097];
    for (a, b) in tape.value(z).data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn attention_rows_sum_to_one_and_keys_permute() {
    let tape = Tape::<f64>::new();
    let (qt, kt, vt, bt) = (randn(&[4, 3], 15), randn(&[6, 3], 16), randn(&[6, 3], 17), randn(&[4, 6], 18));
    let w = tape.value(
        attention_weights(
            &tape,
            tape.constant(qt.clone()).unwrap(),
            tape.constant(kt.clone()).unwrap(),
            tape.constant(bt.clone()).unwrap(),
        )
        .unwrap(),
    );
    for r in w.data().chunks(6) {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(r.iter().all(|&v| v >= 0.0));
    }
    let perm = [3, 0, 5, 1, 4, 2];
    let rows = |t: &Tensor<f64>| Tensor::from_fn(t.shape(), |i| t.data()[perm[i / 3] * 3 + i % 3]);
    let cols = Tensor::from_fn(&[4, 6], |i| bt.data()[(i / 6) * 6 + perm[i % 6]]);
    let run = |k: Tensor<f64>, v: Tensor<f64>, b: Tensor<f64>| {
        let tape = Tape::<f64>::new();
        let z = attend(
            &tape,
            tape.constant(qt.clone()).unwrap(),
            tape.constant(k).unwrap(),
            tape.constant(v).unwrap(),
            tape.constant(b).unwrap(),
        )
        .unwrap();
        tape.value(z)
    };
    let a = run(kt.clone(), vt.clone(), bt.clone());
    let b = run(rows(&kt), rows(&vt), cols);
    assert!(a.max_abs_diff(&b) < 1e-6);
}

#[test]
fn relative_index_is_one_hot_per_pair() {
    let m: Tensor<f64> = relative_index_matrix((3, 2), (3, 2));
    let (slots, pairs) = (m.shape()[0], m.shape()[1]);
    assert_eq!(slots, 5 * 3);
    for p in 0..pairs {
        let col: f64 = (0..slots).map(|s| m.data()[s * pairs + p]).sum();
        assert_eq!(col, 1.0);
    }
    // the zero offset sits in the middle slot for every diagonal pair
    let mid = 2 * 3 + 1;
    for t in 0..6 {
        assert_eq!(m.data()[mid * pairs + t * 6 + t], 1.0);
    }
}

#[test]
fn upsampling_preserves_constants() {
    let u: Tensor<f64> = upsample_matrix((4, 4), (8, 8));
    for c in 0..64 {
        let s: f64 = (0..16).map(|r| u.data()[r * 64 + c]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let id: Tensor<f64> = upsample_matrix((3, 5), (3, 5));
    for i in 0..15 {
        for j in 0..15 {
            assert_eq!(id.data()[i * 15 + j], if i == j { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn ddf_zero_inputs_give_zero() {
    let cfg = cfg4();
    let params = cfg.init::<f64>(1).unwrap();
    let tape = Tape::<f64>::new();
    let p = params.try_map(bind_const(&tape)).unwrap();
    let z = tape.constant(Tensor::zeros(&[4, 8, 8])).unwrap();
    let out = ddf(&tape, z, z, &p).unwrap();
    assert_eq!(tape.shape(out), vec![4, 8, 8]);
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

/// Step-by-step transcription of the three gate equations.
fn ddf_oracle(fs: &Tensor<f64>, fg: &Tensor<f64>, p: &FusionParams<Tensor<f64>>) -> Tensor<f64> {
    let (c, h, w) = (fs.shape()[0], fs.shape()[1], fs.shape()[2]);
    let n = h * w;
    let pooled: Vec<f64> = (0..c)
        .map(|ch| (0..n).map(|i| fs.data()[ch * n + i] + fg.data()[ch * n + i]).sum::<f64>() / n as f64)
        .collect();
    let gate: Vec<f64> = (0..c)
        .map(|o| sigmoid((0..c).map(|i| pooled[i] * p.ddf_gamma_w.data()[i * c + o]).sum::<f64>() + p.ddf_gamma_b.data()[o]))
        .collect();
    let pair = Tensor::from_fn(&[2 * c, h, w], |i| {
        let ch = i / n;
        if ch < c {
            gate[ch] * fs.data()[i]
        } else {
            (1.0 - gate[ch - c]) * fg.data()[i - c * n]
        }
    });
    let mix = conv_oracle(&pair, &p.ddf_fuse_w, p.ddf_fuse_b.data(), 1, 1, 1);
    let mpool: Vec<f64> = (0..c).map(|ch| mix.data()[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let adapt: Vec<f64> = (0..c)
        .map(|o| sigmoid((0..c).map(|i| p.ddf_adapt_w.data()[o * c + i] * mpool[i]).sum::<f64>() + p.ddf_adapt_b.data()[o]))
        .collect();
    Tensor::from_fn(&[c, h, w], |i| adapt[i / n] * mix.data()[i])
}

#[test]
fn ddf_matches_transcription() {
    let cfg = FusionConfig {
        channels: 2,
        heads: 1,
        feature_hw: (4, 4),
    };
    let params = random_params(&cfg, 21);
    let (fs, fg) = (randn(&[2, 4, 4], 22), randn(&[2, 4, 4], 23));
    let tape = Tape::<f64>::new();
    let p = params.try_map(bind_const(&tape)).unwrap();
    let out = ddf(&tape, tape.constant(fs.clone()).unwrap(), tape.constant(fg.clone()).unwrap(), &p).unwrap();
    assert!(tape.value(out).max_abs_diff(&ddf_oracle(&fs, &fg, &params)) < 1e-6);
    let other = tape.constant(randn(&[2, 4, 3], 24)).unwrap();
    assert!(ddf(&tape, tape.constant(fs).unwrap(), other, &p).is_err());
}

#[test]
fn zero_params_block_is_identity() {
    let cfg = cfg4();
    let params = cfg.shapes().try_map(|_, s| Ok::<_, Error>(Tensor::<f64>::zeros(s))).unwrap();
    let tape = Tape::<f64>::new();
    let p = params.try_map(bind_const(&tape)).unwrap();
    let xs = tape.constant(randn(&[4, 8, 8], 31)).unwrap();
    let xb = tape.constant(randn(&[4, 8, 8], 32)).unwrap();
    let out = gt_fusion_forward(&tape, xs, xb, &p, &cfg).unwrap();
    assert_eq!(tape.value(out), tape.value(xs));
}

#[test]
fn initial_block_injects_aligned_bev_features() {
    let cfg = cfg4();
    let params = cfg.init::<f64>(3).unwrap();
    let tape = Tape::<f64>::new();
    let p = params.try_map(bind_const(&tape)).unwrap();
    let xs = tape.constant(randn(&[4, 8, 8], 31)).unwrap();
    let xb = tape.constant(randn(&[4, 8, 8], 32)).unwrap();
    // tokens are plain subsamples at init, so Q and K are tiny and the
    // zero-offset bias decides the attention
    let z = cross_attention(&tape, xs, xb, &p, &cfg).unwrap();
    let tokens = reduce_tokens(&tape, xb, p.osr_kv_w, p.osr_kv_b, p.ln_kv_g, p.ln_kv_b).unwrap();
    let tokens = tape.value(tokens);
    let z = tape.value(z);
    // upsampled value at the centre of each reduced cell's top-left pixel
    let mut agree = 0;
    for r in 0..4 {
        for c in 0..4 {
            let tok = &tokens.data()[(r * 4 + c) * 4..(r * 4 + c + 1) * 4];
            let (y, x) = (2 * r, 2 * c);
            let zv: Vec<f64> = (0..4).map(|ch| z.data()[(ch * 8 + y) * 8 + x]).collect();
            let cos = tok.iter().zip(&zv).map(|(a, b)| a * b).sum::<f64>()
                / (tok.iter().map(|a| a * a).sum::<f64>().sqrt() * zv.iter().map(|a| a * a).sum::<f64>().sqrt());
            agree += (cos > 0.8) as usize;
        }
    }
    assert!(agree >= 14, "{agree} of 16 cells aligned");
    let out = gt_fusion_forward(&tape, xs, xb, &p, &cfg).unwrap();
    assert!(tape.value(out).max_abs_diff(&tape.value(xs)) > 1e-2);
}

#[test]
fn output_shape_follows_street_input() {
    let cfg = cfg4();
    let params = random_params(&cfg, 4);
    for (h, w) in [(8, 8), (6, 8), (5, 7)] {
        let tape = Tape::<f64>::new();
        let p = params.try_map(bind_const(&tape)).unwrap();
        let xs = tape.constant(randn(&[4, h, w], 33)).unwrap();
        let xb = tape.constant(randn(&[4, h, w], 34)).unwrap();
        let out = gt_fusion_forward(&tape, xs, xb, &p, &cfg).unwrap();
        assert_eq!(tape.shape(out), vec![4, h, w]);
    }
    let tape = Tape::<f64>::new();
    let p = params.try_map(bind_const(&tape)).unwrap();
    let big = tape.constant(randn(&[4, 10, 10], 35)).unwrap();
    assert!(gt_fusion_forward(&tape, big, big, &p, &cfg).is_err());
}

/// Projects the block output on a fixed random direction so every output
/// coordinate contributes to the scalar.
fn block_gradcheck(seed: u64) -> f64 {
    let cfg = cfg4();
    let params = random_params(&cfg, seed);
    let mut inputs = vec![randn(&[4, 8, 8], seed + 100), randn(&[4, 8, 8], seed + 200), randn(&[4, 8, 8], seed + 300)];
    inputs.extend(params.fields().into_iter().map(|(_, t)| t.clone()));
    grad_check_at(
        |tape, v| {
            let mut it = v[3..].iter().copied();
            let p = cfg.shapes().try_map(|_, _| Ok::<_, Error>(it.next().unwrap()))?;
            let out = gt_fusion_forward(tape, v[0], v[1], &p, &cfg)?;
            let proj = tape.mul(out, v[2])?;
            tape.sum(proj)
        },
        &inputs,
    )
    .unwrap()
}

#[test]
fn full_block_gradients_match_finite_differences() {
    for seed in [1, 2, 3] {
        let err = block_gradcheck(seed);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn every_parameter_gets_gradient() {
    let cfg = cfg4();
    let params = random_params(&cfg, 41);
    let tape = Tape::<f64>::new();
    let p = params.try_map(bind_leaf(&tape)).unwrap();
    let xs = tape.constant(randn(&[4, 8, 8], 42)).unwrap();
    let xb = tape.constant(randn(&[4, 8, 8], 43)).unwrap();
    let r = tape.constant(randn(&[4, 8, 8], 44)).unwrap();
    let out = gt_fusion_forward(&tape, xs, xb, &p, &cfg).unwrap();
    let root = tape.sum(tape.mul(out, r).unwrap()).unwrap();
    tape.backward(root).unwrap();
    for (name, &v) in p.fields() {
        let g = tape.grad(v).unwrap();
        assert!(g.data().iter().any(|&x| x != 0.0), "{name} has no gradient");
    }
}

#[test]
fn init_is_seeded_and_counted() {
    let cfg = FusionConfig {
        channels: 32,
        heads: 4,
        feature_hw: (8, 8),
    };
    assert_eq!(cfg.init::<f32>(5).unwrap(), cfg.init::<f32>(5).unwrap());
    let total: usize = cfg.init::<f32>(5).unwrap().fields().iter().map(|(_, t)| t.numel()).sum();
    assert_eq!(total, cfg.param_count());
    assert_eq!(cfg.bias_len(), 49);
    assert!(FusionConfig { heads: 3, ..cfg }.validate().is_err());
}
