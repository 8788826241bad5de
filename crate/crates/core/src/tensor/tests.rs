use super::*;
use crate::error::Error;

fn assert_close(a: &[f32], b: &[f32], tol: f32) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "index {i}: {x} vs {y} (tol {tol})"
        );
    }
}

/// Six-nested-loop reference convolution, independent of the im2col path.
fn conv2d_oracle(
    x: &[f32],
    w: &[f32],
    b: usize,
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let hout = (h + 2 * pad - kh) / stride + 1;
    let wout = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; b * o * hout * wout];
    for bi in 0..b {
        for oi in 0..o {
            for oy in 0..hout {
                for ox in 0..wout {
                    let mut acc = 0.0f32;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w[((oi * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * o + oi) * hout + oy) * wout + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = Rng::new(1);
    let x = rng.normal_tensor(&[2, 3, 5, 5]);
    // 1x1 kernel with identity channel mixing
    let mut k = vec![0.0f32; 3 * 3];
    for i in 0..3 {
        k[i * 3 + i] = 1.0;
    }
    let kernel = Tensor::new(&[3, 3, 1, 1], k).unwrap();
    let y = x.conv2d(&kernel, None, 1, 0).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn conv2d_zero_kernel() {
    let mut rng = Rng::new(2);
    let x = rng.normal_tensor(&[1, 2, 4, 4]);
    let kernel = Tensor::zeros(&[3, 2, 3, 3]);
    let y = x.conv2d(&kernel, None, 1, 1).unwrap();
    assert!(y.to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut rng = Rng::new(3);
    let x = rng.normal_tensor(&[2, 3, 5, 5]);
    let w = rng.normal_tensor(&[4, 3, 3, 3]);
    let y = x.conv2d(&w, None, 1, 1).unwrap();
    let expect = conv2d_oracle(&x.to_vec(), &w.to_vec(), 2, 3, 5, 5, 4, 3, 3, 1, 1);
    assert_close(&y.to_vec(), &expect, 1e-5);
    // and a strided case
    let y2 = x.conv2d(&w, None, 2, 1).unwrap();
    let expect2 = conv2d_oracle(&x.to_vec(), &w.to_vec(), 2, 3, 5, 5, 4, 3, 3, 2, 1);
    assert_eq!(y2.shape(), &[2, 4, 3, 3]);
    assert_close(&y2.to_vec(), &expect2, 1e-5);
}

#[test]
fn conv2d_shape_mismatch_reports_axes() {
    let x = Tensor::zeros(&[1, 3, 4, 4]);
    let w = Tensor::zeros(&[2, 4, 3, 3]);
    let err = x.conv2d(&w, None, 1, 1).unwrap_err();
    match err {
        Error::Shape { msg, .. } => assert!(msg.contains("3") && msg.contains("4"), "{msg}"),
        other => panic!("expected shape error, got {other}"),
    }
}

#[test]
fn conv1d_identity_and_center_tap() {
    let mut rng = Rng::new(4);
    let x = rng.normal_tensor(&[2, 3, 7]);
    let mut k = vec![0.0f32; 3 * 3];
    for i in 0..3 {
        k[i * 3 + i] = 1.0;
    }
    let kernel = Tensor::new(&[3, 3, 1], k).unwrap();
    let y = x.conv1d(&kernel, None, 0).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());

    // N=1 with zero-padded k=3: only the center tap touches the single frame
    let x1 = rng.normal_tensor(&[1, 2, 1]);
    let k3 = rng.normal_tensor(&[2, 2, 3]);
    let y1 = x1.conv1d(&k3, None, 1).unwrap();
    let xk = x1.to_vec();
    let kd = k3.to_vec();
    let mut expect = vec![0.0f32; 2];
    for o in 0..2 {
        for c in 0..2 {
            expect[o] += xk[c] * kd[(o * 2 + c) * 3 + 1];
        }
    }
    assert_close(&y1.to_vec(), &expect, 1e-6);
}

#[test]
fn conv1d_matches_loop_oracle() {
    let mut rng = Rng::new(5);
    let x = rng.normal_tensor(&[2, 3, 6]);
    let w = rng.normal_tensor(&[4, 3, 3]);
    let y = x.conv1d(&w, None, 1).unwrap();
    let xd = x.to_vec();
    let wd = w.to_vec();
    let mut expect = vec![0.0f32; 2 * 4 * 6];
    for b in 0..2 {
        for o in 0..4 {
            for t in 0..6 {
                let mut acc = 0.0f32;
                for c in 0..3 {
                    for k in 0..3 {
                        let idx = t as isize + k as isize - 1;
                        if idx < 0 || idx >= 6 {
                            continue;
                        }
                        acc += xd[(b * 3 + c) * 6 + idx as usize] * wd[(o * 3 + c) * 3 + k];
                    }
                }
                expect[(b * 4 + o) * 6 + t] = acc;
            }
        }
    }
    assert_close(&y.to_vec(), &expect, 1e-5);
}

#[test]
fn attention_single_key_broadcasts_value() {
    let mut rng = Rng::new(6);
    let q = rng.normal_tensor(&[1, 4, 3]);
    let k = rng.normal_tensor(&[1, 1, 3]);
    let v = rng.normal_tensor(&[1, 1, 3]);
    let y = Tensor::attention(&q, &k, &v).unwrap();
    let vd = v.to_vec();
    for row in 0..4 {
        assert_close(&y.to_vec()[row * 3..(row + 1) * 3], &vd, 1e-6);
    }
}

#[test]
fn attention_uniform_logits_average_values() {
    // q orthogonal to every key -> logits all zero -> mean of v rows
    let q = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.5, 0.0]).unwrap();
    let k = Tensor::new(&[1, 3, 2], vec![0.0, 1.0, 0.0, -2.0, 0.0, 0.7]).unwrap();
    let v = Tensor::new(&[1, 3, 2], vec![3.0, 0.0, 0.0, 6.0, 3.0, 0.0]).unwrap();
    let y = Tensor::attention(&q, &k, &v).unwrap();
    assert_close(&y.to_vec(), &[2.0, 2.0, 2.0, 2.0], 1e-5);
}

#[test]
fn attention_matches_softmax_oracle() {
    let mut rng = Rng::new(7);
    let q = rng.normal_tensor(&[1, 3, 4]);
    let k = rng.normal_tensor(&[1, 3, 4]);
    let v = rng.normal_tensor(&[1, 3, 4]);
    let y = Tensor::attention(&q, &k, &v).unwrap();

    let (qd, kd, vd) = (q.to_vec(), k.to_vec(), v.to_vec());
    let scale = 1.0 / 2.0; // 1/sqrt(4)
    let mut expect = vec![0.0f32; 3 * 4];
    for i in 0..3 {
        let mut logits = [0.0f32; 3];
        for j in 0..3 {
            let mut dot = 0.0;
            for d in 0..4 {
                dot += qd[i * 4 + d] * kd[j * 4 + d];
            }
            logits[j] = dot * scale;
        }
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f32 = exps.iter().sum();
        for d in 0..4 {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += exps[j] / sum * vd[j * 4 + d];
            }
            expect[i * 4 + d] = acc;
        }
    }
    assert_close(&y.to_vec(), &expect, 1e-5);
}

#[test]
fn attention_dim_mismatch_is_error() {
    let q = Tensor::zeros(&[1, 2, 3]);
    let k = Tensor::zeros(&[1, 2, 4]);
    let v = Tensor::zeros(&[1, 2, 4]);
    assert!(Tensor::attention(&q, &k, &v).is_err());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = Rng::new(8);
    let x = rng.normal_tensor(&[5, 7]);
    let y = x.softmax_last().unwrap();
    let yd = y.to_vec();
    for r in 0..5 {
        let s: f32 = yd[r * 7..(r + 1) * 7].iter().sum();
        assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
    }
}

#[test]
fn rearrange_shapes_match_layout_rules() {
    let mut rng = Rng::new(9);
    let x = rng.normal_tensor(&[2, 8, 4, 16, 16]);
    let sp = x.rearrange_video(RearrangeMode::Spatial).unwrap();
    assert_eq!(sp.shape(), &[16, 4, 16, 16]);
    // (b*h*w) = 2*16*16 = 512 rows for the temporal layouts
    let tc = x.rearrange_video(RearrangeMode::TemporalConv).unwrap();
    assert_eq!(tc.shape(), &[512, 4, 8]);
    let ta = x.rearrange_video(RearrangeMode::TemporalAttn).unwrap();
    assert_eq!(ta.shape(), &[512, 8, 4]);
}

#[test]
fn rearrange_round_trip_is_bit_identical() {
    let mut rng = Rng::new(10);
    let x = rng.normal_tensor(&[2, 3, 4, 5, 6]);
    for mode in [RearrangeMode::Spatial, RearrangeMode::TemporalConv, RearrangeMode::TemporalAttn] {
        let back = x
            .rearrange_video(mode)
            .unwrap()
            .rearrange_video_inverse(mode, (2, 3, 4, 5, 6))
            .unwrap();
        let a: Vec<u32> = x.to_vec().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.to_vec().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "mode {mode:?}");
    }
}

#[test]
fn rearrange_rejects_wrong_rank() {
    let x = Tensor::zeros(&[2, 3, 4, 5]);
    assert!(x.rearrange_video(RearrangeMode::Spatial).is_err());
}

#[test]
fn backward_sum_gives_ones() {
    let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let loss = x.sum_all().unwrap();
    backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn backward_square_gives_2x() {
    let x = Tensor::param(&[1], vec![3.0]).unwrap();
    let loss = x.mul(&x).unwrap().sum_all().unwrap();
    backward(&loss).unwrap();
    assert_close(&x.grad().unwrap(), &[6.0], 1e-6);
}

#[test]
fn backward_twice_is_error() {
    let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    let loss = x.sum_all().unwrap();
    backward(&loss).unwrap();
    assert!(backward(&loss).is_err());
}

#[test]
fn backward_requires_scalar_loss() {
    let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    let y = x.mul_scalar(2.0).unwrap();
    assert!(backward(&y).is_err());
}

#[test]
fn no_grad_suppresses_tape() {
    let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    let y = no_grad(|| x.mul_scalar(2.0).unwrap());
    assert!(!y.tracked());
}

#[test]
fn adam_zero_gradient_keeps_params() {
    let p = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let mut opt = Adam::new(&[p.clone()], 0.1);
    // no backward ran: grad is empty = zero
    opt.step(&[p.clone()]).unwrap();
    assert_eq!(p.to_vec(), vec![1.0, -2.0, 0.5]);
    assert!(opt.first_moments()[0].iter().all(|&m| m == 0.0));
}

#[test]
fn adam_single_step_matches_hand_calculation() {
    let p = Tensor::param(&[1], vec![0.7]).unwrap();
    let g = 0.3f32;
    *p.inner.grad.borrow_mut() = Some(vec![g]);
    let (lr, b1, b2, eps) = (0.01f32, 0.9f32, 0.999f32, 1e-8f32);
    let mut opt = Adam::with_betas(&[p.clone()], lr, b1, b2, eps);
    opt.step(&[p.clone()]).unwrap();
    // m_hat = g, v_hat = g^2 -> delta = lr * g / (|g| + eps)
    let expect = 0.7 - lr * g / (g.abs() + eps);
    assert_close(&p.to_vec(), &[expect], 1e-7);
}

#[test]
fn adam_converges_on_quadratic() {
    let p = Tensor::param(&[1], vec![3.0]).unwrap();
    let mut opt = Adam::new(&[p.clone()], 0.05);
    for _ in 0..1000 {
        opt.zero_grad(&[p.clone()]);
        let loss = p.mul(&p).unwrap().sum_all().unwrap();
        backward(&loss).unwrap();
        opt.step(&[p.clone()]).unwrap();
    }
    assert!(p.to_vec()[0].abs() < 1e-2, "x = {}", p.to_vec()[0]);
}

#[test]
fn checkpoint_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.ckpt");
    let mut rng = Rng::new(11);
    let a = rng.normal_tensor(&[2, 3, 4]);
    let b = rng.normal_tensor(&[7]);
    save_checkpoint(&path, &[("unet.a".into(), a.clone()), ("codec.b".into(), b.clone())]).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let (sa, da) = ck.get("unet.a").unwrap();
    assert_eq!(sa.as_slice(), a.shape());
    let bits_a: Vec<u32> = a.to_vec().iter().map(|v| v.to_bits()).collect();
    let bits_l: Vec<u32> = da.iter().map(|v| v.to_bits()).collect();
    assert_eq!(bits_a, bits_l);
    let (sb, _) = ck.get("codec.b").unwrap();
    assert_eq!(sb.as_slice(), b.shape());
    assert!(ck.get("missing").is_err());
}

#[test]
fn rng_is_deterministic_and_streams_are_isolated() {
    let mut a = Rng::new(42).substream("noise");
    let mut b = Rng::new(42).substream("noise");
    let xs: Vec<f32> = (0..16).map(|_| a.normal()).collect();
    let ys: Vec<f32> = (0..16).map(|_| b.normal()).collect();
    assert_eq!(
        xs.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        ys.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );

    // draws on one stream do not shift another
    let mut data1 = Rng::new(42).substream("data");
    let first = data1.normal();
    let mut root = Rng::new(42);
    let mut noise = root.substream("noise");
    for _ in 0..100 {
        noise.normal();
    }
    let mut data2 = root.substream("data");
    assert_eq!(first.to_bits(), data2.normal().to_bits());
}

#[test]
fn checked_mode_flags_non_finite() {
    set_checked(true);
    let x = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
    let y = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
    let err = x.div(&y).unwrap_err();
    match err {
        Error::Numeric(msg) => assert!(msg.contains("div")),
        other => panic!("expected numeric error, got {other}"),
    }
    set_checked(false);
    assert!(x.div(&y).is_ok());
    set_checked(true);
}

#[test]
fn concat_split_round_trip() {
    let mut rng = Rng::new(12);
    let a = rng.normal_tensor(&[2, 3, 4]);
    let b = rng.normal_tensor(&[2, 2, 4]);
    let cat = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
    assert_eq!(cat.shape(), &[2, 5, 4]);
    let parts = cat.split(1, &[3, 2]).unwrap();
    assert_eq!(parts[0].to_vec(), a.to_vec());
    assert_eq!(parts[1].to_vec(), b.to_vec());
}

#[test]
fn index_select_gathers_rows() {
    let x = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let y = x.index_select0(&[2, 0, 2]).unwrap();
    assert_eq!(y.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    assert!(x.index_select0(&[3]).is_err());
}

#[test]
fn gaussian_blur_preserves_constant_maps() {
    let x = Tensor::full(&[1, 1, 8, 8], 0.37);
    let y = x.gaussian_blur2d(5, 1.0).unwrap();
    for &v in y.to_vec().iter() {
        assert!((v - 0.37).abs() < 1e-6);
    }
}

#[test]
fn upsample_then_avgpool_is_identity() {
    let mut rng = Rng::new(13);
    let x = rng.normal_tensor(&[1, 2, 3, 3]);
    let y = x.upsample_nearest2d(2).unwrap().avgpool2d(2).unwrap();
    assert_close(&y.to_vec(), &x.to_vec(), 1e-6);
}
