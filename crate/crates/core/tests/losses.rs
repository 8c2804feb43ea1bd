mod common;

use common::*;
use qcatn::losses::{
    ac_loss, adv_loss_d, adv_loss_g, check_logits, rec_loss, self_similarity_map, similarity_of, ExtractorConfig,
    FeatureExtractor, PixelReduction,
};
use qcatn::model::DiscOutput;
use qcatn::nn::{Graph, Tensor};
use qcatn::Error;

const LN2: f64 = std::f64::consts::LN_2;

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn output<'g>(g: &'g Graph<f64>, global: &[f64], pixel: &Tensor<f64>) -> DiscOutput<'g, f64> {
    DiscOutput {
        global: g.constant(Tensor::new(&[global.len()], global.to_vec())),
        pixel: g.constant(pixel.clone()),
    }
}

fn small_extractor() -> FeatureExtractor<f64> {
    FeatureExtractor::new(ExtractorConfig {
        channels: vec![4, 8],
        stride: 1,
        patch: 4,
        seed: 3,
    })
    .unwrap()
}

#[test]
fn adversarial_losses_at_zero_logits() {
    let g = Graph::new();
    let zeros = Tensor::zeros(&[2, 1, 4, 4]);
    let real = output(&g, &[0.0, 0.0], &zeros);
    let fake = output(&g, &[0.0, 0.0], &zeros);
    for mode in [PixelReduction::MeanLogits, PixelReduction::MeanLosses] {
        let d = adv_loss_d(&real, &fake, mode).value().data[0];
        assert!((d - 2.0 * (2.0 * LN2)).abs() < 1e-12);
        let gl = adv_loss_g(&fake, mode).value().data[0];
        assert!((gl - 2.0 * LN2).abs() < 1e-12);
    }
}

#[test]
fn perfect_discrimination_limit() {
    let g = Graph::new();
    let real = output(&g, &[60.0], &Tensor::full(&[1, 1, 2, 2], 60.0));
    let fake = output(&g, &[-60.0], &Tensor::full(&[1, 1, 2, 2], -60.0));
    let d = adv_loss_d(&real, &fake, PixelReduction::MeanLogits).value().data[0];
    assert!(d >= 0.0 && d < 1e-20);
    // extreme logits stay finite
    let real = output(&g, &[1e4], &Tensor::full(&[1, 1, 2, 2], -1e4));
    let fake = output(&g, &[1e4], &Tensor::full(&[1, 1, 2, 2], -1e4));
    assert!(adv_loss_d(&real, &fake, PixelReduction::MeanLosses).value().data[0].is_finite());
}

#[test]
fn adversarial_losses_match_scalar_formula() {
    let mut r = rng(1);
    let g = Graph::new();
    let n = 3;
    let rg = random_tensor(&[n], &mut r).map(|v| 3.0 * v);
    let fg = random_tensor(&[n], &mut r).map(|v| 3.0 * v);
    let rp = random_tensor(&[n, 1, 4, 4], &mut r).map(|v| 3.0 * v);
    let fp = random_tensor(&[n, 1, 4, 4], &mut r).map(|v| 3.0 * v);
    let real = output(&g, &rg.data, &rp);
    let fake = output(&g, &fg.data, &fp);

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let pm = |t: &Tensor<f64>, b: usize| mean(&t.data[b * 16..(b + 1) * 16]);

    let mut d_global = 0.0;
    let mut d_pixel_logits = 0.0;
    let mut g_global = 0.0;
    let mut g_pixel_logits = 0.0;
    for b in 0..n {
        d_global += -(1.0 / (1.0 + (-rg.data[b]).exp())).ln() - (1.0 - 1.0 / (1.0 + (-fg.data[b]).exp())).ln();
        d_pixel_logits += softplus(-pm(&rp, b)) + softplus(pm(&fp, b));
        g_global += softplus(-fg.data[b]);
        g_pixel_logits += softplus(-pm(&fp, b));
    }
    let d_pixel_losses = (0..n * 16).map(|i| softplus(-rp.data[i])).sum::<f64>() / (n * 16) as f64
        + (0..n * 16).map(|i| softplus(fp.data[i])).sum::<f64>() / (n * 16) as f64;
    let nf = n as f64;

    let d = adv_loss_d(&real, &fake, PixelReduction::MeanLogits).value().data[0];
    assert!((d - (d_global + d_pixel_logits) / nf).abs() < 1e-12);
    let d = adv_loss_d(&real, &fake, PixelReduction::MeanLosses).value().data[0];
    assert!((d - (d_global / nf + d_pixel_losses)).abs() < 1e-12);
    let gl = adv_loss_g(&fake, PixelReduction::MeanLogits).value().data[0];
    assert!((gl - (g_global + g_pixel_logits) / nf).abs() < 1e-12);
}

#[test]
fn non_finite_logits_report_batch_index() {
    let g = Graph::new();
    let mut pixel = Tensor::zeros(&[3, 1, 2, 2]);
    pixel.data[9] = f64::NAN;
    let out = output(&g, &[0.0, 0.0, 0.0], &pixel);
    match check_logits(&out, "fake") {
        Err(Error::NonFinite { batch_index, .. }) => assert_eq!(batch_index, Some(2)),
        other => panic!("unexpected {other:?}"),
    }
    let out = output(&g, &[0.0, f64::INFINITY, 0.0], &Tensor::zeros(&[3, 1, 2, 2]));
    assert!(matches!(check_logits(&out, "real"), Err(Error::NonFinite { batch_index: Some(1), .. })));
}

#[test]
fn rec_loss_examples() {
    let mut r = rng(2);
    let g = Graph::new();
    let a = random_tensor(&[2, 1, 5, 5], &mut r);
    let b = random_tensor(&[2, 1, 5, 5], &mut r);
    let va = g.constant(a.clone());
    assert_eq!(rec_loss(va, va).unwrap().value().data[0], 0.0);
    let half = g.constant(Tensor::full(&[1, 1, 4, 4], 0.5));
    let quarter = g.constant(Tensor::full(&[1, 1, 4, 4], 0.25));
    assert_eq!(rec_loss(half, quarter).unwrap().value().data[0], 0.25);
    let brute = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / 50.0;
    let got = rec_loss(va, g.constant(b)).unwrap().value().data[0];
    assert!((got - brute).abs() < 1e-15);
    assert!(matches!(rec_loss(va, half), Err(Error::Domain(_))));
}

#[test]
fn self_similarity_examples() {
    let ex = FeatureExtractor::<f64>::new(ExtractorConfig::default()).unwrap();
    let mut r = rng(3);
    let x = random_tensor(&[1, 1, 64, 64], &mut r).map(|v| v.abs());
    let s = similarity_of(&x, &ex).unwrap();
    let (fh, fw) = ex.feature_size(64, 64);
    assert_eq!((fh, fw), (8, 8));
    let p = ex.config().patch;
    assert_eq!(s.shape, vec![1, fh * fw, p * p]);
    for qi in 0..fh {
        for qj in 0..fw {
            let si = qi.saturating_sub(p / 2).min(fh - p);
            let sj = qj.saturating_sub(p / 2).min(fw - p);
            let t = (qi - si) * p + (qj - sj);
            assert!((s.data[(qi * fw + qj) * p * p + t] - 1.0).abs() < 1e-6);
        }
    }
    assert!(s.data.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));

    let constant = similarity_of(&Tensor::full(&[1, 1, 64, 64], 0.4), &ex).unwrap();
    assert!(constant.data.iter().all(|v| (v - 1.0).abs() < 1e-5));

    // brute-force check of one query point against raw features
    let g = Graph::new();
    let f = ex.features(g.constant(x.clone())).value();
    let c = f.shape[1];
    let hw = fh * fw;
    let feat = |pos: usize| -> Vec<f64> {
        let v: Vec<f64> = (0..c).map(|ch| f.data[ch * hw + pos]).collect();
        let n = (v.iter().map(|a| a * a).sum::<f64>() + qcatn::losses::FEATURE_NORM_EPS).sqrt();
        v.into_iter().map(|a| a / n).collect()
    };
    let (qi, qj) = (5, 2);
    let qf = feat(qi * fw + qj);
    let si = qi.saturating_sub(p / 2).min(fh - p);
    let sj = qj.saturating_sub(p / 2).min(fw - p);
    for t in 0..p * p {
        let rf = feat((si + t / p) * fw + sj + t % p);
        let dot: f64 = qf.iter().zip(&rf).map(|(a, b)| a * b).sum();
        assert!((s.data[(qi * fw + qj) * p * p + t] - dot).abs() < 1e-12);
    }

    let g = Graph::new();
    let tiny = g.constant(Tensor::zeros(&[1, 1, 32, 32]));
    assert!(matches!(self_similarity_map(tiny, &ex), Err(Error::Domain(_))));
}

#[test]
fn ac_loss_examples() {
    let ex = FeatureExtractor::<f64>::new(ExtractorConfig::default()).unwrap();
    let mut r = rng(4);
    // structured image: smooth gradients plus a bright off-center disk
    let mut img = Tensor::zeros(&[1, 1, 64, 64]);
    for i in 0..64 {
        for j in 0..64 {
            let d = ((i as f64 - 20.0).powi(2) + (j as f64 - 40.0).powi(2)).sqrt();
            img.data[i * 64 + j] = 0.2 + 0.005 * i as f64 + if d < 10.0 { 0.5 } else { 0.0 };
        }
    }
    let noise = random_tensor(&[1, 1, 64, 64], &mut r);
    let g = Graph::new();
    let a = g.constant(img.clone());
    assert_eq!(ac_loss(a, a, &ex).unwrap().value().data[0], 0.0);
    let half = g.constant(img.map(|v| 0.5 * v));
    assert!(ac_loss(a, half, &ex).unwrap().value().data[0] < 1e-5);
    let mut rot = Tensor::zeros(&[1, 1, 64, 64]);
    for i in 0..64 {
        for j in 0..64 {
            rot.data[j * 64 + (63 - i)] = img.data[i * 64 + j];
        }
    }
    let rot = g.constant(rot);
    assert!(ac_loss(a, rot, &ex).unwrap().value().data[0] > 0.0);
    let b = g.constant(noise);
    let ab = ac_loss(a, b, &ex).unwrap().value().data[0];
    let ba = ac_loss(b, a, &ex).unwrap().value().data[0];
    assert_eq!(ab, ba);
    let small = g.constant(Tensor::zeros(&[1, 1, 32, 64]));
    assert!(matches!(ac_loss(a, small, &ex), Err(Error::Domain(_))));
}

#[test]
fn small_extractor_works_on_8x8() {
    let ex = small_extractor();
    let mut r = rng(5);
    let x = random_tensor(&[2, 1, 8, 8], &mut r);
    let s = similarity_of(&x, &ex).unwrap();
    assert_eq!(s.shape, vec![2, 64, 16]);
}
