//! Finite-difference gradient cases shared by the gradient tests and the
//! acceptance suite. Each case returns the worst relative error per check.

use super::*;
use qcatn::losses::{
    ac_loss, adv_loss_d, adv_loss_g, rec_loss, total_loss_graph, ExtractorConfig, FeatureExtractor, LossWeights,
    PixelReduction,
};
use qcatn::model::blocks::{
    ChannelAttention, Cbin, GlobalProjection, Mmaf, PixelProjection, QEmbed, ResBlock, SmaDecoder, SmaEncoder,
};
use qcatn::model::{DiscOutput, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use qcatn::nn::gradcheck::{check_gradients, worst};
use qcatn::nn::{Bound, Graph, ParamStore, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-3;
const ENTRIES: usize = 24;

/// `(label, worst tensor, relative error)`.
pub type CaseResult = (String, String, f64);

/// Reduces a block output to a scalar with fixed random weights so every
/// output entry contributes a distinct sensitivity.
fn probe<'g>(g: &'g Graph<f64>, out: Var<'g, f64>, seed: u64) -> Var<'g, f64> {
    let w = random_tensor(&out.value().shape, &mut rng(seed));
    out.mul(&g.constant(w)).mean_all()
}

fn run(
    out: &mut Vec<CaseResult>,
    label: &str,
    store: &ParamStore<f64>,
    loss: impl for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>) -> Var<'g, f64>,
) {
    let checks = check_gradients(store, H, ENTRIES, loss);
    let (name, err) = worst(&checks);
    out.push((label.to_string(), name, err));
}

fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, &mut rng(seed)).map(|v| 0.5 + 0.5 * v)
}

pub fn sma_encoder_gradients() -> Vec<CaseResult> {
    let mut out = Vec::new();
    let mut r = rng(1);
    let mut store = ParamStore::<f64>::new();
    let enc = SmaEncoder::new(&mut store, "enc", 4, 1, 2, &mut r);
    let x = input(&[2, 1, 8, 8], 2);
    run(&mut out, "sma encoder", &store, |g, p| {
        let out = enc.forward(p, g.constant(x.clone()));
        probe(g, out, 3)
    });
    out
}

pub fn channel_attention_gradients() -> Vec<CaseResult> {
    let mut out = Vec::new();
    let mut r = rng(4);
    let mut store = ParamStore::<f64>::new();
    let attn = ChannelAttention::new(&mut store, "attn", 8, 2, &mut r);
    let f = store.add("f", random_tensor(&[2, 8, 8, 8], &mut r));
    run(&mut out, "channel attention", &store, |g, p| {
        let out = attn.forward(p, p.get(f));
        probe(g, out, 5)
    });
    out
}

pub fn mmaf_gradients() -> Vec<CaseResult> {
    let mut out = Vec::new();
    let mut r = rng(6);
    let mut store = ParamStore::<f64>::new();
    let mmaf = Mmaf::new(&mut store, "mmaf", 4, &mut r);
    let zs: Vec<_> = (0..3)
        .map(|i| store.add(format!("z{i}"), random_tensor(&[2, 4, 8, 8], &mut r)))
        .collect();
    run(&mut out, "mmaf", &store, |g, p| {
        let fused = mmaf.forward(p, [p.get(zs[0]), p.get(zs[1]), p.get(zs[2])]);
        probe(g, fused.z, 7)
    });
    out
}

pub fn q_embed_gradients() -> Vec<CaseResult> {
    let mut out = Vec::new();
    let mut r = rng(8);
    let mut store = ParamStore::<f64>::new();
    let qe = QEmbed::new(&mut store, "q", 6, &mut r);
    let q = store.add("q_in", input(&[3, 4], 9));
    run(&mut out, "q embed", &store, |g, p| {
        let out = qe.forward(p, p.get(q));
        probe(g, out, 10)
    });
    out
}

pub fn cbin_and_residual_gradients() -> Vec<CaseResult> {
    let mut out = Vec::new();
    let mut r = rng(11);
    let mut store = ParamStore::<f64>::new();
    let cbin = Cbin::new(&mut store, "cbin", 5, 4, &mut r);
    let res = ResBlock::new(&mut store, "res", 4, 5, &mut r);
    let z = store.add("z", random_tensor(&[2, 4, 8, 8], &mut r));
    let q = store.add("q_hat", random_tensor(&[2, 5], &mut r));
    run(&mut out, "cbin", &store, |g, p| {
        let out = cbin.forward(p, p.get(z), p.get(q));
        probe(g, out, 12)
    });
    run(&mut out, "residual block", &store, |g, p| {
        let out = res.forward(p, p.get(z), p.get(q));
        probe(g, out, 13)
    });
    out
}

pub fn decoder_gradients() -> Vec<CaseResult> {
    let mut out = Vec::new();
    let mut r = rng(14);
    let mut store = ParamStore::<f64>::new();
    let dec = SmaDecoder::new(&mut store, "dec", 4, 1, 2, &mut r);
    let z = store.add("z", random_tensor(&[1, 8, 4, 4], &mut r));
    run(&mut out, "decoder", &store, |g, p| {
        let out = dec.forward(p, p.get(z));
        probe(g, out, 15)
    });
    out
}

pub fn projection_head_gradients() -> Vec<CaseResult> {
    let mut out = Vec::new();
    let mut r = rng(16);
    let mut store = ParamStore::<f64>::new();
    let global = GlobalProjection::new(&mut store, "global", 5, 6, &mut r);
    let pixel = PixelProjection::new(&mut store, "pixel", 5, 6, &mut r);
    let gg = store.add("gamma_g", random_tensor(&[3, 6], &mut r));
    let gp = store.add("gamma_p", random_tensor(&[3, 6, 8, 8], &mut r));
    let q = store.add("q_hat", random_tensor(&[3, 5], &mut r));
    run(&mut out, "global projection", &store, |g, p| {
        let out = global.forward(p, p.get(gg), p.get(q));
        probe(g, out, 17)
    });
    run(&mut out, "pixel projection", &store, |g, p| {
        let out = pixel.forward(p, p.get(gp), p.get(q));
        probe(g, out, 18)
    });
    out
}

fn tiny_generator() -> Generator<f64> {
    Generator::new(GeneratorConfig {
        in_size: (8, 8),
        base_channels: 4,
        n_downsample: 1,
        n_res_blocks: 1,
        q_embed_dim: 4,
        attention_reduction: 2,
        seed: 19,
    })
    .unwrap()
}

fn tiny_discriminator() -> Discriminator<f64> {
    Discriminator::new(DiscriminatorConfig {
        in_size: (8, 8),
        base_channels: 4,
        n_layers: 2,
        q_embed_dim: 4,
        seed: 20,
    })
    .unwrap()
}

pub fn generator_end_to_end_gradients() -> Vec<CaseResult> {
    let mut out = Vec::new();
    let gen = tiny_generator();
    let xs: Vec<_> = (0..3).map(|i| input(&[2, 1, 8, 8], 21 + i)).collect();
    let q = input(&[2, 4], 24);
    run(&mut out, "generator", gen.params(), |g, p| {
        let out = gen.forward_graph(
            p,
            [g.constant(xs[0].clone()), g.constant(xs[1].clone()), g.constant(xs[2].clone())],
            g.constant(q.clone()),
        );
        probe(g, out, 25)
    });
    out
}

pub fn discriminator_end_to_end_gradients() -> Vec<CaseResult> {
    let mut out = Vec::new();
    let disc = tiny_discriminator();
    let x = input(&[2, 1, 8, 8], 26);
    let q = input(&[2, 4], 27);
    run(&mut out, "discriminator", disc.params(), |g, p| {
        let out = disc.forward_graph(p, g.constant(x.clone()), g.constant(q.clone()));
        probe(g, out.global, 28).add(&probe(g, out.pixel, 29))
    });
    out
}

pub fn adversarial_loss_gradients() -> Vec<CaseResult> {
    let mut out = Vec::new();
    let mut r = rng(30);
    let mut store = ParamStore::<f64>::new();
    let rg = store.add("real_global", random_tensor(&[3], &mut r).map(|v| 2.0 * v));
    let rp = store.add("real_pixel", random_tensor(&[3, 1, 8, 8], &mut r).map(|v| 2.0 * v));
    let fg = store.add("fake_global", random_tensor(&[3], &mut r).map(|v| 2.0 * v));
    let fp = store.add("fake_pixel", random_tensor(&[3, 1, 8, 8], &mut r).map(|v| 2.0 * v));
    for mode in [PixelReduction::MeanLogits, PixelReduction::MeanLosses] {
        run(&mut out, "adversarial d", &store, |_, p| {
            let real = DiscOutput { global: p.get(rg), pixel: p.get(rp) };
            let fake = DiscOutput { global: p.get(fg), pixel: p.get(fp) };
            adv_loss_d(&real, &fake, mode)
        });
        run(&mut out, "adversarial g", &store, |_, p| {
            let fake = DiscOutput { global: p.get(fg), pixel: p.get(fp) };
            adv_loss_g(&fake, mode)
        });
    }

    // through the discriminator into the synthesized image
    let disc = tiny_discriminator();
    let mut store = disc.params().clone();
    let x = store.add("x", input(&[2, 1, 8, 8], 31));
    let q = input(&[2, 4], 32);
    run(&mut out, "adversarial g via discriminator", &store, |g, p| {
        let fake = disc.forward_graph(p, p.get(x), g.constant(q.clone()));
        adv_loss_g(&fake, PixelReduction::MeanLogits)
    });
    out
}

pub fn rec_loss_gradients() -> Vec<CaseResult> {
    let mut out = Vec::new();
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", input(&[2, 1, 8, 8], 33));
    let target = input(&[2, 1, 8, 8], 34);
    run(&mut out, "rec", &store, |g, p| rec_loss(p.get(x), g.constant(target.clone())).unwrap());
    out
}

pub fn ac_loss_gradients() -> Vec<CaseResult> {
    let mut out = Vec::new();
    let ex = FeatureExtractor::<f64>::new(ExtractorConfig {
        channels: vec![4, 8],
        stride: 1,
        patch: 4,
        seed: 35,
    })
    .unwrap();
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", input(&[2, 1, 8, 8], 36));
    let target = input(&[2, 1, 8, 8], 37);
    run(&mut out, "ac", &store, |g, p| ac_loss(p.get(x), g.constant(target.clone()), &ex).unwrap());
    out
}

pub fn generator_total_loss_gradients() -> Vec<CaseResult> {
    let mut out = Vec::new();
    let gen = tiny_generator();
    let disc = tiny_discriminator();
    let ex = FeatureExtractor::<f64>::new(ExtractorConfig {
        channels: vec![4, 8],
        stride: 1,
        patch: 4,
        seed: 38,
    })
    .unwrap();
    let xs: Vec<_> = (0..3).map(|i| input(&[2, 1, 8, 8], 39 + i)).collect();
    let q = input(&[2, 4], 42);
    let target = input(&[2, 1, 8, 8], 43);
    let weights = LossWeights::default();
    run(&mut out, "generator total", gen.params(), |g, p| {
        let fake = gen.forward_graph(
            p,
            [g.constant(xs[0].clone()), g.constant(xs[1].clone()), g.constant(xs[2].clone())],
            g.constant(q.clone()),
        );
        let dp = disc.params().bind(g, false);
        let out = disc.forward_graph(&dp, fake, g.constant(q.clone()));
        let adv = adv_loss_g(&out, PixelReduction::MeanLogits);
        let t = g.constant(target.clone());
        let rec = rec_loss(fake, t).unwrap();
        let ac = ac_loss(fake, t, &ex).unwrap();
        total_loss_graph(adv, rec, ac, &weights)
    });
    out
}

/// Every case, in a fixed order.
pub fn all() -> Vec<CaseResult> {
    [
        sma_encoder_gradients as fn() -> Vec<CaseResult>,
        channel_attention_gradients,
        mmaf_gradients,
        q_embed_gradients,
        cbin_and_residual_gradients,
        decoder_gradients,
        projection_head_gradients,
        generator_end_to_end_gradients,
        discriminator_end_to_end_gradients,
        adversarial_loss_gradients,
        rec_loss_gradients,
        ac_loss_gradients,
        generator_total_loss_gradients,
    ]
    .into_iter()
    .flat_map(|case| case())
    .collect()
}
