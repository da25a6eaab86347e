use neurodecode_core::{grad_check_store, Error, GradCheckConfig, ParamStore, Rng, Tensor};
use neurodecode_data::scene::{generate_stimuli, Vocab};
use neurodecode_metrics::{ssim, SsimConfig};
use neurodecode_models::codec::mean_psnr;
use neurodecode_models::hvae::{from_slot_major, kl_diag_gaussian, to_slot_major};
use neurodecode_models::*;
use proptest::prelude::*;
use std::sync::OnceLock;

fn micro() -> HvaeConfig {
    HvaeConfig { image_size: 4, layer_res: vec![1, 2], latent_width: 2, channels: 2, injected_layers: 1, free_bits: 0.0, ..Default::default() }
}

fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = Rng::new(seed);
    for id in store.trainable_ids() {
        let p = store.get(id).clone();
        let noise = Tensor::randn(p.shape(), 0.3, &mut rng);
        store.set(id, p.add(&noise).unwrap()).unwrap();
    }
}

#[test]
fn full_size_latent_lengths() {
    let stage1 = HvaeConfig::paper_dims(15);
    assert_eq!(stage1.layer_count(), 31);
    assert_eq!(stage1.injected_len(), 13_344);
    assert_eq!(stage1.latent_len(), 91_168);
    assert_eq!(HvaeConfig::paper_dims(31).injected_len(), 91_168);
    let toy = HvaeConfig::default();
    assert_eq!(toy.total_slots(), 170);
    assert_eq!(toy.injected_len(), 160);
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        HvaeConfig { layer_res: vec![2, 1], ..Default::default() },
        HvaeConfig { layer_res: vec![3], ..Default::default() },
        HvaeConfig { layer_res: vec![32], ..Default::default() },
        HvaeConfig { injected_layers: 9, ..Default::default() },
        HvaeConfig { recon_sd: 0.0, ..Default::default() },
    ] {
        assert!(matches!(Hvae::new(&cfg, 0), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn gaussian_kl_is_zero_only_when_matched() {
    assert_eq!(kl_diag_gaussian(0.3, -0.2, 0.3, -0.2), 0.0);
    // KL(N(1, 1) ‖ N(0, 1)) = 1/2 and KL(N(0, e²) ‖ N(0, 1)) = (e² − 1)/2 − 1.
    assert!((kl_diag_gaussian(1.0, 0.0, 0.0, 0.0) - 0.5).abs() < 1e-15);
    let e2 = 1f64.exp().powi(2);
    assert!((kl_diag_gaussian(0.0, 1.0, 0.0, 0.0) - ((e2 - 1.0) / 2.0 - 1.0)).abs() < 1e-12);
}

#[test]
fn slot_major_layout_round_trips() {
    let z = Tensor::new(&[2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
    // Slot (0, 0) holds channel 0 then channel 1.
    assert_eq!(to_slot_major(&z), vec![0.0, 4.0, 1.0, 5.0, 2.0, 6.0, 3.0, 7.0]);
    assert_eq!(from_slot_major(&to_slot_major(&z), 2, 2), z);
}

#[test]
fn two_layer_gradients_match_finite_differences() {
    let mut m = Hvae::new(&micro(), 1).unwrap();
    jitter(&mut m.store, 2);
    let x = Tensor::uniform(&[2, 3, 4, 4], 0.0, 1.0, &mut Rng::new(3));
    let report = grad_check_store(&m.store, 4, GradCheckConfig { tol: 1e-4, ..Default::default() }, |ctx| {
        let xv = ctx.constant(x.clone());
        Ok(m.loss(ctx, xv)?.0)
    })
    .unwrap();
    assert!(report.passed, "{:?}", report.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)));
}

#[test]
fn encoding_requires_training() {
    let m = Hvae::new(&micro(), 5).unwrap();
    let img = Tensor::zeros(&[3, 4, 4]);
    assert!(matches!(m.encode(&img), Err(Error::Config(_))));
}

#[test]
fn decoding_checks_lengths_and_is_deterministic() {
    let cfg = micro();
    let m = Hvae::new(&cfg, 6).unwrap();
    let lat = Tensor::randn(&[cfg.injected_len()], 1.0, &mut Rng::new(7));
    let a = m.decode_with_injected(&lat, 8).unwrap();
    assert_eq!(a, m.decode_with_injected(&lat, 8).unwrap());
    assert_eq!(a.shape(), [3, 4, 4]);
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(matches!(m.decode_with_injected(&Tensor::zeros(&[3]), 8), Err(Error::Dim(_))));
    assert!(matches!(m.decode_batch(std::slice::from_ref(&lat), &[1, 2]), Err(Error::Dim(_))));
    let zero = Hvae::new(&HvaeConfig { injected_layers: 0, ..micro() }, 6).unwrap();
    assert_eq!(zero.decode_with_injected(&Tensor::from_vec(Vec::new()), 8).unwrap(), zero.sample(&[8]).unwrap()[0]);
}

#[test]
fn perturbing_a_layer_leaves_earlier_states_unchanged() {
    let cfg = HvaeConfig { image_size: 8, layer_res: vec![1, 2, 4], injected_layers: 3, channels: 4, latent_width: 2, ..Default::default() };
    let mut m = Hvae::new(&cfg, 9).unwrap();
    jitter(&mut m.store, 10);
    let lat = Tensor::randn(&[cfg.injected_len()], 1.0, &mut Rng::new(11));
    let (_, base) = m.decode_trace(&lat, 12).unwrap();
    // Layer 1 (2×2) starts after layer 0's two values.
    let mut d = lat.to_vec();
    d[2] += 1.0;
    let (_, moved) = m.decode_trace(&Tensor::from_vec(d), 12).unwrap();
    assert_eq!(base[0], moved[0]);
    assert!(base[1].sub(&moved[1]).unwrap().max_abs() > 1e-6);
    assert!(base[2].sub(&moved[2]).unwrap().max_abs() > 1e-6);
}

struct Trained {
    model: Hvae,
    report: HvaeReport,
    test: Vec<Tensor>,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let st = generate_stimuli(448, 32, 16, &Vocab::default(), &mut Rng::new(20)).unwrap();
        let imgs: Vec<Tensor> = st.into_iter().map(|s| s.image).collect();
        let cfg = HvaeConfig { channels: 24, ..Default::default() };
        let mut model = Hvae::new(&cfg, 21).unwrap();
        let report = train_hvae(&mut model, &imgs[..384], &imgs[384..], &HvaeTrainConfig { epochs: 10, ..Default::default() }).unwrap();
        Trained { model, report, test: imgs[384..].to_vec() }
    })
}

#[test]
fn training_lowers_the_bound_and_reconstructs() {
    let t = trained();
    let first = &t.report.epochs[0];
    let last = t.report.epochs.last().unwrap();
    assert!(last.val_loss < first.val_loss);
    assert!(last.kl_per_layer.iter().all(|&k| k >= 0.0));
    let recon = t.model.reconstruct(&t.test).unwrap();
    let p = mean_psnr(&recon, &t.test).unwrap();
    assert!(p >= 18.0, "reconstruction PSNR {p}");
}

#[test]
fn encoding_is_deterministic_with_positive_scales() {
    let t = trained();
    let a = t.model.encode(&t.test[0]).unwrap();
    let b = t.model.encode(&t.test[0]).unwrap();
    assert_eq!(a.mean, b.mean);
    assert_eq!(a.mean.len(), t.model.cfg.latent_len());
    assert!(a.sigma.data().iter().all(|&s| s > 0.0));
}

#[test]
fn injected_latents_beat_unconditional_samples() {
    let t = trained();
    let sc = SsimConfig::default();
    let lats = t.model.encode_batch(&t.test).unwrap();
    let seeds: Vec<u64> = (0..t.test.len() as u64).collect();
    let inj: Vec<Tensor> = lats.iter().map(|l| t.model.injected_part(&l.mean).unwrap()).collect();
    let cond = t.model.decode_batch(&inj, &seeds).unwrap();
    let free = t.model.sample(&seeds).unwrap();
    let mean = |xs: &[Tensor]| xs.iter().zip(&t.test).map(|(x, y)| ssim(x, y, &sc).unwrap()).sum::<f64>() / xs.len() as f64;
    let (c, u) = (mean(&cond), mean(&free));
    assert!(c > u, "injected {c} vs unconditional {u}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_non_negative(mq in -5.0f64..5.0, lq in -3.0f64..3.0, mp in -5.0f64..5.0, lp in -3.0f64..3.0) {
        prop_assert!(kl_diag_gaussian(mq, lq, mp, lp) >= -1e-12);
    }
}
