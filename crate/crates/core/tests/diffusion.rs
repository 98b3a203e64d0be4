mod common;

use common::{micro_clap, micro_lclap, micro_ldm};
use foley_core::embedding::Embedding;
use foley_core::latent::Latent;
use foley_core::latent_clap::{distill_loss, LatentClapModel};
use foley_core::ldm::{
    cfg_combine, ddpm_loss, finetune_ldm, latent_clap_loss_term, make_schedule, predict_s0,
    q_sample, sample, step_weight, total_loss, FinetuneConfig, FinetuneData, LdmModel, LossConfig,
    NoiseSchedule,
};
use foley_core::mini_clap::ClapModel;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Latent {
    let v = (0..shape.iter().product())
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    Latent::new(v, shape).unwrap()
}

fn default_schedule() -> NoiseSchedule {
    make_schedule(1000, 1e-4, 2e-2).unwrap()
}

#[test]
fn default_alpha_bar_matches_product_loop() {
    let sched = default_schedule();
    let mut prod = 1.0f64;
    for k in 0..1000 {
        let beta = 1e-4 + (2e-2 - 1e-4) * k as f64 / 999.0;
        prod *= 1.0 - beta;
    }
    assert!(prod < 5e-5, "oracle {prod}");
    assert!((sched.alpha_bar(1000) - prod).abs() <= 1e-12 * prod.max(1e-300) + 1e-18);
    assert_eq!(sched.alpha_bar(0), 1.0);
    assert!(sched.alpha_bar(1000) < 0.01);
}

#[test]
fn forward_process_gaussianizes_at_final_step() {
    let sched = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = [1, 2, 4];
    let s0 = randn(&mut rng, shape)
        .values()
        .iter()
        .map(|v| v * 3.0)
        .collect::<Vec<_>>();
    let s0 = Latent::new(s0, shape).unwrap();
    let draws = 10_000;
    let mut sum = [0.0f64; 8];
    let mut sq = [0.0f64; 8];
    for _ in 0..draws {
        let eps = randn(&mut rng, shape);
        let s = q_sample(&s0, 1000, &eps, &sched).unwrap();
        for (i, &v) in s.values().iter().enumerate() {
            sum[i] += v as f64;
            sq[i] += (v as f64).powi(2);
        }
    }
    for i in 0..8 {
        let mean = sum[i] / draws as f64;
        let var = sq[i] / draws as f64 - mean * mean;
        assert!(mean.abs() <= 0.05, "element {i} mean {mean}");
        assert!((0.9..=1.1).contains(&var), "element {i} variance {var}");
    }
}

#[test]
fn q_sample_limits() {
    let sched = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s0 = randn(&mut rng, [2, 2, 4]);
    let zero = Latent::zeros([2, 2, 4]);
    let s = q_sample(&s0, 300, &zero, &sched).unwrap();
    let a = sched.alpha_bar(300).sqrt();
    for (x, y) in s.values().iter().zip(s0.values()) {
        assert!((*x as f64 - a * *y as f64).abs() < 1e-6);
    }
    assert_eq!(s.step, Some(300));
    let eps = randn(&mut rng, [2, 2, 4]);
    let s1 = q_sample(&s0, 1, &eps, &sched).unwrap();
    let bound = 1e-4f64.sqrt() * eps.values().iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
    assert!(s1.max_abs_diff(&s0) <= bound + 1e-6);
    assert!(q_sample(&s0, 0, &eps, &sched).is_err());
    assert!(q_sample(&s0, 1001, &eps, &sched).is_err());
}

#[test]
fn predict_s0_inverts_forward_process() {
    let sched = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s0 = randn(&mut rng, [4, 8, 64]);
    let eps = randn(&mut rng, [4, 8, 64]);
    let s500 = q_sample(&s0, 500, &eps, &sched).unwrap();
    let back = predict_s0(&s500, 500, &eps, &sched).unwrap();
    assert!(back.max_abs_diff(&s0) < 1e-4, "{}", back.max_abs_diff(&s0));
    for n in [1, 10, 100] {
        let s = q_sample(&s0, n, &eps, &sched).unwrap();
        assert!(predict_s0(&s, n, &eps, &sched).unwrap().max_abs_diff(&s0) <= 1e-5);
    }
    let z = predict_s0(&s500, 500, &Latent::zeros([4, 8, 64]), &sched).unwrap();
    let inv = 1.0 / sched.alpha_bar(500).sqrt();
    for (x, y) in z.values().iter().zip(s500.values()) {
        assert!((*x as f64 - inv * *y as f64).abs() <= 1e-5 * inv * (1.0 + y.abs() as f64));
    }
}

#[test]
fn ddpm_loss_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = randn(&mut rng, [4, 8, 64]);
    let b = randn(&mut rng, [4, 8, 64]);
    let oracle = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    assert!((ddpm_loss(&a, &b).unwrap() - oracle).abs() <= 1e-5 * oracle);
    assert_eq!(ddpm_loss(&a, &a).unwrap(), 0.0);
    assert!(ddpm_loss(&a, &Latent::zeros([4, 8, 32])).is_err());
}

proptest! {
    #[test]
    fn step_weight_is_multiplicative_and_decreasing(a in 0i64..600, b in 0i64..600) {
        let cfg = LossConfig::default();
        let w = |n| step_weight(n, &cfg).unwrap();
        prop_assert!((w(a + b) - w(a) * w(b)).abs() <= 1e-12);
        prop_assert!(w(a + 1) < w(a));
        prop_assert!(w(a) > 0.0 && w(a) <= 1.0);
    }

    #[test]
    fn total_loss_is_linear_in_auxiliary(ddpm in 0.0f64..10.0, l in 0.0f64..1.0, lambda in 0.0f64..3000.0) {
        let cfg = LossConfig { lambda, ..LossConfig::default() };
        let slope = (total_loss(ddpm, l + 0.5, &cfg) - total_loss(ddpm, l, &cfg)) / 0.5;
        prop_assert!((slope - lambda).abs() <= 1e-9 * lambda.max(1.0));
        prop_assert!((total_loss(ddpm, l, &cfg) - (ddpm + lambda * l)).abs() <= 1e-12 * (1.0 + lambda));
    }

    #[test]
    fn guidance_of_identical_predictions_is_identity(seed in 0u64..1000, g in 0.0f64..8.0) {
        let x = randn(&mut ChaCha8Rng::seed_from_u64(seed), [2, 2, 4]);
        prop_assert!(cfg_combine(&x, &x, g).unwrap().max_abs_diff(&x) <= 1e-6);
    }
}

fn f32_micro() -> (ClapModel, LatentClapModel, LdmModel) {
    let mut ldm: LdmModel = micro_ldm().cast();
    ldm.schedule = default_schedule();
    ldm.config.schedule = Default::default();
    (micro_clap().cast(), micro_lclap().cast(), ldm)
}

#[test]
fn auxiliary_term_composition() {
    let (_, lclap, ldm) = f32_micro();
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s_n = randn(&mut rng, [1, 2, 4]);
    let cond = Embedding::new(vec![0.5, -0.5, 0.5, 0.5]).unwrap();
    let target = Embedding::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    for n in [1usize, 200, 400, 999] {
        let eps_hat = ldm.predict_eps(&s_n, n, Some(&cond)).unwrap();
        let ab = ldm.schedule.alpha_bar(n);
        let s0: Vec<f32> = s_n
            .values()
            .iter()
            .zip(eps_hat.values())
            .map(|(&x, &e)| ((x as f64 - (1.0 - ab).sqrt() * e as f64) / ab.sqrt()) as f32)
            .collect();
        let e = lclap.encode(&Latent::new(s0, [1, 2, 4]).unwrap()).unwrap();
        let mse = e
            .values()
            .iter()
            .zip(target.values())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / 4.0;
        let oracle = 10f64.powf(-(n as f64) / 200.0) * mse;
        let term = latent_clap_loss_term(&target, &ldm, &lclap, &s_n, n, &cond, &cfg).unwrap();
        assert!(
            (term - oracle).abs() <= 1e-5 * oracle.max(1e-3),
            "n={n}: {term} vs {oracle}"
        );
        assert!(
            (term / distill_loss(&target, &e).unwrap() - step_weight(n as i64, &cfg).unwrap())
                .abs()
                < 1e-5
        );
        let exact = latent_clap_loss_term(&e, &ldm, &lclap, &s_n, n, &cond, &cfg).unwrap();
        assert!(exact.abs() < 1e-12, "matched embedding gives {exact}");
    }
    let w = |n| step_weight(n, &cfg).unwrap();
    assert!((w(400) / w(200) - 0.1).abs() < 1e-12);
}

fn micro_data() -> FinetuneData {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let latents: Vec<Latent> = (0..12).map(|_| randn(&mut rng, [1, 2, 4])).collect();
    let lclap: LatentClapModel = micro_lclap().cast();
    let audio = latents.iter().map(|z| lclap.encode(z).unwrap()).collect();
    FinetuneData {
        latents,
        rows: (0..12).map(|i| i % 3).collect(),
        audio,
    }
}

fn micro_finetune(lambda: f64, dropout: f64) -> FinetuneConfig {
    FinetuneConfig {
        epochs: 6,
        lr: 3e-3,
        batch_size: 4,
        seed: 21,
        tuning: false,
        loss: LossConfig {
            lambda,
            cond_dropout_p: dropout,
            ..LossConfig::default()
        },
    }
}

#[test]
fn zero_lambda_reproduces_ddpm_only_trajectory() {
    let (clap, lclap, ldm) = f32_micro();
    let data = micro_data();
    let (a, log_a) =
        finetune_ldm(&ldm, &data, &clap, Some(&lclap), &micro_finetune(0.0, 0.1)).unwrap();
    let (b, log_b) = finetune_ldm(&ldm, &data, &clap, None, &micro_finetune(0.0, 0.1)).unwrap();
    let (c, _) = finetune_ldm(&ldm, &data, &clap, None, &micro_finetune(500.0, 0.1)).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(log_a, log_b);
    assert_eq!(a.params, c.params);
    let (d, log_d) = finetune_ldm(
        &ldm,
        &data,
        &clap,
        Some(&lclap),
        &micro_finetune(500.0, 0.1),
    )
    .unwrap();
    assert_ne!(a.params, d.params);
    assert!(log_d.iter().all(|r| r.lclap_loss.is_some()));
}

#[test]
fn fine_tuning_touches_only_the_predictor() {
    let (mut clap, lclap, ldm) = f32_micro();
    let data = micro_data();
    let (clap_before, lclap_before) = (clap.params.digest(), lclap.params.digest());
    let (m, log) = finetune_ldm(
        &ldm,
        &data,
        &clap,
        Some(&lclap),
        &micro_finetune(500.0, 0.1),
    )
    .unwrap();
    assert_eq!(clap.params.digest(), clap_before);
    assert_eq!(lclap.params.digest(), lclap_before);
    assert!(log.last().unwrap().total < log[0].total, "{log:?}");
    assert!(!m.params.contains("tuning.w"));
    clap.tuning_enabled = true;
    let mut cfg = micro_finetune(500.0, 0.1);
    cfg.tuning = true;
    let (t, _) = finetune_ldm(&ldm, &data, &clap, Some(&lclap), &cfg).unwrap();
    assert_ne!(t.params.get("tuning.w"), clap.params.get("tuning.w"));
    assert_eq!(clap.params.digest(), clap_before);
}

#[test]
fn dropout_zero_never_uses_the_null_condition() {
    let (clap, lclap, ldm) = f32_micro();
    let data = micro_data();
    let (m, _) = finetune_ldm(
        &ldm,
        &data,
        &clap,
        Some(&lclap),
        &micro_finetune(100.0, 0.0),
    )
    .unwrap();
    assert_eq!(m.params.get("null_cond"), ldm.params.get("null_cond"));
    let (m, _) = finetune_ldm(
        &ldm,
        &data,
        &clap,
        Some(&lclap),
        &micro_finetune(100.0, 0.5),
    )
    .unwrap();
    assert_ne!(m.params.get("null_cond"), ldm.params.get("null_cond"));
}

#[test]
fn sampling_is_seeded() {
    let (_, _, ldm) = f32_micro();
    let cond = Embedding::new(vec![0.5; 4]).unwrap();
    let a = sample(&ldm, &cond, 20, 2.0, 5).unwrap();
    assert_eq!(a, sample(&ldm, &cond, 20, 2.0, 5).unwrap());
    assert_ne!(a, sample(&ldm, &cond, 20, 2.0, 6).unwrap());
    assert_eq!(a.shape(), [1, 2, 4]);
    assert!(sample(&ldm, &cond, 1001, 2.0, 5).is_err());
    assert!(sample(&ldm, &cond, 0, 2.0, 5).is_err());
}
