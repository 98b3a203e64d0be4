#![allow(dead_code)]

use std::collections::BTreeMap;

use foley_core::config::ExperimentConfig;
use foley_core::dataset::ClassLabel;
use foley_core::dsp::MelConfig;
use foley_core::latent_clap::{LatentClapConfig, LatentClapModel};
use foley_core::ldm::{lclap_term_graph, LdmConfig, LdmModel, LossConfig, ScheduleConfig};
use foley_core::mini_clap::{ClapConfig, ClapModel};
use foley_core::nn::check::{finite_difference, worst_relative_error};
use foley_core::nn::{normal, Graph, Params, Tensor};
use foley_core::vae::{VaeConfig, VaeModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub type LossAndGrads = (f64, BTreeMap<String, Tensor<f64>>);

/// Worst per-parameter relative error between backprop and central differences.
pub fn gradient_error(
    params: &Params<f64>,
    f: impl Fn(&Params<f64>, bool) -> LossAndGrads,
) -> (String, f64) {
    let (_, analytic) = f(params, true);
    let numeric = finite_difference(params, FD_STEP, |_| true, |p| f(p, false).0);
    worst_relative_error(&analytic, &numeric)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn micro_classes() -> Vec<ClassLabel> {
    vec![
        ClassLabel::DogBark,
        ClassLabel::Footstep,
        ClassLabel::GunShot,
    ]
}

pub fn micro_clap() -> ClapModel<f64> {
    let cfg = ClapConfig {
        embed_dim: 4,
        text_dim: 3,
        mel_bins: 8,
        channels: vec![2, 3],
        ..ClapConfig::desk()
    };
    ClapModel::<f32>::new(cfg, micro_classes(), 11)
        .unwrap()
        .cast()
}

pub fn micro_mel() -> MelConfig {
    MelConfig {
        mel_bins: 8,
        ..MelConfig::desk()
    }
}

pub fn micro_vae() -> VaeModel<f64> {
    let cfg = VaeConfig {
        mel_bins: 8,
        latent_channels: 1,
        ratio: 2,
        hidden: 2,
        kl_weight: 0.1,
        ..VaeConfig::desk()
    };
    VaeModel::<f32>::new(cfg, micro_mel(), 12).unwrap().cast()
}

pub fn micro_ldm() -> LdmModel<f64> {
    let cfg = LdmConfig {
        latent_shape: [1, 2, 4],
        channels: 2,
        cond_dim: 4,
        time_dim: 4,
        schedule: ScheduleConfig {
            steps: 20,
            ..ScheduleConfig::default()
        },
    };
    LdmModel::<f32>::new(cfg, 13).unwrap().cast()
}

pub fn micro_lclap() -> LatentClapModel<f64> {
    let cfg = LatentClapConfig {
        latent_shape: [1, 2, 4],
        embed_dim: 4,
        channels: vec![2],
    };
    LatentClapModel::<f32>::new(cfg, 14).unwrap().cast()
}

pub fn contrastive_gradient_error() -> (String, f64, usize) {
    let model = micro_clap();
    let x: Tensor<f64> = normal(&mut rng(1), &[3, 1, 8, 8], 1.0);
    let rows = [0, 1, 2];
    let (name, err) = gradient_error(&model.params, |p, _| {
        let mut m = model.clone();
        m.params = p.clone();
        let g = Graph::new();
        let b = m.params.bind(&g, true);
        let loss = m.contrastive_loss_graph(&b, g.constant(x.clone()), &rows);
        let mut grads = g.backward(loss);
        (loss.value().data()[0], b.grads(&mut grads))
    });
    (name, err, model.params.num_elements())
}

pub fn elbo_gradient_error() -> (String, f64, usize) {
    let model = micro_vae();
    let x: Tensor<f64> = normal(&mut rng(2), &[2, 1, 8, 8], 1.0);
    let eta: Tensor<f64> = normal(&mut rng(3), &[2, 1, 4, 4], 1.0);
    let (name, err) = gradient_error(&model.params, |p, _| {
        let mut m = model.clone();
        m.params = p.clone();
        let g = Graph::new();
        let b = m.params.bind(&g, true);
        let (total, _, _) = m.elbo_graph(&b, g.constant(x.clone()), g.constant(eta.clone()));
        let mut grads = g.backward(total);
        (total.value().data()[0], b.grads(&mut grads))
    });
    (name, err, model.params.num_elements())
}

pub struct TotalLossCase {
    pub ldm: LdmModel<f64>,
    pub lclap: LatentClapModel<f64>,
    pub s_n: Tensor<f64>,
    pub eps: Tensor<f64>,
    pub cond: Tensor<f64>,
    pub target: Tensor<f64>,
    pub steps: Vec<usize>,
    pub loss: LossConfig,
}

impl TotalLossCase {
    pub fn new() -> Self {
        let ldm = micro_ldm();
        let mut r = rng(4);
        let target: Tensor<f64> = normal(&mut r, &[2, 4], 1.0);
        let norms: Vec<f64> = target
            .data()
            .chunks(4)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let target = Tensor::new(
            vec![2, 4],
            target
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v / norms[i / 4])
                .collect(),
        );
        Self {
            lclap: micro_lclap(),
            s_n: normal(&mut r, &[2, 1, 2, 4], 1.0),
            eps: normal(&mut r, &[2, 1, 2, 4], 1.0),
            cond: normal(&mut r, &[2, 4], 1.0),
            target,
            steps: vec![2, 7],
            loss: LossConfig {
                lambda: 50.0,
                ..LossConfig::default()
            },
            ldm,
        }
    }

    /// `(ddpm, lclap, total, grads)` with gradients taken over the predictor
    /// and, when `lclap_trainable`, the latent CLAP weights as well.
    pub fn eval(
        &self,
        ldm: &Params<f64>,
        lclap: &Params<f64>,
        lclap_trainable: bool,
    ) -> (f64, f64, f64, BTreeMap<String, Tensor<f64>>) {
        let mut m = self.ldm.clone();
        m.params = ldm.clone();
        let mut lc = self.lclap.clone();
        lc.params = lclap.clone();
        let g = Graph::new();
        let b = m.params.bind(&g, true);
        let lb = lc.params.bind(&g, lclap_trainable);
        let s_n = g.constant(self.s_n.clone());
        let eps_hat = m.forward(&b, s_n, &self.steps, g.constant(self.cond.clone()));
        let ddpm = eps_hat.sub(g.constant(self.eps.clone())).square().mean();
        let aux = lclap_term_graph(
            &m.schedule,
            &lc,
            &lb,
            s_n,
            eps_hat,
            &self.steps,
            g.constant(self.target.clone()),
            &self.loss,
        )
        .unwrap();
        let total = ddpm.add(aux.scale(self.loss.lambda));
        let mut grads = g.backward(total);
        let mut out = b.grads(&mut grads);
        for (k, v) in lb.grads(&mut grads) {
            out.insert(format!("lclap/{k}"), v);
        }
        (
            ddpm.value().data()[0],
            aux.value().data()[0],
            total.value().data()[0],
            out,
        )
    }

    /// Worst relative error over predictor and latent CLAP parameters.
    pub fn gradient_error(&self) -> (String, f64, usize) {
        let mut joint = self.ldm.params.clone();
        for (k, v) in self.lclap.params.iter() {
            joint.insert(format!("lclap/{k}"), v.clone());
        }
        let split = |p: &Params<f64>| {
            let mut l = Params::new();
            for (k, v) in p.iter() {
                if let Some(rest) = k.strip_prefix("lclap/") {
                    l.insert(rest, v.clone());
                }
            }
            let mut d = p.clone();
            for k in l.names() {
                d.remove(&format!("lclap/{k}"));
            }
            (d, l)
        };
        let (name, err) = gradient_error(&joint, |p, _| {
            let (d, l) = split(p);
            let (_, _, total, grads) = self.eval(&d, &l, true);
            (total, grads)
        });
        (name, err, joint.num_elements())
    }
}

/// A pipeline small enough to run end to end in well under a minute.
pub fn micro_pipeline_config(seed: u64) -> ExperimentConfig {
    let sets = [
        "classes=[\"dog_bark\",\"rain\"]",
        "dataset.per_class=6",
        "dataset.reference_per_class=4",
        "dataset.duration_s=0.64",
        "dataset.frames=64",
        "clap.epochs=2",
        "eval.epochs=2",
        "eval.embedder.embed_dim=4",
        "vae.epochs=2",
        "vae.crop_frames=32",
        "latent_clap.model.latent_shape=[4,8,16]",
        "latent_clap.epochs=2",
        "ldm.model.latent_shape=[4,8,16]",
        "ldm.model.channels=8",
        "ldm.train.epochs=2",
        "generation.clips_per_class=3",
        "generation.inference_steps=4",
        "generation.griffin_lim_iterations=2",
        "sweep.lambdas=[0,1000]",
    ];
    let mut overrides: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
    overrides.push(format!("seed={seed}"));
    ExperimentConfig::load(None, &overrides).unwrap()
}
