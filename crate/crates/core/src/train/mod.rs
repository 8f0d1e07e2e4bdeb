//! Alternating adversarial training, evaluation runs and ablations.
//!
//! Each step runs the generator once, updates the discriminator on the
//! detached synthesis, then updates generator and reconstructors jointly
//! against the freshly updated (frozen) discriminator.

mod checkpoint;
mod optim;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{
    build_variant, discriminator_forward, discriminator_plan, generator_forward, init_layers, GeneratorOutput, NetConfig,
    VariantKind, DISC_PREFIX,
};
use crate::autodiff::{Graph, Var};
use crate::data::{CaseRecord, Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pairs, MetricsReport, PsnrPeak};
use crate::objectives::{
    loss_discriminator, loss_generator, loss_perceptual, loss_reconstruction, loss_total, GanMode, LossBreakdown,
    LossComponents, LossWeights, PerceptualNet, DEFAULT_ALPHA,
};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_FORMAT};
pub use optim::{adam_step, lr_schedule, AdamConfig, OptimizerState};

pub const CONFIG_FILE: &str = "config.json";
pub const LOSSES_FILE: &str = "losses.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSSES_HEADER: &str = "step,epoch,L_G_adv,L1,L_D,L_Rec,L_P,total";
pub const ABLATION_HEADER: &str = "variant,seed,ssim,psnr_db,nmse,lp";
/// Stream offset separating epoch shuffles from other uses of the seed.
const SHUFFLE_STREAM: u64 = 0x5348_0000;
const EVAL_BATCH: usize = 8;

/// Flat training configuration; serialized field names are the config.json keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: [f64; 5],
    pub variant: VariantKind,
    /// Uses inputs p1..pn.
    pub n_params: usize,
    pub base_width: usize,
    pub gan_mode: GanMode,
    /// Save a checkpoint every this many epochs; the last epoch is always saved.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let a = AdamConfig::default();
        TrainConfig {
            epochs: 20,
            batch_size: 4,
            lr: 1e-3,
            lr_decay: 0.9,
            lr_decay_every: 5,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            seed: 0,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            alpha: DEFAULT_ALPHA,
            variant: VariantKind::Full,
            n_params: 3,
            base_width: 16,
            gan_mode: GanMode::default(),
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return Err(Error::config("lr_decay must be positive and lr_decay_every at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("Adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        self.weights().validate()?;
        self.net_config().validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            alpha: self.alpha,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig::new(self.n_params, self.base_width)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("config.json: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Generator (with reconstructors), discriminator and both optimizer states.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub net: NetConfig,
    pub generator: ParamStore<f32>,
    pub discriminator: ParamStore<f32>,
    pub opt_g: OptimizerState,
    pub opt_d: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
}

/// One losses.csv line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub losses: LossBreakdown,
}

impl StepLog {
    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.epoch, l.g_adv, l.l1, l.l_d, l.l_rec, l.l_p, l.total
        )
    }
}

struct Forward {
    graph: Graph<f32>,
    xs: Vec<Var>,
    y: Var,
    out: GeneratorOutput,
    inputs: Vec<Tensor<f32>>,
    target: Tensor<f32>,
}

fn stack_images(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let t = Tensor::stack(images)?;
    let s = t.shape().to_vec();
    t.reshape(vec![s[0], 1, s[1], s[2]])
}

impl Model {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = config.net_config();
        let generator = build_variant(config.variant, &net, config.seed)?;
        let discriminator = init_layers(&discriminator_plan(&net), config.seed);
        Ok(Model {
            config,
            net,
            generator,
            discriminator,
            opt_g: OptimizerState::new(),
            opt_d: OptimizerState::new(),
            epoch: 0,
        })
    }

    pub fn variant(&self) -> VariantKind {
        self.config.variant
    }

    /// Batched generator inputs, one N×1×H×W tensor per configured parameter.
    pub fn batch_inputs(&self, cases: &[&CaseRecord]) -> Result<Vec<Tensor<f32>>> {
        self.net
            .inputs
            .iter()
            .map(|name| {
                let imgs = cases.iter().map(|c| c.input(name)).collect::<Result<Vec<_>>>()?;
                stack_images(&imgs)
            })
            .collect()
    }

    /// Synthesizes from N×1×H×W inputs; returns N×1×H×W.
    pub fn synthesize(&self, inputs: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let xs: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = generator_forward(&mut g, &self.generator, &self.net, self.variant(), &xs)?;
        Ok(g.value(out.y_hat).clone())
    }

    /// Synthesis for each case, each 1×H×W.
    pub fn synthesize_cases(&self, cases: &[&CaseRecord]) -> Result<Vec<Tensor<f32>>> {
        let mut out = Vec::with_capacity(cases.len());
        for chunk in cases.chunks(EVAL_BATCH) {
            let y_hat = self.synthesize(&self.batch_inputs(chunk)?)?;
            for i in 0..chunk.len() {
                let s = y_hat.sample(i)?;
                let (h, w) = (s.shape()[2], s.shape()[3]);
                out.push(s.reshape(vec![1, h, w])?);
            }
        }
        Ok(out)
    }

    fn forward(&self, batch: &[&CaseRecord]) -> Result<Forward> {
        let inputs = self.batch_inputs(batch)?;
        let target = stack_images(&batch.iter().map(|c| &c.y).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        g.freeze_prefix(format!("{DISC_PREFIX}."));
        let xs: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let y = g.input(target.clone());
        let out = generator_forward(&mut g, &self.generator, &self.net, self.variant(), &xs)?;
        Ok(Forward {
            graph: g,
            xs,
            y,
            out,
            inputs,
            target,
        })
    }

    /// Minimizes the discriminator loss on the detached synthesis.
    fn update_discriminator(&mut self, f: &Forward, lr: f64) -> Result<f64> {
        let mut gd = Graph::new();
        let dxs: Vec<Var> = f.inputs.iter().map(|t| gd.input(t.clone())).collect();
        let real = gd.input(f.target.clone());
        let fake = gd.input(f.graph.value(f.out.y_hat).clone());
        let real_logits = discriminator_forward(&mut gd, &self.discriminator, &dxs, real)?;
        let fake_logits = discriminator_forward(&mut gd, &self.discriminator, &dxs, fake)?;
        let real_prob = gd.sigmoid(real_logits)?;
        let fake_prob = gd.sigmoid(fake_logits)?;
        let l_d = loss_discriminator(&mut gd, real_prob, fake_prob)?;
        let value = gd.value(l_d).data()[0] as f64;
        let grads = gd.backward(l_d)?;
        let adam = self.config.adam();
        adam_step(&mut self.discriminator, grads.params(), &mut self.opt_d, lr, &adam)?;
        Ok(value)
    }

    /// Minimizes L_G + λ2·L_Rec + λ3·L_P over generator and reconstructors
    /// with the discriminator frozen. `l_d` of the result is left at zero.
    fn update_generator(&mut self, f: Forward, lr: f64, percep: &PerceptualNet<f32>) -> Result<LossComponents> {
        let cfg = &self.config;
        let Forward { graph: mut g, xs, y, out, .. } = f;
        let logits = discriminator_forward(&mut g, &self.discriminator, &xs, out.y_hat)?;
        let prob = g.sigmoid(logits)?;
        let gl = loss_generator(&mut g, prob, out.y_hat, y, cfg.lambda1, cfg.gan_mode)?;
        let mut objective = gl.total;
        let mut l_rec = 0.0;
        if !out.reconstructions.is_empty() {
            let r = loss_reconstruction(&mut g, &out.reconstructions)?;
            l_rec = g.value(r).data()[0] as f64;
            let w = g.scale(r, cfg.lambda2)?;
            objective = g.add(objective, w)?;
        }
        let (lp, layers) = loss_perceptual(&mut g, percep, y, out.y_hat, &cfg.alpha)?;
        let w = g.scale(lp, cfg.lambda3)?;
        objective = g.add(objective, w)?;
        let scalar = |g: &Graph<f32>, v: Var| g.value(v).data()[0] as f64;
        let components = LossComponents {
            g_adv: scalar(&g, gl.adversarial),
            l1: scalar(&g, gl.l1),
            l_d: 0.0,
            l_rec,
            l_p: scalar(&g, lp),
            l_p_layers: layers.map(|v| scalar(&g, v)),
        };
        let grads = g.backward(objective)?;
        let adam = cfg.adam();
        adam_step(&mut self.generator, grads.params(), &mut self.opt_g, lr, &adam)?;
        Ok(components)
    }

    /// A discriminator update alone; returns its loss.
    pub fn discriminator_step(&mut self, batch: &[&CaseRecord], lr: f64) -> Result<f64> {
        let f = self.forward(batch)?;
        self.update_discriminator(&f, lr)
    }

    /// A generator + reconstructor update alone.
    pub fn generator_step(&mut self, batch: &[&CaseRecord], lr: f64, percep: &PerceptualNet<f32>) -> Result<LossComponents> {
        let f = self.forward(batch)?;
        self.update_generator(f, lr, percep)
    }

    /// One discriminator step followed by one generator + reconstructor
    /// step, sharing a single generator forward pass.
    pub fn train_step(&mut self, batch: &[&CaseRecord], lr: f64, percep: &PerceptualNet<f32>) -> Result<LossComponents> {
        let f = self.forward(batch)?;
        let l_d = self.update_discriminator(&f, lr)?;
        let mut c = self.update_generator(f, lr, percep)?;
        c.l_d = l_d;
        Ok(c)
    }

    /// Trains for the remaining epochs. `on_step` sees every step,
    /// `on_epoch` runs after each completed epoch.
    pub fn fit(
        &mut self,
        train: &[&CaseRecord],
        mut on_step: impl FnMut(&StepLog) -> Result<()>,
        mut on_epoch: impl FnMut(&Model) -> Result<()>,
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::config("the training split is empty"));
        }
        let percep = PerceptualNet::new();
        let weights = self.config.weights();
        let per_epoch = train.len().div_ceil(self.config.batch_size);
        while self.epoch < self.config.epochs {
            let epoch = self.epoch;
            let lr = lr_schedule(epoch, self.config.lr, self.config.lr_decay, self.config.lr_decay_every);
            let order = epoch_order(self.config.seed, epoch, train.len());
            for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
                let batch: Vec<&CaseRecord> = idx.iter().map(|&i| train[i]).collect();
                let c = self.train_step(&batch, lr, &percep)?;
                on_step(&StepLog {
                    step: epoch * per_epoch + b,
                    epoch,
                    losses: loss_total(&c, &weights),
                })?;
            }
            self.epoch += 1;
            on_epoch(self)?;
        }
        Ok(())
    }

    pub fn evaluate(&self, cases: &[&CaseRecord], peak: PsnrPeak) -> Result<MetricsReport> {
        let preds = self.synthesize_cases(cases)?;
        let triples: Vec<_> = cases
            .iter()
            .zip(preds)
            .map(|(c, p)| (c.id.clone(), c.y.clone(), p))
            .collect();
        evaluate_pairs(&triples, &PerceptualNet::new(), &self.config.alpha, peak)
    }
}

/// Case order for `epoch`: a fixed permutation derived from the seed.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Files produced by [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub steps: usize,
    pub final_checkpoint: PathBuf,
    /// Held-out report; `None` when the test split is empty.
    pub report: Option<MetricsReport>,
}

pub fn checkpoint_dir(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("ckpt_epoch_{epoch}"))
}

/// Full run: config.json, losses.csv, per-epoch checkpoints and a
/// held-out metrics.csv under `out`.
pub fn train(config: &TrainConfig, dataset: &Dataset, out: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let train_cases = dataset.split(Split::Train);
    if train_cases.is_empty() {
        return Err(Error::config("the training split is empty"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, config.to_json()).map_err(|e| Error::io(&cfg_path, e))?;
    let loss_path = out.join(LOSSES_FILE);
    let file = fs::File::create(&loss_path).map_err(|e| Error::io(&loss_path, e))?;
    let mut losses = std::io::BufWriter::new(file);
    writeln!(losses, "{LOSSES_HEADER}").map_err(|e| Error::io(&loss_path, e))?;

    let mut model = Model::new(config.clone())?;
    let mut steps = 0;
    let every = config.checkpoint_every;
    model.fit(
        &train_cases,
        |s| {
            steps += 1;
            writeln!(losses, "{}", s.csv_line()).map_err(|e| Error::io(&loss_path, e))
        },
        |m| {
            if m.epoch == m.config.epochs || (every > 0 && m.epoch % every == 0) {
                save_checkpoint(m, &checkpoint_dir(out, m.epoch))?;
            }
            Ok(())
        },
    )?;
    losses.flush().map_err(|e| Error::io(&loss_path, e))?;

    let test = dataset.split(Split::Test);
    let report = if test.is_empty() {
        None
    } else {
        let r = model.evaluate(&test, PsnrPeak::default())?;
        let path = out.join(METRICS_FILE);
        fs::write(&path, r.to_csv()).map_err(|e| Error::io(&path, e))?;
        Some(r)
    };
    Ok(TrainOutcome {
        run_dir: out.to_path_buf(),
        steps,
        final_checkpoint: checkpoint_dir(out, config.epochs),
        report,
    })
}

/// Trains in memory (no files) and evaluates on the test split.
pub fn train_and_evaluate(config: &TrainConfig, dataset: &Dataset) -> Result<(Model, MetricsReport)> {
    let mut model = Model::new(config.clone())?;
    model.fit(&dataset.split(Split::Train), |_| Ok(()), |_| Ok(()))?;
    let test = dataset.split(Split::Test);
    if test.is_empty() {
        return Err(Error::config("the test split is empty"));
    }
    let report = model.evaluate(&test, PsnrPeak::default())?;
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: VariantKind,
    pub seed: u64,
    pub ssim: f64,
    pub psnr_db: f64,
    pub nmse: f64,
    pub lp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(ABLATION_HEADER);
        s.push('\n');
        for r in &self.rows {
            let psnr = if r.psnr_db.is_infinite() { "inf".to_string() } else { r.psnr_db.to_string() };
            let _ = writeln!(s, "{},{},{},{},{},{}", r.variant, r.seed, r.ssim, psnr, r.nmse, r.lp);
        }
        s
    }

    /// Mean SSIM over seeds for one variant.
    pub fn mean_ssim(&self, variant: VariantKind) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).map(|r| r.ssim).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Trains every variant under the same budget for each seed.
pub fn run_ablation(config: &TrainConfig, dataset: &Dataset, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let mut rows = Vec::with_capacity(4 * seeds.len());
    for &seed in seeds {
        for variant in VariantKind::ALL {
            let cfg = TrainConfig {
                seed,
                variant,
                ..config.clone()
            };
            let (_, report) = train_and_evaluate(&cfg, dataset)?;
            rows.push(AblationRow {
                variant,
                seed,
                ssim: report.mean.ssim,
                psnr_db: report.mean.psnr,
                nmse: report.mean.nmse,
                lp: report.mean.lp,
            });
        }
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_round_trip_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
        let partial = TrainConfig::from_json(r#"{"epochs": 3, "variant": "mpf"}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.variant, VariantKind::Mpf);
        assert_eq!(partial.lambda3, 200.0);
        assert!(matches!(TrainConfig::from_json(r#"{"epochs": 0}"#), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_json(r#"{"lr": -1.0}"#), Err(Error::Config(_))));
    }

    #[test]
    fn epoch_orders_are_permutations_and_vary() {
        let a = epoch_order(3, 0, 10);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(3, 0, 10));
        assert_ne!(a, epoch_order(3, 1, 10));
    }

    #[test]
    fn ablation_csv_shape() {
        let t = AblationTable {
            rows: vec![AblationRow {
                variant: VariantKind::Mpfa,
                seed: 2,
                ssim: 0.5,
                psnr_db: f64::INFINITY,
                nmse: 0.1,
                lp: 0.25,
            }],
        };
        assert_eq!(t.to_csv(), "variant,seed,ssim,psnr_db,nmse,lp\nmpfa,2,0.5,inf,0.1,0.25\n");
        assert_eq!(t.mean_ssim(VariantKind::Mpfa), Some(0.5));
        assert_eq!(t.mean_ssim(VariantKind::Mp), None);
    }
}
