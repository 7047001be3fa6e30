//! Masked-diffusion training: the weighted cross-entropy objective,
//! condition dropout for guidance, AdamW with warmup plus inverse-sqrt decay,
//! gradient clipping and an EMA of the weights.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LayoutSeq, TokenId, MASK, SEP};
use crate::denoiser::{LogitGrid, TinyDenoiser};
use crate::diffusion::{NoiseSchedule, NoisyState};
use crate::{seeded_rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub cfg_dropout_prob: f64,
    pub epsilon_min: f64,
    pub seed: u64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.01,
            ema_decay: 0.999,
            cfg_dropout_prob: 0.1,
            epsilon_min: crate::diffusion::DEFAULT_EPSILON_MIN,
            seed: 0,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 || self.warmup_steps == 0 {
            return bad("steps, batch_size and warmup_steps must be positive");
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be finite and >= 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.cfg_dropout_prob) {
            return bad("cfg_dropout_prob must lie in [0, 1)");
        }
        if !(self.epsilon_min > 0.0 && self.epsilon_min < 1.0) {
            return bad("epsilon_min must lie in (0, 1)");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub masked_tokens: usize,
    pub t_mean: f64,
}

/// `(1/t) * sum_{i in masked} -log p(x0_i)`: a one-sample estimate of the
/// continuous-time bound with `alpha_t = 1 - t`.
pub fn masked_ce_loss(
    logits: &LogitGrid,
    x0_target: &[TokenId],
    masked: &[usize],
    t: f64,
    epsilon_min: f64,
) -> Result<f64> {
    if !(t >= epsilon_min && t <= 1.0) {
        return Err(Error::domain(format!("t = {t} outside [{epsilon_min}, 1]")));
    }
    if x0_target.len() != logits.rows() {
        return Err(Error::shape(logits.rows(), x0_target.len()));
    }
    let ce: f64 = masked
        .iter()
        .map(|&i| -logits.log_prob(i, x0_target[i] as usize))
        .sum();
    Ok(ce / t)
}

/// With probability `prob`, replaces the condition with the null condition
/// (content tokens masked, separator kept). Consumes one uniform.
pub fn dropout_condition<R: Rng + ?Sized>(condition: &[TokenId], prob: f64, rng: &mut R) -> Vec<TokenId> {
    let drop = rng.random::<f64>() < prob;
    condition
        .iter()
        .map(|&t| if drop && t != SEP { MASK } else { t })
        .collect()
}

/// Linear warmup to `peak_lr`, then `peak_lr * sqrt(warmup / step)`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let step = step.max(1) as f64;
    let warm = config.warmup_steps as f64;
    if step <= warm {
        config.peak_lr * step / warm
    } else {
        config.peak_lr * (warm / step).sqrt()
    }
}

pub fn ema_update(shadow: &mut [f64], params: &[f64], decay: f64) -> Result<()> {
    if shadow.len() != params.len() {
        return Err(Error::shape(params.len(), shadow.len()));
    }
    for (s, &p) in shadow.iter_mut().zip(params) {
        *s = decay * *s + (1.0 - decay) * p;
    }
    Ok(())
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + cfg.weight_decay * params[i]);
        }
    }
}

/// One noised training example: the model input and the clean target.
#[derive(Debug, Clone)]
pub struct NoisyExample {
    pub state: NoisyState,
    pub clean_target: Vec<TokenId>,
}

/// Batch objective: per-example `(1/t) * CE` over masked positions, divided
/// by the total masked-token count. Gradients are added into `grad`.
/// Returns the loss and the masked count.
pub fn batch_loss_and_grad(
    net: &TinyDenoiser,
    batch: &[NoisyExample],
    grad: &mut [f64],
) -> Result<(f64, usize)> {
    let total: usize = batch.iter().map(|e| e.state.num_masked()).sum();
    if total == 0 {
        return Ok((0.0, 0));
    }
    let mut sum = 0.0;
    let mut comp = 0.0;
    for ex in batch {
        let st = &ex.state;
        let w = 1.0 / (st.t() * total as f64);
        let weights: Vec<f64> = st
            .target()
            .iter()
            .map(|&tok| if tok == MASK { w } else { 0.0 })
            .collect();
        if weights.iter().all(|&x| x == 0.0) {
            continue;
        }
        let l = net.loss_and_grad(st.tokens(), st.condition_len(), &ex.clean_target, &weights, grad)?;
        // Neumaier summation keeps the total independent of batch order.
        let s = sum + l;
        if sum.abs() >= l.abs() {
            comp += (sum - s) + l;
        } else {
            comp += (l - s) + sum;
        }
        sum = s;
    }
    Ok((sum + comp, total))
}

/// Owns the raw parameters, the EMA shadow, optimizer state and the
/// training generator.
pub struct Trainer {
    model: TinyDenoiser,
    ema: Vec<f64>,
    opt: AdamW,
    schedule: NoiseSchedule,
    config: TrainConfig,
    rng: crate::Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: TinyDenoiser, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::new(config.epsilon_min)?;
        Ok(Trainer {
            ema: model.params().to_vec(),
            opt: AdamW::new(model.param_count()),
            schedule,
            rng: seeded_rng(config.seed),
            model,
            config,
            step: 0,
        })
    }

    pub fn model(&self) -> &TinyDenoiser {
        &self.model
    }

    pub fn ema_params(&self) -> &[f64] {
        &self.ema
    }

    /// A snapshot denoiser carrying the EMA weights.
    pub fn ema_model(&self) -> TinyDenoiser {
        TinyDenoiser::from_params(*self.model.arch(), self.ema.clone())
            .expect("EMA shadow has the model's shape")
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Noises one example: draws `t`, drops the condition, masks the target.
    fn noise(&mut self, ex: &LayoutSeq) -> Result<NoisyExample> {
        let t = self.schedule.sample_t(&mut self.rng);
        let mut tokens = dropout_condition(ex.condition(), self.config.cfg_dropout_prob, &mut self.rng);
        tokens.extend_from_slice(ex.target());
        let state = self.schedule.forward_mask(&tokens, ex.condition_len, t, &mut self.rng)?;
        Ok(NoisyExample {
            state,
            clean_target: ex.target().to_vec(),
        })
    }

    pub fn train_step(&mut self, batch: &[LayoutSeq]) -> Result<LossRecord> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        self.step += 1;
        let step = self.step;
        let noisy = batch.iter().map(|ex| self.noise(ex)).collect::<Result<Vec<_>>>()?;
        let t_mean = noisy.iter().map(|e| e.state.t()).sum::<f64>() / noisy.len() as f64;

        let mut grad = vec![0.0; self.model.param_count()];
        let (loss, masked_tokens) = batch_loss_and_grad(&self.model, &noisy, &mut grad).map_err(|e| match e {
            Error::Divergence { msg, .. } => Error::Divergence { step, msg },
            other => other,
        })?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step,
                msg: format!("non-finite loss or gradient (loss {loss})"),
            });
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > self.config.grad_clip {
            let scale = self.config.grad_clip / norm;
            grad.iter_mut().for_each(|g| *g *= scale);
        }
        let lr = lr_at(step, &self.config);
        if lr > 0.0 {
            self.opt.update(self.model.params_mut(), &grad, lr, &self.config);
        }
        ema_update(&mut self.ema, self.model.params(), self.config.ema_decay)?;
        Ok(LossRecord {
            step,
            loss,
            lr,
            masked_tokens,
            t_mean,
        })
    }

    /// Runs `config.steps` steps on batches drawn with replacement.
    pub fn run<F>(&mut self, data: &[LayoutSeq], mut on_step: F) -> Result<()>
    where
        F: FnMut(&LossRecord, &Trainer) -> Result<()>,
    {
        if data.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        while self.step < self.config.steps {
            let batch: Vec<LayoutSeq> = (0..self.config.batch_size)
                .map(|_| data.choose(&mut self.rng).unwrap().clone())
                .collect();
            let rec = self.train_step(&batch)?;
            on_step(&rec, self)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PAD;
    use crate::denoiser::Architecture;

    fn cfg() -> TrainConfig {
        TrainConfig {
            warmup_steps: 1000,
            peak_lr: 2.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_points() {
        let c = cfg();
        assert_eq!(lr_at(1000, &c), 2.0);
        assert!((lr_at(4000, &c) - 1.0).abs() < 1e-15);
        assert!((lr_at(1, &c) - 2.0 / 1000.0).abs() < 1e-15);
    }

    #[test]
    fn ema_cases() {
        let mut s = vec![1.0, 2.0];
        ema_update(&mut s, &[5.0, 6.0], 0.0).unwrap();
        assert_eq!(s, vec![5.0, 6.0]);

        let mut s = vec![0.0];
        for n in 1..=50 {
            ema_update(&mut s, &[1.0], 0.999).unwrap();
            let gap = 1.0 - s[0];
            assert!((gap - 0.999f64.powi(n)).abs() < 1e-12);
        }

        let mut s = vec![3.0, 4.0];
        for _ in 0..100 {
            ema_update(&mut s, &[3.0, 4.0], 0.999).unwrap();
        }
        assert_eq!(s, vec![3.0, 4.0]);
        assert!(ema_update(&mut s, &[1.0], 0.5).is_err());
    }

    #[test]
    fn loss_cases() {
        let v = 6;
        let mut probs = vec![0.0; 2 * v];
        probs[4] = 1.0;
        probs[v + 5] = 1.0;
        let point = LogitGrid::from_probs(2, v, &probs).unwrap();
        assert_eq!(masked_ce_loss(&point, &[4, 5], &[0, 1], 0.5, 1e-5).unwrap(), 0.0);

        // Uniform over V: CE = ln V, weight 1/t.
        let uni = LogitGrid::from_scores(2, v, vec![0.0; 2 * v]).unwrap();
        let l1 = masked_ce_loss(&uni, &[4, 5], &[0], 1.0, 1e-5).unwrap();
        assert!((l1 - (v as f64).ln()).abs() < 1e-12);
        let l_half = masked_ce_loss(&uni, &[4, 5], &[0], 0.5, 1e-5).unwrap();
        assert!((l_half - 2.0 * l1).abs() < 1e-12);
        assert!(matches!(
            masked_ce_loss(&uni, &[4, 5], &[0], 1e-6, 1e-5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn dropout_cases() {
        let mut rng = seeded_rng(0);
        let c = [7, 8, 9, SEP];
        for _ in 0..100 {
            assert_eq!(dropout_condition(&c, 0.0, &mut rng), c.to_vec());
        }
        assert_eq!(
            dropout_condition(&c, 1.0 - 1e-12, &mut rng),
            vec![MASK, MASK, MASK, SEP]
        );
        let n = 100_000;
        let p = 0.1;
        let drops = (0..n)
            .filter(|_| dropout_condition(&c, p, &mut rng)[0] == MASK)
            .count();
        let rate = drops as f64 / n as f64;
        assert!((rate - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt());
    }

    fn tiny_setup() -> (TinyDenoiser, Vec<LayoutSeq>) {
        let arch = Architecture {
            vocab_size: 10,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 16,
            max_len: 8,
        };
        let net = TinyDenoiser::init(arch, &mut seeded_rng(1)).unwrap();
        let data = vec![
            LayoutSeq {
                tokens: vec![4, SEP, 5, 6, PAD],
                condition_len: 2,
                target_len: 3,
            },
            LayoutSeq {
                tokens: vec![7, 8, SEP, 9, PAD, PAD],
                condition_len: 3,
                target_len: 3,
            },
        ];
        (net, data)
    }

    #[test]
    fn zero_lr_keeps_params_but_moves_ema() {
        let (net, data) = tiny_setup();
        let mut config = TrainConfig {
            peak_lr: 0.0,
            ema_decay: 0.5,
            batch_size: 2,
            steps: 3,
            ..TrainConfig::default()
        };
        config.seed = 3;
        let start = net.params().to_vec();
        let mut tr = Trainer::new(net, config).unwrap();
        let rec = tr.train_step(&data).unwrap();
        assert_eq!(rec.lr, 0.0);
        assert_eq!(tr.model().params(), &start[..]);
        // EMA of a constant sequence equal to its start stays put.
        assert_eq!(tr.ema_params(), &start[..]);
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let run = || {
            let (net, data) = tiny_setup();
            let config = TrainConfig {
                steps: 20,
                batch_size: 4,
                warmup_steps: 5,
                seed: 11,
                ..TrainConfig::default()
            };
            let mut tr = Trainer::new(net, config).unwrap();
            let mut losses = Vec::new();
            tr.run(&data, |r, _| {
                losses.push(r.loss);
                Ok(())
            })
            .unwrap();
            (tr.model().params().to_vec(), tr.ema_params().to_vec(), losses)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batch_loss_ignores_order() {
        let (net, data) = tiny_setup();
        let sched = NoiseSchedule::default();
        let mut rng = seeded_rng(5);
        let mut batch = Vec::new();
        for i in 0..6 {
            let ex = &data[i % 2];
            let st = sched.forward_mask(&ex.tokens, ex.condition_len, 0.3 + 0.1 * i as f64, &mut rng).unwrap();
            batch.push(NoisyExample {
                state: st,
                clean_target: ex.target().to_vec(),
            });
        }
        let mut g = vec![0.0; net.param_count()];
        let (a, _) = batch_loss_and_grad(&net, &batch, &mut g).unwrap();
        batch.reverse();
        batch.swap(0, 3);
        let (b, _) = batch_loss_and_grad(&net, &batch, &mut g).unwrap();
        assert!((a - b).abs() <= 1e-9);
        assert!(a >= 0.0);
    }

    #[test]
    fn ema_gap_is_bounded_by_updates() {
        let (net, data) = tiny_setup();
        let config = TrainConfig {
            steps: 60,
            batch_size: 2,
            warmup_steps: 5,
            peak_lr: 0.05,
            ema_decay: 0.9,
            ..TrainConfig::default()
        };
        let decay = config.ema_decay;
        let mut tr = Trainer::new(net, config).unwrap();
        let mut prev = tr.model().params().to_vec();
        let mut max_update: f64 = 0.0;
        tr.run(&data, |_, tr| {
            let p = tr.model().params();
            let upd = p.iter().zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            max_update = max_update.max(upd);
            prev = p.to_vec();
            let gap = p
                .iter()
                .zip(tr.ema_params())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(gap <= max_update / (1.0 - decay) + 1e-12);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn invalid_config_is_rejected() {
        let (net, _) = tiny_setup();
        let bad = TrainConfig {
            ema_decay: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(Trainer::new(net, bad), Err(Error::Config(_))));
    }
}
