use mdm::corpus::{layout, LayoutSeq, PairExample, Vocab, MASK, SEP};
use mdm::denoiser::{Architecture, Denoiser, TinyDenoiser};
use mdm::diffusion::NoisyState;
use mdm::training::{TrainConfig, Trainer};
use mdm::{seeded_rng, Rng};
use rand::Rng as _;

fn train(data: &[LayoutSeq], vocab_size: usize, max_len: usize, cfg: TrainConfig) -> (Trainer, Vec<f64>) {
    let arch = Architecture {
        vocab_size,
        embed_dim: 32,
        layers: 2,
        heads: 4,
        ff_dim: 64,
        max_len,
    };
    let model = TinyDenoiser::init(arch, &mut seeded_rng(cfg.seed)).unwrap();
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let mut losses = Vec::new();
    trainer
        .run(data, |rec, _| {
            losses.push(rec.loss);
            Ok(())
        })
        .unwrap();
    (trainer, losses)
}

#[test]
fn single_example_is_memorized() {
    let pair = PairExample::new("red fox runs", "the fox ran fast");
    let vocab = Vocab::from_examples(std::slice::from_ref(&pair));
    let data = vec![layout(&pair, &vocab, 3, 4).unwrap()];
    let cfg = TrainConfig {
        steps: 2000,
        batch_size: 4,
        peak_lr: 3e-3,
        cfg_dropout_prob: 0.0,
        ..TrainConfig::default()
    };
    let (trainer, losses) = train(&data, vocab.len(), 8, cfg);
    let tail = &losses[losses.len() - 100..];
    let mean_tail = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(mean_tail < 0.05, "final loss {mean_tail}");

    let model = trainer.ema_model();
    let state = NoisyState::fully_masked(data[0].condition(), 4);
    let grid = model.predict(&state).unwrap();
    for (i, &want) in data[0].target().iter().enumerate() {
        assert_eq!(grid.argmax_unmasked(i).0, want as usize);
        assert!(grid.prob(i, want as usize) > 0.9);
    }
}

#[test]
fn unconditional_prediction_tracks_marginals() {
    // Target is "a" w.p. 0.7 and "b" otherwise, independent of the source.
    let vocab = Vocab::from_words(["x", "a", "b"]);
    let mut rng = seeded_rng(7);
    let data: Vec<LayoutSeq> = (0..1000)
        .map(|k| {
            let t = if k % 10 < 7 { "a" } else { "b" };
            layout(&PairExample::new("x", t), &vocab, 1, 1).unwrap()
        })
        .collect();
    let cfg = TrainConfig {
        steps: 2000,
        batch_size: 64,
        peak_lr: 1e-3,
        cfg_dropout_prob: 0.5,
        seed: rng.random(),
        ..TrainConfig::default()
    };
    let (trainer, _) = train(&data, vocab.len(), 3, cfg);
    let model = trainer.ema_model();
    let a = vocab.id("a").unwrap() as usize;
    let b = vocab.id("b").unwrap() as usize;
    for cond in [vec![MASK, SEP], vec![vocab.id("x").unwrap(), SEP]] {
        let grid = model.predict(&NoisyState::fully_masked(&cond, 1)).unwrap();
        assert!((grid.prob(0, a) - 0.7).abs() < 0.05, "{cond:?}: p(a) = {}", grid.prob(0, a));
        assert!((grid.prob(0, b) - 0.3).abs() < 0.05, "{cond:?}: p(b) = {}", grid.prob(0, b));
    }
}

#[test]
fn predictions_ignore_the_time_value() {
    let mut rng: Rng = seeded_rng(3);
    let model = TinyDenoiser::init(Architecture::desk(12, 9), &mut rng).unwrap();
    for _ in 0..20 {
        let mut tokens = vec![rng.random_range(4..12), rng.random_range(4..12), SEP];
        for _ in 0..6 {
            tokens.push(if rng.random::<bool>() { MASK } else { rng.random_range(4..12) });
        }
        let state = NoisyState::new(tokens, 3, 0.5).unwrap();
        let a = model.predict(&state.with_t(0.05).unwrap()).unwrap();
        let b = model.predict(&state.with_t(1.0).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn decoding_unmasks_every_position() {
    use mdm::guidance::GuidanceScale;
    use mdm::sampler::{decode, DecodeConfig, DecodeMode};
    let mut rng = seeded_rng(9);
    let model = TinyDenoiser::init(Architecture::desk(10, 10), &mut rng).unwrap();
    for mode in [DecodeMode::Ancestral, DecodeMode::GreedyTopk] {
        for steps in [1, 3, 6, 12] {
            let dcfg = DecodeConfig {
                steps,
                target_len: 6,
                gamma: GuidanceScale::new(1.5).unwrap(),
                seed: 0,
                mode,
            };
            let out = decode(&model, &[5, 6, SEP], &dcfg, &mut rng).unwrap();
            assert_eq!(out.len(), 6);
            assert!(out.iter().all(|&t| t != MASK), "{mode:?} T={steps}: {out:?}");
        }
    }
}
