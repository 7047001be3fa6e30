//! Implementations of the `train`, `decode`, `sweep`, `eval` and `gen` commands.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, VerifierKind, Weights};
use super::write_atomic;
use crate::corpus::{
    condition_tokens, detokenize, gen_synthetic_task, layout, read_jsonl, tokenize, write_jsonl, SyntheticTask,
    TokenId, Vocab,
};
use crate::denoiser::{checkpoint, Denoiser, TinyDenoiser};
use crate::guidance::GuidanceScale;
use crate::metrics::{evaluate_run, EvalReport};
use crate::sampler::{decode, DecodeConfig, DecodeMode};
use crate::svdd::{svdd_decode, SvddConfig, Verifier};
use crate::training::{LossRecord, Trainer};
use crate::verifier::{load_wordvec_table, Embedder, HashedEmbedder, RemoteEmbedder, WordVecEmbedder};
use crate::{seeded_rng, Error, Result};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const RAW_CKPT: &str = "raw.ckpt";
pub const EMA_CKPT: &str = "ema.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Generator for item `index` of a decode seeded with `seed`. Items get
/// disjoint streams so results do not depend on processing order.
pub fn item_rng(seed: u64, index: usize) -> crate::Rng {
    let mut rng = seeded_rng(seed);
    rng.set_stream(index as u64);
    rng
}

fn require(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| Error::Config(format!("{key} is not set")))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let train_path = require(&cfg.train_data, "data.train")?;
    if !train_path.exists() {
        return Err(Error::Config(format!("dataset {} does not exist", train_path.display())));
    }
    let pairs = read_jsonl(&train_path)?;
    let vocab = Vocab::from_examples(&pairs);
    let data = pairs
        .iter()
        .map(|p| layout(p, &vocab, cfg.max_source_len, cfg.max_target_len))
        .collect::<Result<Vec<_>>>()?;
    let arch = cfg.architecture(vocab.len());
    let model = TinyDenoiser::init(arch, &mut seeded_rng(cfg.train.seed))?;
    info!(
        "training on {} pairs, vocab {}, {} parameters",
        data.len(),
        vocab.len(),
        model.param_count()
    );

    fs::create_dir_all(&cfg.output_dir)?;
    vocab.save(&cfg.output_dir.join(VOCAB_FILE))?;
    write_atomic(&cfg.output_dir.join(CONFIG_FILE), cfg.dump().as_bytes())?;

    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let mut log = csv::Writer::from_writer(Vec::new());
    let every = (cfg.train.steps / 20).max(1);
    trainer.run(&data, |rec: &LossRecord, _| {
        log.serialize(rec)?;
        if rec.step.is_multiple_of(every) || rec.step == 1 {
            info!("step {:>6}  loss {:.4}  lr {:.2e}", rec.step, rec.loss, rec.lr);
        }
        Ok(())
    })?;
    let bytes = log.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&cfg.output_dir.join(TRAIN_LOG), &bytes)?;
    checkpoint::save(trainer.model(), &cfg.output_dir.join(RAW_CKPT))?;
    checkpoint::save(&trainer.ema_model(), &cfg.output_dir.join(EMA_CKPT))?;
    Ok(())
}

/// Loads the vocabulary and checkpoint written by `train`.
pub fn load_model(cfg: &RunConfig) -> Result<(Vocab, TinyDenoiser)> {
    let vocab = Vocab::load(&cfg.output_dir.join(VOCAB_FILE))?;
    let file = match cfg.weights {
        Weights::Ema => EMA_CKPT,
        Weights::Raw => RAW_CKPT,
    };
    let model = checkpoint::load(&cfg.output_dir.join(file))?;
    let arch = model.arch();
    if arch.vocab_size != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocabulary {} does not match vocab.txt ({})",
            arch.vocab_size,
            vocab.len()
        )));
    }
    if arch.max_len < cfg.layout_len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint accepts layouts up to {} tokens, config needs {}",
            arch.max_len,
            cfg.layout_len()
        )));
    }
    Ok((vocab, model))
}

pub fn build_embedder(cfg: &RunConfig) -> Result<Option<Box<dyn Embedder>>> {
    Ok(match cfg.verifier {
        VerifierKind::None => None,
        VerifierKind::WordVec => {
            let path = require(&cfg.wordvec_path, "verifier.wordvec_path")?;
            Some(Box::new(WordVecEmbedder(load_wordvec_table(&path)?)))
        }
        VerifierKind::Hashed => Some(Box::new(HashedEmbedder {
            dim: cfg.hashed_dim,
            seed: cfg.hashed_seed,
        })),
        VerifierKind::Remote => {
            let mut r = RemoteEmbedder::new(&cfg.endpoint);
            r.max_retries = cfg.max_retries;
            r.timeout = Duration::from_secs_f64(cfg.timeout_secs);
            Some(Box::new(r))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decoded {
    pub source: String,
    pub output: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

/// Decodes one source sentence. SVDD runs whenever `M > 1`; with a verifier
/// and `M = 1` the output is the plain decode and the reward is its score.
#[allow(clippy::too_many_arguments)]
pub fn decode_one<D: Denoiser + ?Sized>(
    denoiser: &D,
    vocab: &Vocab,
    source: &[String],
    max_source_len: usize,
    dcfg: &DecodeConfig,
    scfg: &SvddConfig,
    embedder: Option<&dyn Embedder>,
    rng: &mut crate::Rng,
) -> Result<Decoded> {
    if source.is_empty() {
        return Err(Error::Empty("source"));
    }
    if source.len() > max_source_len {
        return Err(Error::TooLong {
            what: "source",
            len: source.len(),
            max: max_source_len,
        });
    }
    let source_text = source.join(" ");
    let condition = condition_tokens(&tokenize(&source_text, vocab));
    let (tokens, reward): (Vec<TokenId>, Option<f64>) = match embedder {
        Some(emb) if scfg.m > 1 => {
            if dcfg.mode != DecodeMode::Ancestral {
                return Err(Error::Config("svdd.m > 1 requires decode.mode = ancestral".into()));
            }
            let verifier = Verifier::new(emb, vocab, &condition)?;
            let out = svdd_decode(denoiser, &condition, dcfg, scfg, &verifier, rng)?;
            (out.tokens, Some(out.reward))
        }
        Some(emb) => {
            let tokens = decode(denoiser, &condition, dcfg, rng)?;
            let verifier = Verifier::new(emb, vocab, &condition)?;
            let (r, _) = verifier.score(std::slice::from_ref(&tokens))?.remove(0);
            (tokens, Some(r))
        }
        None if scfg.m > 1 => return Err(Error::Config("svdd.m > 1 requires a verifier".into())),
        None => (decode(denoiser, &condition, dcfg, rng)?, None),
    };
    Ok(Decoded {
        source: source_text,
        output: detokenize(&tokens, vocab)?,
        reward,
    })
}

#[derive(Deserialize)]
struct SourceLine {
    source: String,
    #[serde(default)]
    target: Option<String>,
}

/// Source words and optional target words.
pub type SourceRow = (Vec<String>, Option<Vec<String>>);

/// Reads `{"source": ..., "target"?: ...}` lines.
pub fn read_sources(path: &Path) -> Result<Vec<SourceRow>> {
    let words = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: SourceLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((words(&l.source), l.target.as_deref().map(words)));
    }
    Ok(out)
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

pub fn cmd_decode(cfg: &RunConfig, input: &Path, output: &Path) -> Result<()> {
    cfg.validate()?;
    let scfg = cfg.svdd_config()?;
    let dcfg = cfg.decode_config();
    let (vocab, model) = load_model(cfg)?;
    let embedder = build_embedder(cfg)?;
    let sources = read_sources(input)?;
    let mut out = Vec::with_capacity(sources.len());
    for (i, (src, _)) in sources.iter().enumerate() {
        let mut rng = item_rng(dcfg.seed, i);
        out.push(decode_one(
            &model,
            &vocab,
            src,
            cfg.max_source_len,
            &dcfg,
            &scfg,
            embedder.as_deref(),
            &mut rng,
        )?);
    }
    write_atomic(output, &to_jsonl(&out)?)?;
    info!("decoded {} inputs into {}", out.len(), output.display());
    Ok(())
}

/// One sweep row. Every knob that affects a cell is a column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub gamma: f64,
    pub m: usize,
    pub seed: u64,
    pub mode: String,
    pub selection: String,
    pub alpha: Option<f64>,
    pub value_fill: String,
    pub target_len: usize,
    pub weights: String,
    pub verifier: String,
    pub n: usize,
    pub bleu: Option<f64>,
    pub rouge_l: Option<f64>,
    pub sari: Option<f64>,
    pub exact_match: Option<f64>,
    pub reward: Option<f64>,
    pub error: String,
}

impl SweepRow {
    fn key(&self) -> (usize, u64, usize, u64) {
        (self.steps, self.gamma.to_bits(), self.m, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub steps: usize,
    pub gamma: f64,
    pub m: usize,
    pub seed: u64,
}

pub fn sweep_cells(cfg: &RunConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &steps in &cfg.sweep_steps {
        for &gamma in &cfg.sweep_gamma {
            for &m in &cfg.sweep_m {
                for &seed in &cfg.sweep_seeds {
                    cells.push(Cell { steps, gamma, m, seed });
                }
            }
        }
    }
    cells
}

/// Metrics and mean reward of one decode configuration over a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub metrics: BTreeMap<String, f64>,
    pub reward: Option<f64>,
    pub outputs: Vec<Decoded>,
}

#[allow(clippy::too_many_arguments)]
pub fn run_cell<D: Denoiser + ?Sized>(
    denoiser: &D,
    vocab: &Vocab,
    test: &[(Vec<String>, Vec<String>)],
    max_source_len: usize,
    dcfg: &DecodeConfig,
    scfg: &SvddConfig,
    embedder: Option<&dyn Embedder>,
) -> Result<CellResult> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut outputs = Vec::with_capacity(test.len());
    for (i, (src, _)) in test.iter().enumerate() {
        let mut rng = item_rng(dcfg.seed, i);
        outputs.push(decode_one(denoiser, vocab, src, max_source_len, dcfg, scfg, embedder, &mut rng)?);
    }
    let cands: Vec<Vec<String>> = outputs
        .iter()
        .map(|o| o.output.split_whitespace().map(String::from).collect())
        .collect();
    let refs: Vec<Vec<Vec<String>>> = test.iter().map(|(_, t)| vec![t.clone()]).collect();
    let srcs: Vec<Vec<String>> = test.iter().map(|(s, _)| s.clone()).collect();
    let metrics = evaluate_run(&cands, &refs, Some(&srcs))?;
    let reward = embedder.map(|_| outputs.iter().filter_map(|o| o.reward).sum::<f64>() / outputs.len() as f64);
    Ok(CellResult {
        metrics,
        reward,
        outputs,
    })
}

fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

fn load_test(cfg: &RunConfig) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let path = require(&cfg.test_data, "data.test")?;
    Ok(read_jsonl(&path)?.into_iter().map(|p| (p.source, p.target)).collect())
}

/// Runs the factorial grid, skipping cells already present in the CSV.
/// Returns the number of cells run.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<usize> {
    cfg.validate()?;
    let scfg_base = cfg.svdd_config()?;
    let (vocab, model) = load_model(cfg)?;
    let embedder = build_embedder(cfg)?;
    let test = load_test(cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(SWEEP_FILE);

    let existing = read_sweep(&path)?;
    let done: HashSet<_> = existing.iter().map(SweepRow::key).collect();
    let cells = sweep_cells(cfg);
    let order: Vec<_> = cells.iter().map(|c| (c.steps, c.gamma.to_bits(), c.m, c.seed)).collect();
    let todo: Vec<Cell> = cells
        .into_iter()
        .filter(|c| !done.contains(&(c.steps, c.gamma.to_bits(), c.m, c.seed)))
        .collect();
    info!("sweep: {} cells to run, {} already done", todo.len(), done.len());

    let rows = Mutex::new(existing);
    let next = AtomicUsize::new(0);
    let write_err: Mutex<Option<Error>> = Mutex::new(None);
    let run = |cell: &Cell| -> SweepRow {
        let mut row = SweepRow {
            steps: cell.steps,
            gamma: cell.gamma,
            m: cell.m,
            seed: cell.seed,
            mode: cfg.mode.to_string(),
            selection: cfg.selection.clone(),
            alpha: cfg.alpha,
            value_fill: cfg.value_fill.to_string(),
            target_len: cfg.max_target_len,
            weights: match cfg.weights {
                Weights::Ema => "ema".into(),
                Weights::Raw => "raw".into(),
            },
            verifier: cfg.verifier_name().to_string(),
            n: test.len(),
            bleu: None,
            rouge_l: None,
            sari: None,
            exact_match: None,
            reward: None,
            error: String::new(),
        };
        let result = GuidanceScale::new(cell.gamma).and_then(|gamma| {
            let dcfg = DecodeConfig {
                steps: cell.steps,
                gamma,
                seed: cell.seed,
                ..cfg.decode_config()
            };
            let scfg = SvddConfig { m: cell.m, ..scfg_base };
            run_cell(&model, &vocab, &test, cfg.max_source_len, &dcfg, &scfg, embedder.as_deref())
        });
        match result {
            Ok(r) => {
                row.bleu = r.metrics.get("bleu").copied();
                row.rouge_l = r.metrics.get("rouge_l").copied();
                row.sari = r.metrics.get("sari").copied();
                row.exact_match = r.metrics.get("exact_match").copied();
                row.reward = r.reward;
            }
            Err(e) => {
                log::warn!("cell steps={} gamma={} m={} seed={} failed: {e}", cell.steps, cell.gamma, cell.m, cell.seed);
                row.error = e.to_string();
            }
        }
        row
    };
    let rank = |r: &SweepRow| order.iter().position(|k| *k == r.key()).unwrap_or(usize::MAX);

    std::thread::scope(|scope| {
        for _ in 0..cfg.jobs.min(todo.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = todo.get(i) else { break };
                let row = run(cell);
                let mut rows = rows.lock().unwrap();
                rows.push(row);
                rows.sort_by_key(|r| rank(r));
                if let Err(e) = write_sweep(&path, &rows) {
                    *write_err.lock().unwrap() = Some(e);
                }
            });
        }
    });
    if let Some(e) = write_err.into_inner().unwrap() {
        return Err(e);
    }
    Ok(todo.len())
}

#[derive(Deserialize)]
struct OutputLine {
    output: String,
}

#[derive(Deserialize)]
struct ReferenceLine {
    #[serde(default)]
    target: Option<String>,
    #[serde(default)]
    targets: Option<Vec<String>>,
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Scores one or more candidate files (one per run) against references.
/// Reference lines carry `target` or `targets`; source lines carry `source`.
pub fn cmd_eval(candidates: &[PathBuf], references: &Path, sources: Option<&Path>) -> Result<EvalReport> {
    if candidates.is_empty() {
        return Err(Error::Config("at least one candidates file is required".into()));
    }
    let refs: Vec<Vec<Vec<String>>> = read_lines::<ReferenceLine>(references)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| match (r.target, r.targets) {
            (_, Some(ts)) if !ts.is_empty() => Ok(ts.iter().map(|t| words(t)).collect()),
            (Some(t), _) => Ok(vec![words(&t)]),
            _ => Err(Error::Parse {
                path: references.to_path_buf(),
                line: i + 1,
                msg: "no `target` or `targets` field".into(),
            }),
        })
        .collect::<Result<_>>()?;
    let srcs: Option<Vec<Vec<String>>> = match sources {
        Some(p) => {
            let s: Vec<Vec<String>> = read_lines::<SourceLine>(p)?.iter().map(|l| words(&l.source)).collect();
            if s.len() != refs.len() {
                return Err(Error::Contract(format!(
                    "{} sources but {} references",
                    s.len(),
                    refs.len()
                )));
            }
            Some(s)
        }
        None => None,
    };
    let mut runs = Vec::with_capacity(candidates.len());
    for path in candidates {
        let cands: Vec<Vec<String>> = read_lines::<OutputLine>(path)?.iter().map(|l| words(&l.output)).collect();
        if cands.len() != refs.len() {
            return Err(Error::Contract(format!(
                "{} has {} candidates but there are {} references",
                path.display(),
                cands.len(),
                refs.len()
            )));
        }
        runs.push(evaluate_run(&cands, &refs, srcs.as_deref())?);
    }
    EvalReport::from_runs(&runs)
}

/// Writes a synthetic corpus and, optionally, its word-vector table.
pub fn cmd_gen(
    task: &str,
    size: usize,
    seed: u64,
    output: &Path,
    wordvecs: Option<(&Path, usize, f64)>,
) -> Result<()> {
    let mut rng = seeded_rng(seed);
    let pairs = gen_synthetic_task(task, size, &mut rng)?;
    write_jsonl(output, &pairs)?;
    if let Some((path, dim, noise)) = wordvecs {
        let t: SyntheticTask = task.parse()?;
        t.wordvec_table(dim, noise, &mut seeded_rng(seed ^ 0x5eed))
            .save(path)?;
    }
    Ok(())
}
