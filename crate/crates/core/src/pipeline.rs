//! Command implementations behind the `pd` binary.
//!
//! A [`Workspace`] wraps a validated [`RunConfig`] and places every artifact
//! at a fixed path below `out_dir`:
//!
//! ```text
//! bpe.txt                      prepare.json
//! teachers/<code>.pdck         teachers/<code>.json
//! traces/<code>.k<K>.pdtk      traces/<code>.k<K>.json
//! multi/<name>/{best,last}.pdck, multi/<name>/report.json
//! eval/<name>.<code>.<split>.{json,hyp}
//! back/<code>.pdck, back/<code>.k<K>.pdtk, back/<code>.json
//! seqkd/train.<base>-<code>.{src,tgt}, seqkd/<code>.json
//! perturb/<name>.csv, perturb/<name>.json
//! ```
//!
//! Every report is a [`Report`]: a header carrying the only timestamp, the
//! full config echo and a command-specific body.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{learn_bpe, BpeError, BpeModel};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{
    load_parallel, read_lines, upsample, CorpusError, LanguagePair, LoadOptions, ParallelCorpus,
};
use crate::eval::{evaluate_corpus, BleuReport, EvalError};
use crate::model::{
    load_checkpoint, save_checkpoint, CheckpointError, ModelConfig, ModelError, Params,
};
use crate::synth::{self, SynthError, SynthManifest, SynthSpec};
use crate::teacher::{self, load_trace, save_trace, SeqKdReport, TeacherError, TeacherTrace};
use crate::trainer::{
    self, corpus_nll, train_multilingual, train_single, FlagPolicy, Teachers, TrainError,
    TrainMode, TrainReport,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("pair {0:?} is not listed in data.pairs")]
    UnknownPair(String),
    #[error("data.pairs is empty")]
    NoPairs,
    #[error("{path} was built for vocabulary {found}, the BPE model has {expected}")]
    VocabMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("unknown split {0:?}; expected train, dev or test")]
    UnknownSplit(String),
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(io_err(dir)),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub command: String,
    pub version: String,
    /// Seconds since the Unix epoch; the only field that differs between
    /// reruns with identical inputs.
    pub created_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub header: Header,
    pub config: RunConfig,
    pub body: T,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_report<T: DeserializeOwned>(path: &Path) -> Result<Report<T>> {
    read_json(path)
}

/// Which flag schedule a multilingual run follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultiMode {
    /// Plain NLL on every pair; no teachers needed.
    Baseline,
    /// Selective distillation (flags follow the dev-BLEU check).
    Distill,
    /// Distill every pair at every step.
    Always,
    /// Teachers loaded but every flag forced off.
    Off,
}

impl MultiMode {
    pub fn name(self) -> &'static str {
        match self {
            MultiMode::Baseline => "baseline",
            MultiMode::Distill => "distill",
            MultiMode::Always => "always",
            MultiMode::Off => "off",
        }
    }

    fn train_mode(self) -> TrainMode {
        let policy = match self {
            MultiMode::Baseline => return TrainMode::Baseline,
            MultiMode::Distill => FlagPolicy::Selective,
            MultiMode::Always => FlagPolicy::AlwaysOn,
            MultiMode::Off => FlagPolicy::AlwaysOff,
        };
        TrainMode::Distill { policy }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub code: String,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub bpe: PathBuf,
    pub vocab_size: usize,
    pub merges: usize,
    pub pairs: Vec<PairSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub pair: String,
    pub checkpoint: PathBuf,
    /// BLEU on the capped dev subset used by the multilingual checks.
    pub dev_bleu: f64,
    pub test: BleuReport,
    pub train: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub pair: String,
    pub path: PathBuf,
    pub k: usize,
    pub examples: usize,
    pub positions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiReport {
    pub name: String,
    pub mode: MultiMode,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub train: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: PathBuf,
    pub pair: String,
    pub split: String,
    pub hypotheses: PathBuf,
    pub bleu: BleuReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackReport {
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub result: trainer::BackDistillReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqKdSummary {
    pub pair: String,
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub result: SeqKdReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbRow {
    pub sigma: f64,
    /// Mean over pairs of the token-mean NLL on the full dev sets.
    pub dev_loss: f64,
    /// Mean over pairs of BLEU on the capped dev subsets.
    pub dev_bleu: f64,
    pub per_pair_loss: Vec<f64>,
    pub per_pair_bleu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbReport {
    pub model: PathBuf,
    pub csv: PathBuf,
    pub seed: u64,
    /// The unperturbed model, scored without going through the perturbation.
    pub reference: PerturbRow,
    pub rows: Vec<PerturbRow>,
}

/// Generates the synthetic benchmark into `dir`. The manifest written next
/// to the corpora is the command's report.
pub fn cmd_synth(spec: &SynthSpec, dir: &Path) -> Result<SynthManifest> {
    spec.validate()?;
    let data = synth::generate(spec)?;
    Ok(synth::write(&data, dir, &Default::default())?)
}

pub struct Workspace {
    pub config: RunConfig,
}

impl Workspace {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Workspace { config })
    }

    fn out(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.config.out_dir.join(rel)
    }

    pub fn bpe_path(&self) -> PathBuf {
        self.out("bpe.txt")
    }

    pub fn teacher_checkpoint(&self, code: &str) -> PathBuf {
        self.out(format!("teachers/{code}.pdck"))
    }

    pub fn teacher_report(&self, code: &str) -> PathBuf {
        self.out(format!("teachers/{code}.json"))
    }

    pub fn trace_path(&self, code: &str) -> PathBuf {
        self.out(format!("traces/{code}.k{}.pdtk", self.config.distill.topk))
    }

    pub fn multi_dir(&self, name: &str) -> PathBuf {
        self.out(format!("multi/{name}"))
    }

    pub fn eval_report(&self, name: &str, code: &str, split: &str) -> PathBuf {
        self.out(format!("eval/{name}.{code}.{split}.json"))
    }

    pub fn perturb_report(&self, name: &str) -> PathBuf {
        self.out(format!("perturb/{name}.json"))
    }

    fn codes(&self) -> Result<&[String]> {
        match self.config.data.pairs.as_slice() {
            [] => Err(PipelineError::NoPairs),
            codes => Ok(codes),
        }
    }

    fn language_pair(&self, code: &str) -> Result<LanguagePair> {
        let id = self
            .codes()?
            .iter()
            .position(|c| c == code)
            .ok_or_else(|| PipelineError::UnknownPair(code.into()))?;
        Ok(LanguagePair::new(id, &self.config.data.base, code)?)
    }

    fn split_files(&self, code: &str, split: &str) -> (PathBuf, PathBuf) {
        synth::split_paths(&self.config.data.dir, &self.config.data.base, code, split)
    }

    fn write_report<T: Serialize>(&self, path: &Path, command: &str, body: &T) -> Result<()> {
        #[derive(Serialize)]
        struct Out<'a, T> {
            header: Header,
            config: &'a RunConfig,
            body: &'a T,
        }
        let created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let header = Header {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            created_unix,
        };
        write_json(
            path,
            &Out {
                header,
                config: &self.config,
                body,
            },
        )
    }

    pub fn load_bpe(&self) -> Result<BpeModel> {
        Ok(BpeModel::load(&self.bpe_path())?)
    }

    pub fn load_split(&self, bpe: &BpeModel, code: &str, split: &str) -> Result<ParallelCorpus> {
        if !matches!(split, "train" | "dev" | "test") {
            return Err(PipelineError::UnknownSplit(split.into()));
        }
        let (src, tgt) = self.split_files(code, split);
        let opts = LoadOptions {
            max_len: self.config.data.max_len,
            tag_source: true,
        };
        Ok(load_parallel(&src, &tgt, self.language_pair(code)?, bpe, opts)?)
    }

    fn load_model(&self, path: &Path, bpe: &BpeModel) -> Result<Params<f32>> {
        let params = load_checkpoint(path, None)?;
        if params.config.vocab_size != bpe.vocab_size() {
            return Err(PipelineError::VocabMismatch {
                path: path.to_path_buf(),
                expected: bpe.vocab_size(),
                found: params.config.vocab_size,
            });
        }
        Ok(params)
    }

    fn teacher_config(&self, bpe: &BpeModel) -> ModelConfig {
        self.config
            .model_config(self.config.train.teacher_dropout, bpe.vocab_size())
    }

    fn student_config(&self, bpe: &BpeModel) -> ModelConfig {
        self.config
            .model_config(self.config.train.student_dropout, bpe.vocab_size())
    }

    fn capped_dev_bleu(&self, params: &Params<f32>, dev: &ParallelCorpus, bpe: &BpeModel) -> Result<f64> {
        let capped = dev.head(self.config.train.dev_cap);
        Ok(evaluate_corpus(params, &capped, bpe, self.config.decode)?.0.bleu)
    }

    /// Learns the joint BPE model on every pair's training text.
    pub fn prepare(&self) -> Result<PrepareReport> {
        let codes = self.codes()?;
        let mut texts = Vec::with_capacity(2 * codes.len());
        for code in codes {
            let (src, tgt) = self.split_files(code, "train");
            texts.push(read_lines(&src)?);
            texts.push(read_lines(&tgt)?);
        }
        let bpe = learn_bpe(&texts, self.config.data.bpe_merges, codes)?;
        let path = self.bpe_path();
        create_parent(&path)?;
        bpe.save(&path)?;
        let mut pairs = Vec::new();
        for code in codes {
            let sizes: Vec<ParallelCorpus> = ["train", "dev", "test"]
                .iter()
                .map(|s| self.load_split(&bpe, code, s))
                .collect::<Result<_>>()?;
            pairs.push(PairSummary {
                code: code.clone(),
                train: sizes[0].len(),
                dev: sizes[1].len(),
                test: sizes[2].len(),
                dropped: sizes.iter().map(|c| c.dropped).sum(),
            });
        }
        let report = PrepareReport {
            bpe: path,
            vocab_size: bpe.vocab_size(),
            merges: bpe.merges().len(),
            pairs,
        };
        self.write_report(&self.out("prepare.json"), "prepare", &report)?;
        Ok(report)
    }

    /// Trains the individual model of one pair with plain NLL.
    pub fn train_teacher(&self, code: &str) -> Result<TeacherReport> {
        let bpe = self.load_bpe()?;
        let train = self.load_split(&bpe, code, "train")?;
        let dev = self.load_split(&bpe, code, "dev")?;
        let test = self.load_split(&bpe, code, "test")?;
        let plan = self.config.plan(self.config.train.teacher_steps);
        let outcome = train_single(&self.teacher_config(&bpe), &plan, &train, &dev, &bpe, None, None)?;
        let checkpoint = self.teacher_checkpoint(code);
        create_parent(&checkpoint)?;
        save_checkpoint(&outcome.best, &checkpoint)?;
        let report = TeacherReport {
            pair: train.pair.name(),
            checkpoint,
            dev_bleu: self.capped_dev_bleu(&outcome.best, &dev, &bpe)?,
            test: evaluate_corpus(&outcome.best, &test, &bpe, self.config.decode)?.0,
            train: outcome.report,
        };
        self.write_report(&self.teacher_report(code), "train-teacher", &report)?;
        Ok(report)
    }

    /// Writes the top-K trace of one teacher on its training corpus.
    pub fn export_topk(&self, code: &str) -> Result<TraceReport> {
        let bpe = self.load_bpe()?;
        let train = self.load_split(&bpe, code, "train")?;
        let teacher = self.load_model(&self.teacher_checkpoint(code), &bpe)?;
        let trace = teacher::export_topk(&teacher, &train, self.config.distill.topk)?;
        let path = self.trace_path(code);
        create_parent(&path)?;
        save_trace(&trace, &path)?;
        let report = TraceReport {
            pair: train.pair.name(),
            path: path.clone(),
            k: trace.k,
            examples: trace.entries.len(),
            positions: (0..trace.entries.len()).map(|i| trace.positions(i)).sum(),
        };
        self.write_report(&path.with_extension("json"), "export-topk", &report)?;
        Ok(report)
    }

    /// Loads every teacher trace and scores every teacher on its capped dev
    /// set once, before training starts.
    fn load_teachers(
        &self,
        bpe: &BpeModel,
        trains: &[ParallelCorpus],
        devs: &[ParallelCorpus],
    ) -> Result<(Vec<TeacherTrace>, Vec<f64>)> {
        let mut traces = Vec::new();
        let mut bleus = Vec::new();
        for ((code, train), dev) in self.codes()?.iter().zip(trains).zip(devs) {
            let trace = load_trace(&self.trace_path(code), Some(self.config.distill.topk))?;
            trace.check_alignment(train)?;
            traces.push(trace);
            let teacher = self.load_model(&self.teacher_checkpoint(code), bpe)?;
            bleus.push(self.capped_dev_bleu(&teacher, dev, bpe)?);
        }
        Ok((traces, bleus))
    }

    /// Algorithm 1 over all configured pairs.
    pub fn train_multi(&self, mode: MultiMode, name: Option<&str>) -> Result<MultiReport> {
        let bpe = self.load_bpe()?;
        let codes = self.codes()?;
        let mut trains = Vec::new();
        let mut devs = Vec::new();
        for code in codes {
            trains.push(self.load_split(&bpe, code, "train")?);
            devs.push(self.load_split(&bpe, code, "dev")?);
        }
        let teachers = match mode {
            MultiMode::Baseline => None,
            _ => Some(self.load_teachers(&bpe, &trains, &devs)?),
        };
        let dataset = upsample(trains, self.config.seed)?;
        let plan = self.config.plan(self.config.train.student_steps);
        let outcome = train_multilingual(
            &self.student_config(&bpe),
            &plan,
            mode.train_mode(),
            &dataset,
            &devs,
            &bpe,
            teachers.as_ref().map(|(traces, dev_bleu)| Teachers { traces, dev_bleu }),
            None,
        )?;
        let name = name.unwrap_or(mode.name());
        let dir = self.multi_dir(name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let best_checkpoint = dir.join("best.pdck");
        let last_checkpoint = dir.join("last.pdck");
        save_checkpoint(&outcome.best, &best_checkpoint)?;
        save_checkpoint(&outcome.last, &last_checkpoint)?;
        let report = MultiReport {
            name: name.into(),
            mode,
            best_checkpoint,
            last_checkpoint,
            train: outcome.report,
        };
        self.write_report(&dir.join("report.json"), "train-multi", &report)?;
        Ok(report)
    }

    /// Decodes one split of one pair and writes hypotheses plus a BLEU report.
    pub fn evaluate(&self, model: &Path, name: &str, code: &str, split: &str) -> Result<EvalReport> {
        let bpe = self.load_bpe()?;
        let params = self.load_model(model, &bpe)?;
        let corpus = self.load_split(&bpe, code, split)?;
        let (bleu, hyps) = evaluate_corpus(&params, &corpus, &bpe, self.config.decode)?;
        let path = self.eval_report(name, code, split);
        let hypotheses = path.with_extension("hyp");
        create_parent(&path)?;
        let mut text = hyps.join("\n");
        text.push('\n');
        fs::write(&hypotheses, text).map_err(io_err(&hypotheses))?;
        let report = EvalReport {
            model: model.to_path_buf(),
            pair: corpus.pair.name(),
            split: split.into(),
            hypotheses,
            bleu,
        };
        self.write_report(&path, "evaluate", &report)?;
        Ok(report)
    }

    /// Distills the multilingual model back into the individual model of one
    /// pair, starting from its teacher checkpoint when `from_teacher` is set.
    pub fn back_distill(&self, multi: &Path, code: &str, from_teacher: bool) -> Result<BackReport> {
        let bpe = self.load_bpe()?;
        let student = self.load_model(multi, &bpe)?;
        let init = if from_teacher {
            Some(self.load_model(&self.teacher_checkpoint(code), &bpe)?)
        } else {
            None
        };
        let train = self.load_split(&bpe, code, "train")?;
        let dev = self.load_split(&bpe, code, "dev")?;
        let plan = self.config.plan(self.config.train.teacher_steps);
        let (outcome, trace, result) = trainer::back_distill(
            &student,
            init,
            &self.teacher_config(&bpe),
            &plan,
            &train,
            &dev,
            &bpe,
        )?;
        let checkpoint = self.out(format!("back/{code}.pdck"));
        let trace_path = self.out(format!("back/{code}.k{}.pdtk", plan.topk));
        create_parent(&checkpoint)?;
        save_checkpoint(&outcome.best, &checkpoint)?;
        save_trace(&trace, &trace_path)?;
        let report = BackReport {
            checkpoint,
            trace: trace_path,
            result,
        };
        self.write_report(&self.out(format!("back/{code}.json")), "back-distill", &report)?;
        Ok(report)
    }

    /// Writes the teacher's beam translations of the training sources as a
    /// pseudo-parallel corpus.
    pub fn export_seqkd(&self, code: &str) -> Result<SeqKdSummary> {
        let bpe = self.load_bpe()?;
        let teacher = self.load_model(&self.teacher_checkpoint(code), &bpe)?;
        let train = self.load_split(&bpe, code, "train")?;
        let (src, tgt) = synth::split_paths(&self.out("seqkd"), &self.config.data.base, code, "train");
        let report_path = self.out(format!("seqkd/{code}.json"));
        create_parent(&src)?;
        let sidecar = self.out(format!("seqkd/{code}.truncated.json"));
        let result =
            teacher::export_seqkd(&teacher, &train, &bpe, self.config.decode, &src, &tgt, &sidecar)?;
        let report = SeqKdSummary {
            pair: train.pair.name(),
            src,
            tgt,
            result,
        };
        self.write_report(&report_path, "export-seqkd", &report)?;
        Ok(report)
    }

    fn perturb_row(
        &self,
        sigma: f64,
        params: &Params<f32>,
        devs: &[ParallelCorpus],
        bpe: &BpeModel,
    ) -> Result<PerturbRow> {
        let mut per_pair_loss = Vec::new();
        let mut per_pair_bleu = Vec::new();
        for dev in devs {
            per_pair_loss.push(corpus_nll(params, dev)?);
            per_pair_bleu.push(self.capped_dev_bleu(params, dev, bpe)?);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(PerturbRow {
            sigma,
            dev_loss: mean(&per_pair_loss),
            dev_bleu: mean(&per_pair_bleu),
            per_pair_loss,
            per_pair_bleu,
        })
    }

    /// Scores perturbed copies of a model over a σ grid (the configured one
    /// unless `sigmas` is given) and writes `sigma,dev_loss,dev_bleu` rows.
    pub fn perturb(&self, model: &Path, name: &str, sigmas: Option<&[f64]>) -> Result<PerturbReport> {
        let bpe = self.load_bpe()?;
        let params = self.load_model(model, &bpe)?;
        let devs: Vec<ParallelCorpus> = self
            .codes()?
            .iter()
            .map(|c| self.load_split(&bpe, c, "dev"))
            .collect::<Result<_>>()?;
        let seed = self.config.perturb.seed;
        let reference = self.perturb_row(0.0, &params, &devs, &bpe)?;
        let mut rows = Vec::new();
        for &sigma in sigmas.unwrap_or(&self.config.perturb.sigmas) {
            let noisy = params.perturb(sigma, seed)?;
            rows.push(self.perturb_row(sigma, &noisy, &devs, &bpe)?);
        }
        let path = self.perturb_report(name);
        let csv = path.with_extension("csv");
        create_parent(&path)?;
        let mut text = String::from("sigma,dev_loss,dev_bleu\n");
        for r in &rows {
            text.push_str(&format!("{},{},{}\n", r.sigma, r.dev_loss, r.dev_bleu));
        }
        fs::write(&csv, text).map_err(io_err(&csv))?;
        let report = PerturbReport {
            model: model.to_path_buf(),
            csv,
            seed,
            reference,
            rows,
        };
        self.write_report(&path, "perturb", &report)?;
        Ok(report)
    }
}

/// Parses a CSV written by [`Workspace::perturb`] into `(σ, loss, bleu)`.
pub fn read_perturb_csv(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let lines = read_lines(path)?;
    let bad = || PipelineError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, "malformed perturbation CSV"),
    };
    if lines.first().map(String::as_str) != Some("sigma,dev_loss,dev_bleu") {
        return Err(bad());
    }
    lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
            match f.as_slice() {
                [s, l, b] => Ok((*s, *l, *b)),
                _ => Err(bad()),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_map_onto_flag_policies() {
        assert_eq!(MultiMode::Baseline.train_mode(), TrainMode::Baseline);
        assert_eq!(
            MultiMode::Off.train_mode(),
            TrainMode::Distill {
                policy: FlagPolicy::AlwaysOff
            }
        );
        assert_eq!(
            serde_json::to_string(&MultiMode::Distill).unwrap(),
            "\"distill\""
        );
    }

    #[test]
    fn artifact_paths_follow_the_layout() {
        let mut c = RunConfig::default();
        c.out_dir = "runs/a".into();
        c.data.pairs = vec!["xa".into()];
        c.distill.topk = 3;
        let w = Workspace::new(c).unwrap();
        assert_eq!(w.trace_path("xa"), PathBuf::from("runs/a/traces/xa.k3.pdtk"));
        assert_eq!(w.eval_report("m", "xa", "dev"), PathBuf::from("runs/a/eval/m.xa.dev.json"));
        assert!(matches!(w.language_pair("xb"), Err(PipelineError::UnknownPair(_))));
    }

    #[test]
    fn perturb_csv_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let v = 0.1f64 + 0.2;
        fs::write(&p, format!("sigma,dev_loss,dev_bleu\n0.05,{v},{}\n", 1.0 / 3.0)).unwrap();
        assert_eq!(read_perturb_csv(&p).unwrap(), vec![(0.05, v, 1.0 / 3.0)]);
        fs::write(&p, "sigma,loss\n").unwrap();
        assert!(read_perturb_csv(&p).is_err());
    }
}
