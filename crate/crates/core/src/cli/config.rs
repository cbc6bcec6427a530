//! Run configuration files.
//!
//! ```text
//! seed = 7
//!
//! [model]
//! arch = embbert
//! v = 8192
//! seq_len = 256
//! d = 128
//! r_d = 16
//! k = 32
//! layers = 4
//!
//! [task]
//! kind = classify      # or regress
//!
//! [train]
//! learning_rate = 0.0003
//! mode = full          # or peft
//!
//! [pretrain]
//! batch_size = 32
//!
//! [paths]
//! dataset = data/train.tsv
//! vocab = vocab.txt
//! ```
//!
//! Every section is optional. Relative paths resolve against the directory
//! of the config file and must exist when the file is loaded.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kv::{Fields, KvDoc, KvSection};
use crate::model::{MaskMode, ModelConfig};
use crate::trainer::{MetricTask, SelectionMetric, TrainSettings};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunPaths {
    /// Plain text, one sentence per line.
    pub corpus: Option<PathBuf>,
    /// Training records, or all records when no other split is given.
    pub dataset: Option<PathBuf>,
    pub dataset_val: Option<PathBuf>,
    pub dataset_test: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Starting point for `train` and `pretrain`, model for `eval`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: Option<ModelConfig>,
    pub task: MetricTask,
    /// Token cap per example before the CLS token; defaults to `seq_len - 1`.
    pub max_tokens: Option<usize>,
    pub mode: MaskMode,
    pub train: TrainSettings,
    pub pretrain: TrainSettings,
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: None,
            task: MetricTask::Classify,
            max_tokens: None,
            mode: MaskMode::All,
            train: TrainSettings::fine_tune(),
            pretrain: TrainSettings::pretrain(),
            paths: RunPaths::default(),
        }
    }
}

fn task_name(t: MetricTask) -> &'static str {
    match t {
        MetricTask::Classify => "classify",
        MetricTask::Regress => "regress",
    }
}

fn metric_name(m: SelectionMetric) -> &'static str {
    match m {
        SelectionMetric::Mcc => "mcc",
        SelectionMetric::Scc => "scc",
    }
}

fn mode_name(m: MaskMode) -> &'static str {
    match m {
        MaskMode::All => "full",
        MaskMode::Peft => "peft",
    }
}

fn pick<T: Copy>(key: &str, value: Option<String>, options: &[(&str, T)]) -> Result<Option<T>> {
    let Some(v) = value else { return Ok(None) };
    options
        .iter()
        .find(|(n, _)| *n == v)
        .map(|(_, t)| Some(*t))
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::InvalidConfig(format!("`{key}` must be one of {}, got `{v}`", names.join("|")))
        })
}

fn read_settings(f: &mut Fields<'_>, mut s: TrainSettings) -> Result<TrainSettings> {
    macro_rules! opt {
        ($($field:ident),*) => {$(
            if let Some(x) = f.get(stringify!($field))? {
                s.$field = x;
            }
        )*};
    }
    opt!(learning_rate, weight_decay, beta1, beta2, eps, epochs, batch_size, min_batches);
    if let Some(x) = f.get("max_steps")? {
        s.max_steps = Some(x);
    }
    let metrics = [("mcc", SelectionMetric::Mcc), ("scc", SelectionMetric::Scc)];
    if let Some(m) = pick("selection_metric", f.get("selection_metric")?, &metrics)? {
        s.selection_metric = m;
    }
    Ok(s)
}

fn write_settings(name: &str, s: &TrainSettings) -> KvSection {
    let mut k = KvSection::new(name);
    k.push("learning_rate", s.learning_rate);
    k.push("weight_decay", s.weight_decay);
    k.push("beta1", s.beta1);
    k.push("beta2", s.beta2);
    k.push("eps", s.eps);
    k.push("epochs", s.epochs);
    k.push("batch_size", s.batch_size);
    k.push("min_batches", s.min_batches);
    if let Some(m) = s.max_steps {
        k.push("max_steps", m);
    }
    k.push("selection_metric", metric_name(s.selection_metric));
    k
}

fn resolve(base: &Path, f: &mut Fields<'_>, key: &str) -> Result<Option<PathBuf>> {
    let Some(raw) = f.get::<String>(key)? else { return Ok(None) };
    let p = base.join(raw);
    if !p.exists() {
        return Err(Error::InvalidConfig(format!("[paths] {key}: {} does not exist", p.display())));
    }
    Ok(Some(p))
}

impl RunConfig {
    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        let mut cfg = RunConfig::default();
        for section in &doc.sections {
            let mut f = section.fields();
            match section.name.as_str() {
                "" => {
                    cfg.seed = f.get("seed")?.unwrap_or(0);
                }
                "model" => {
                    cfg.model = Some(ModelConfig::from_section(section)?);
                    continue;
                }
                "task" => {
                    let kinds = [("classify", MetricTask::Classify), ("regress", MetricTask::Regress)];
                    cfg.task = pick("kind", f.get("kind")?, &kinds)?.unwrap_or(MetricTask::Classify);
                    cfg.max_tokens = f.get("max_tokens")?;
                }
                "train" => {
                    let modes = [("full", MaskMode::All), ("peft", MaskMode::Peft)];
                    cfg.mode = pick("mode", f.get("mode")?, &modes)?.unwrap_or(MaskMode::All);
                    cfg.train = read_settings(&mut f, cfg.train)?;
                }
                "pretrain" => {
                    cfg.pretrain = read_settings(&mut f, cfg.pretrain)?;
                }
                "paths" => {
                    cfg.paths = RunPaths {
                        corpus: resolve(base, &mut f, "corpus")?,
                        dataset: resolve(base, &mut f, "dataset")?,
                        dataset_val: resolve(base, &mut f, "dataset_val")?,
                        dataset_test: resolve(base, &mut f, "dataset_test")?,
                        vocab: resolve(base, &mut f, "vocab")?,
                        checkpoint: resolve(base, &mut f, "checkpoint")?,
                    };
                }
                other => return Err(Error::InvalidConfig(format!("unknown section [{other}]"))),
            }
            f.finish()?;
        }
        // a regression task selects on SCC unless told otherwise
        let has_metric = |name: &str| {
            doc.section(name)
                .is_some_and(|s| s.entries.iter().any(|e| e.key == "selection_metric"))
        };
        if cfg.task == MetricTask::Regress && !has_metric("train") {
            cfg.train.selection_metric = SelectionMetric::Scc;
        }
        if cfg.task == MetricTask::Regress && !has_metric("pretrain") {
            cfg.pretrain.selection_metric = SelectionMetric::Scc;
        }
        cfg.train.seed = cfg.seed;
        cfg.pretrain.seed = cfg.seed;
        cfg.train.validate()?;
        cfg.pretrain.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Writes every field explicitly; paths are written as resolved.
    pub fn to_text(&self) -> String {
        let mut top = KvSection::new("");
        top.push("seed", self.seed);
        let mut sections = vec![top];
        if let Some(m) = &self.model {
            sections.push(m.to_section("model"));
        }
        let mut task = KvSection::new("task");
        task.push("kind", task_name(self.task));
        if let Some(m) = self.max_tokens {
            task.push("max_tokens", m);
        }
        sections.push(task);
        let mut train = write_settings("train", &self.train);
        train.push("mode", mode_name(self.mode));
        sections.push(train);
        sections.push(write_settings("pretrain", &self.pretrain));
        let mut paths = KvSection::new("paths");
        let p = &self.paths;
        for (key, v) in [
            ("corpus", &p.corpus),
            ("dataset", &p.dataset),
            ("dataset_val", &p.dataset_val),
            ("dataset_test", &p.dataset_test),
            ("vocab", &p.vocab),
            ("checkpoint", &p.checkpoint),
        ] {
            if let Some(v) = v {
                paths.push(key, v.display());
            }
        }
        if !paths.entries.is_empty() {
            sections.push(paths);
        }
        KvDoc { sections }.to_text()
    }

    pub fn require_model(&self) -> Result<&ModelConfig> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("config has no [model] section".into()))
    }

    pub fn require_path<'a>(&'a self, key: &str, p: &'a Option<PathBuf>) -> Result<&'a Path> {
        p.as_deref()
            .ok_or_else(|| Error::InvalidConfig(format!("config has no [paths] {key}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("v.txt"), "x").unwrap();
        let text = "seed = 9\n[model]\narch = embbert\nv = 8192\nseq_len = 256\nd = 128\nr_d = 16\nk = 32\nlayers = 4\n\
                    [task]\nkind = regress\n[train]\nmode = peft\nmax_steps = 5\n[paths]\nvocab = v.txt\n";
        let a = RunConfig::parse(text, dir.path()).unwrap();
        assert_eq!(a.train.selection_metric, SelectionMetric::Scc);
        assert_eq!(a.mode, MaskMode::Peft);
        assert_eq!(a.train.seed, 9);
        let b = RunConfig::parse(&a.to_text(), Path::new("/nonexistent")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_keys_and_missing_paths_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(RunConfig::parse("[train]\nlr = 1\n", dir.path()).is_err());
        assert!(RunConfig::parse("[bogus]\n", dir.path()).is_err());
        assert!(RunConfig::parse("colour = red\n", dir.path()).is_err());
        assert!(matches!(
            RunConfig::parse("[paths]\ncorpus = missing.txt\n", dir.path()),
            Err(Error::InvalidConfig(_))
        ));
        assert!(RunConfig::parse("[task]\nkind = rank\n", dir.path()).is_err());
    }
}
