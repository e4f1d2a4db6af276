//! Run configuration: a sectioned `key = value` file whose keys can all be
//! overridden with `--section.key=value` flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use glta_core::align::{Ablation, LabelPolicy};
use glta_core::data::SyntheticConfig;
use glta_core::head::InferenceMode;

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerationMode {
    Offline,
    External,
}

impl GenerationMode {
    pub fn name(self) -> &'static str {
        match self {
            GenerationMode::Offline => "offline",
            GenerationMode::External => "external",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    /// Tab-separated interactions; empty means the synthetic dataset.
    pub interactions: String,
    pub items: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSection {
    pub dim: usize,
    pub layers: usize,
    pub lr: f64,
    pub epochs: usize,
    pub neg_samples: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub init_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmSection {
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_len: usize,
    pub vocab_cap: usize,
    pub pretrain: bool,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignSection {
    pub k: usize,
    pub label_policy: LabelPolicy,
    pub context: usize,
    pub train_item_projector: bool,
    pub item_epochs: usize,
    pub user_epochs: usize,
    pub lr: f64,
    pub item_batch: usize,
    pub description_tokens: usize,
    pub user_batch: usize,
    /// Cap on profile and prediction tokens.
    pub text_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSection {
    pub mode: GenerationMode,
    pub endpoint: String,
    pub model: String,
    pub terms: usize,
    pub recency: f64,
    pub timeout_secs: u64,
    pub fallback_offline: bool,
    pub max_in_flight: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub ratio: f64,
    pub cutoffs: Vec<usize>,
    pub mode: InferenceMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub work_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSection,
    pub synthetic: SyntheticConfig,
    pub graph: GraphSection,
    pub lm: LmSection,
    pub align: AlignSection,
    pub generation: GenerationSection,
    pub eval: EvalSection,
    pub ablation: Ablation,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSection {
                interactions: String::new(),
                items: String::new(),
            },
            synthetic: SyntheticConfig::default(),
            graph: GraphSection {
                dim: 32,
                layers: 2,
                lr: 1e-3,
                epochs: 200,
                neg_samples: 1,
                batch_size: 1024,
                l2: 1e-5,
                init_std: 0.1,
            },
            lm: LmSection {
                d_model: 64,
                depth: 2,
                heads: 8,
                max_len: 256,
                vocab_cap: 5000,
                pretrain: false,
                pretrain_epochs: 5,
                pretrain_lr: 1e-3,
            },
            align: AlignSection {
                k: 10,
                label_policy: LabelPolicy::History,
                context: 20,
                train_item_projector: false,
                item_epochs: 40,
                user_epochs: 40,
                lr: 1e-2,
                item_batch: 8,
                description_tokens: 24,
                user_batch: 8,
                text_tokens: 8,
            },
            generation: GenerationSection {
                mode: GenerationMode::Offline,
                endpoint: String::from("http://127.0.0.1:8000/v1/chat/completions"),
                model: String::from("local"),
                terms: 8,
                recency: 1.0,
                timeout_secs: 30,
                fallback_offline: true,
                max_in_flight: 4,
            },
            eval: EvalSection {
                ratio: 0.8,
                cutoffs: vec![5, 10],
                mode: InferenceMode::FirstK,
            },
            ablation: Ablation::default(),
            run: RunSection {
                seed: 7,
                work_dir: PathBuf::from("runs/default"),
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect()
}

impl RunConfig {
    /// Sets one `section.key`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data.interactions" => self.data.interactions = v.to_string(),
            "data.items" => self.data.items = v.to_string(),
            "synthetic.users" => self.synthetic.users = parse(key, v)?,
            "synthetic.items" => self.synthetic.items = parse(key, v)?,
            "synthetic.clusters" => self.synthetic.clusters = parse(key, v)?,
            "synthetic.in_cluster_p" => self.synthetic.in_cluster_p = parse(key, v)?,
            "synthetic.noise_p" => self.synthetic.noise_p = parse(key, v)?,
            "synthetic.vocab_per_cluster" => self.synthetic.vocab_per_cluster = parse(key, v)?,
            "synthetic.description_words" => self.synthetic.description_words = parse(key, v)?,
            "synthetic.seed" => self.synthetic.seed = parse(key, v)?,
            "graph.dim" => self.graph.dim = parse(key, v)?,
            "graph.layers" => self.graph.layers = parse(key, v)?,
            "graph.lr" => self.graph.lr = parse(key, v)?,
            "graph.epochs" => self.graph.epochs = parse(key, v)?,
            "graph.neg_samples" => self.graph.neg_samples = parse(key, v)?,
            "graph.batch_size" => self.graph.batch_size = parse(key, v)?,
            "graph.l2" => self.graph.l2 = parse(key, v)?,
            "graph.init_std" => self.graph.init_std = parse(key, v)?,
            "lm.d_model" => self.lm.d_model = parse(key, v)?,
            "lm.depth" => self.lm.depth = parse(key, v)?,
            "lm.heads" => self.lm.heads = parse(key, v)?,
            "lm.max_len" => self.lm.max_len = parse(key, v)?,
            "lm.vocab_cap" => self.lm.vocab_cap = parse(key, v)?,
            "lm.pretrain" => self.lm.pretrain = parse_bool(key, v)?,
            "lm.pretrain_epochs" => self.lm.pretrain_epochs = parse(key, v)?,
            "lm.pretrain_lr" => self.lm.pretrain_lr = parse(key, v)?,
            "align.k" => self.align.k = parse(key, v)?,
            "align.label_policy" => {
                self.align.label_policy = LabelPolicy::parse(v)
                    .ok_or_else(|| Error::Config(format!("{key}: unknown policy {v:?}")))?
            }
            "align.context" => self.align.context = parse(key, v)?,
            "align.train_item_projector" => self.align.train_item_projector = parse_bool(key, v)?,
            "align.item_epochs" => self.align.item_epochs = parse(key, v)?,
            "align.user_epochs" => self.align.user_epochs = parse(key, v)?,
            "align.lr" => self.align.lr = parse(key, v)?,
            "align.item_batch" => self.align.item_batch = parse(key, v)?,
            "align.description_tokens" => self.align.description_tokens = parse(key, v)?,
            "align.user_batch" => self.align.user_batch = parse(key, v)?,
            "align.text_tokens" => self.align.text_tokens = parse(key, v)?,
            "generation.mode" => {
                self.generation.mode = match v {
                    "offline" => GenerationMode::Offline,
                    "external" => GenerationMode::External,
                    _ => return Err(Error::Config(format!("{key}: unknown mode {v:?}"))),
                }
            }
            "generation.endpoint" => self.generation.endpoint = v.to_string(),
            "generation.model" => self.generation.model = v.to_string(),
            "generation.terms" => self.generation.terms = parse(key, v)?,
            "generation.recency" => self.generation.recency = parse(key, v)?,
            "generation.timeout_secs" => self.generation.timeout_secs = parse(key, v)?,
            "generation.fallback_offline" => {
                self.generation.fallback_offline = parse_bool(key, v)?
            }
            "generation.max_in_flight" => self.generation.max_in_flight = parse(key, v)?,
            "eval.ratio" => self.eval.ratio = parse(key, v)?,
            "eval.cutoffs" => self.eval.cutoffs = parse_list(key, v)?,
            "eval.mode" => {
                self.eval.mode = InferenceMode::parse(v)
                    .ok_or_else(|| Error::Config(format!("{key}: unknown mode {v:?}")))?
            }
            "ablation.no_item_align" => self.ablation.no_item_align = parse_bool(key, v)?,
            "ablation.no_user_align" => self.ablation.no_user_align = parse_bool(key, v)?,
            "ablation.no_profile" => self.ablation.no_profile = parse_bool(key, v)?,
            "ablation.no_prediction" => self.ablation.no_prediction = parse_bool(key, v)?,
            "run.seed" => self.run.seed = parse(key, v)?,
            "run.work_dir" => self.run.work_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Every key with its current value, grouped by section in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let b = |v: bool| v.to_string();
        let s = &self.synthetic;
        let g = &self.graph;
        let l = &self.lm;
        let a = &self.align;
        let n = &self.generation;
        let cutoffs: Vec<String> = self.eval.cutoffs.iter().map(usize::to_string).collect();
        vec![
            ("data.interactions", self.data.interactions.clone()),
            ("data.items", self.data.items.clone()),
            ("synthetic.users", s.users.to_string()),
            ("synthetic.items", s.items.to_string()),
            ("synthetic.clusters", s.clusters.to_string()),
            ("synthetic.in_cluster_p", s.in_cluster_p.to_string()),
            ("synthetic.noise_p", s.noise_p.to_string()),
            ("synthetic.vocab_per_cluster", s.vocab_per_cluster.to_string()),
            ("synthetic.description_words", s.description_words.to_string()),
            ("synthetic.seed", s.seed.to_string()),
            ("graph.dim", g.dim.to_string()),
            ("graph.layers", g.layers.to_string()),
            ("graph.lr", g.lr.to_string()),
            ("graph.epochs", g.epochs.to_string()),
            ("graph.neg_samples", g.neg_samples.to_string()),
            ("graph.batch_size", g.batch_size.to_string()),
            ("graph.l2", g.l2.to_string()),
            ("graph.init_std", g.init_std.to_string()),
            ("lm.d_model", l.d_model.to_string()),
            ("lm.depth", l.depth.to_string()),
            ("lm.heads", l.heads.to_string()),
            ("lm.max_len", l.max_len.to_string()),
            ("lm.vocab_cap", l.vocab_cap.to_string()),
            ("lm.pretrain", b(l.pretrain)),
            ("lm.pretrain_epochs", l.pretrain_epochs.to_string()),
            ("lm.pretrain_lr", l.pretrain_lr.to_string()),
            ("align.k", a.k.to_string()),
            ("align.label_policy", a.label_policy.name().to_string()),
            ("align.context", a.context.to_string()),
            ("align.train_item_projector", b(a.train_item_projector)),
            ("align.item_epochs", a.item_epochs.to_string()),
            ("align.user_epochs", a.user_epochs.to_string()),
            ("align.lr", a.lr.to_string()),
            ("align.item_batch", a.item_batch.to_string()),
            ("align.description_tokens", a.description_tokens.to_string()),
            ("align.user_batch", a.user_batch.to_string()),
            ("align.text_tokens", a.text_tokens.to_string()),
            ("generation.mode", n.mode.name().to_string()),
            ("generation.endpoint", n.endpoint.clone()),
            ("generation.model", n.model.clone()),
            ("generation.terms", n.terms.to_string()),
            ("generation.recency", n.recency.to_string()),
            ("generation.timeout_secs", n.timeout_secs.to_string()),
            ("generation.fallback_offline", b(n.fallback_offline)),
            ("generation.max_in_flight", n.max_in_flight.to_string()),
            ("eval.ratio", self.eval.ratio.to_string()),
            ("eval.cutoffs", cutoffs.join(",")),
            ("eval.mode", self.eval.mode.name().to_string()),
            ("ablation.no_item_align", b(self.ablation.no_item_align)),
            ("ablation.no_user_align", b(self.ablation.no_user_align)),
            ("ablation.no_profile", b(self.ablation.no_profile)),
            ("ablation.no_prediction", b(self.ablation.no_prediction)),
            ("run.seed", self.run.seed.to_string()),
            ("run.work_dir", self.run.work_dir.display().to_string()),
        ]
    }

    /// Text form that [`RunConfig::parse`] reads back to an equal config.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let (sec, name) = key.split_once('.').expect("keys are sectioned");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }

    /// Applies a config file's text on top of the defaults. `source` names
    /// the file in error messages.
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: source.to_path_buf(),
                line: n + 1,
                msg,
            };
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| err(String::from("key outside of a [section]")))?;
            cfg.set(&format!("{sec}.{}", key.trim()), value)
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path)
    }

    /// Applies `--section.key=value` flags.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, flags: &[S]) -> Result<()> {
        for flag in flags {
            let flag = flag.as_ref();
            let body = flag
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("override {flag:?} must start with --")))?;
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {flag:?} needs =value")))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.data.interactions.is_empty() != self.data.items.is_empty() {
            return fail("data.interactions and data.items must be given together");
        }
        if self.align.k == 0 || self.align.k >= self.lm.max_len {
            return fail("align.k must be in [1, lm.max_len)");
        }
        if self.eval.cutoffs.is_empty() || self.eval.cutoffs.contains(&0) {
            return fail("eval.cutoffs must be positive");
        }
        if self.eval.cutoffs.iter().any(|&c| c > self.align.k) {
            return fail("eval.cutoffs may not exceed align.k");
        }
        if !(0.0..=1.0).contains(&self.eval.ratio) {
            return fail("eval.ratio must be in [0, 1]");
        }
        if self.generation.max_in_flight == 0 {
            return fail("generation.max_in_flight must be positive");
        }
        Ok(())
    }

    pub fn stage1_path(&self) -> PathBuf {
        self.run.work_dir.join("stage1.ckpt")
    }

    pub fn stage2_path(&self) -> PathBuf {
        self.run.work_dir.join("stage2.ckpt")
    }

    pub fn stage3_path(&self) -> PathBuf {
        self.run.work_dir.join("stage3.ckpt")
    }

    pub fn texts_path(&self) -> PathBuf {
        self.run.work_dir.join("texts.jsonl")
    }

    pub fn log_path(&self, stage: &str) -> PathBuf {
        self.run.work_dir.join(format!("{stage}.log.jsonl"))
    }

    pub fn report_path(&self) -> PathBuf {
        self.run.work_dir.join("report.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["--align.k=7", "--eval.cutoffs=3,7", "--ablation.no_profile=true"])
            .unwrap();
        let back = RunConfig::parse(&c.snapshot(), Path::new("snap")).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.entries().len(), c.snapshot().lines().filter(|l| l.contains('=')).count());
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse("[align]\nk = 3\nbogus\n", Path::new("f.cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(RunConfig::parse("k = 3\n", Path::new("f")).is_err());
        assert!(RunConfig::parse("[align]\nnope = 1\n", Path::new("f")).is_err());
    }

    #[test]
    fn cutoffs_above_k_are_rejected() {
        let mut c = RunConfig::default();
        c.set("eval.cutoffs", "5,20").unwrap();
        assert!(c.validate().is_err());
    }
}
